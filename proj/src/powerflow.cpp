#include "hmg/powerflow.hpp"

#include <cmath>
#include <fstream>

#include "hmg/common.hpp"
#include "hmg/solvers.hpp"
#include <json.hpp>

namespace hmg {

using Eigen::MatrixXd;
using Eigen::VectorXd;

SteadyState solve_hybrid_pf(const DynModel& model, const StepContext& cx) {
    VectorXd x = model.pf_flat_start();
    auto fn = [&](const VectorXd& p, VectorXd* r, MatrixXd* J) { model.pf_eval(p, cx, r, J); };
    NewtonOptions opt;
    opt.tol = 1e-12;
    opt.max_iter = 50;
    NewtonReport rep = newton_solve(fn, x, opt);
    if (!rep.converged)
        throw InfeasibleError("power flow did not converge (residual " +
                              std::to_string(rep.residual_norm) + " after " +
                              std::to_string(rep.iterations) + " iterations)");

    const int n_ac = model.n_ac_bus(), n_dc = model.n_dc_bus(), M = model.n_machines();
    SteadyState ss;
    ss.theta = x.segment(0, n_ac);
    ss.v_ac = x.segment(n_ac, n_ac);
    ss.v_dc = n_dc > 0 ? x.segment(2 * n_ac, n_dc) : VectorXd{};
    ss.delta.resize(M);
    ss.e_q_prime.resize(M);
    ss.p_mach.resize(M);
    ss.q_mach.resize(M);
    const int i_m0 = 2 * n_ac + n_dc;
    for (int m = 0; m < M; ++m) {
        const auto& g = model.machines()[m];
        ss.delta[m] = x[i_m0 + 2 * m];
        ss.e_q_prime[m] = x[i_m0 + 2 * m + 1];
        const int ac = model.ac_ordinal(g.bus);
        const double d = ss.delta[m] - ss.theta[ac];
        const double vb = ss.v_ac[ac];
        ss.p_mach[m] = ss.e_q_prime[m] * vb * std::sin(d) / g.xdp;
        ss.q_mach[m] = (ss.e_q_prime[m] * vb * std::cos(d) - vb * vb) / g.xdp;
    }
    if (model.has_ic()) {
        ss.p_ic = x[i_m0 + 2 * M];
        ss.q_ic = x[i_m0 + 2 * M + 1];
    }

    VectorXd net_p, net_q, net_dc;
    model.network_injections(ss.theta, ss.v_ac, ss.v_dc, net_p, net_q, net_dc);
    const auto& buses = model.system().buses;
    const int nb = static_cast<int>(buses.size());
    ss.p_inj = VectorXd::Zero(nb);
    ss.q_inj = VectorXd::Zero(nb);
    for (int b = 0; b < nb; ++b) {
        if (buses[b].kind == BusKind::ac) {
            ss.p_inj[b] = net_p[model.ac_ordinal(b)];
            ss.q_inj[b] = net_q[model.ac_ordinal(b)];
        } else {
            ss.p_inj[b] = net_dc[model.dc_ordinal(b)];
        }
    }
    ss.f_ss = model.system().f_hz;
    ss.iterations = rep.iterations;
    ss.residual_norm = rep.residual_norm;
    return ss;
}

SteadyState solve_hybrid_pf(const HmgSystem& sys, const DispatchSetpoints& dispatch) {
    DynModel model(sys, dispatch);
    return solve_hybrid_pf(model, model.base_context());
}

DynamicState init_dynamic_state(DynModel& model, const SteadyState& ss) {
    const int M = model.n_machines();
    VectorXd x = VectorXd::Zero(model.state_size());
    StepContext cx = model.base_context();

    std::vector<double> gauge(model.n_ac_subgrids(), 0.0);
    for (int s = 0; s < model.n_ac_subgrids(); ++s) {
        const int sm = model.slack_machine(s);
        gauge[s] = ss.theta[model.ac_ordinal(model.machines()[sm].bus)];
    }
    model.set_gauge(gauge);

    for (int m = 0; m < M; ++m) {
        const auto& g = model.machines()[m];
        const int ac = model.ac_ordinal(g.bus);
        const double vb = ss.v_ac[ac];
        const double delta = ss.delta[m], eqp = ss.e_q_prime[m];
        const double id = (eqp - vb * std::cos(delta - ss.theta[ac])) / g.xdp;
        const double efd = eqp + (g.xd - g.xdp) * id;
        if (efd <= 0.0 || efd > 5.0)
            throw InfeasibleError("machine '" + g.id + "' field voltage " + std::to_string(efd) +
                                  " outside capability range at the steady point");
        const double er = g.ke * efd;
        const double pe = ss.p_mach[m];
        model.set_machine_refs(m, vb + er / g.ka, 2.0 * efd);
        x[model.idx_mach(m, 0)] = delta;
        x[model.idx_mach(m, 1)] = 0.0;
        x[model.idx_mach(m, 2)] = eqp;
        x[model.idx_mach(m, 3)] = efd;
        x[model.idx_mach(m, 4)] = er;
        x[model.idx_mach(m, 5)] = pe;
        x[model.idx_mach(m, 6)] = pe;
        x[model.idx_mach(m, 7)] = efd;
    }
    for (int u = 0; u < model.n_ac_ibr(); ++u) {
        const auto& w = model.ac_ibrs()[u];
        const int ac = model.ac_ordinal(w.bus);
        const double vb = ss.v_ac[ac];
        const double p_eff = std::min(w.p_ref, cx.ibr_alpha[u] * w.cap);
        x[model.idx_ibr(u, 0)] = (w.q_ref + w.dv * (1.0 - vb)) / vb;
        x[model.idx_ibr(u, 1)] = p_eff / vb;
        x[model.idx_ibr(u, 2)] = 0.0;
        x[model.idx_ibr(u, 3)] = 0.0;
    }
    for (int i = 0; i < model.n_ac_bus(); ++i) {
        x[model.idx_theta(i)] = ss.theta[i];
        x[model.idx_v(i)] = ss.v_ac[i];
    }
    for (int j = 0; j < model.n_dc_bus(); ++j) x[model.idx_vdc(j)] = ss.v_dc[j];
    if (model.has_ic()) {
        x[model.idx_pic()] = ss.p_ic;
        x[model.idx_qic()] = ss.q_ic;
    }

    auto fn = [&](const VectorXd& p, VectorXd* r, MatrixXd* J) {
        model.eval(p, nullptr, 0.0, cx, false, r, J);
    };
    NewtonOptions opt;
    opt.tol = 1e-13;
    opt.max_iter = 8;
    NewtonReport rep = newton_solve(fn, x, opt);
    if (!std::isfinite(rep.residual_norm) || rep.residual_norm > 1e-10)
        throw InfeasibleError("equilibrium polish failed (steady residual " +
                              std::to_string(rep.residual_norm) + ")");
    return DynamicState{x, 0.0};
}

VectorXd residual(const DynamicState& next, const DynamicState& prev, double h,
                  const HmgSystem& sys, const EventSet& events,
                  const DispatchSetpoints& dispatch) {
    DynModel model(sys, dispatch);
    init_dynamic_state(model, solve_hybrid_pf(model, model.base_context()));
    StepContext cx = model.context(events, next.t);
    VectorXd r;
    model.eval(next.x, &prev.x, h, cx, false, &r, nullptr);
    return r;
}

VectorXd steady_residual(const DynamicState& s, const HmgSystem& sys, const EventSet& events,
                         const DispatchSetpoints& dispatch) {
    DynModel model(sys, dispatch);
    init_dynamic_state(model, solve_hybrid_pf(model, model.base_context()));
    StepContext cx = model.context(events, s.t);
    VectorXd r;
    model.eval(s.x, nullptr, 0.0, cx, false, &r, nullptr);
    return r;
}

// ---------------------------------------------------------------------------
// Dispatch I/O

using json = nlohmann::json;

DispatchSetpoints load_dispatch(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ValidationError("cannot open dispatch file '" + path + "'");
    json j;
    try {
        j = json::parse(in);
    } catch (const json::exception& e) {
        throw ValidationError("dispatch file '" + path + "': " + e.what());
    }
    DispatchSetpoints d;
    d.day = j.value("day", 0);
    d.slot = j.value("slot", 0);
    d.v_slack = j.value("v_slack", 1.0);
    d.cost = j.value("cost", 0.0);
    auto read_map = [&](const char* key, std::map<std::string, double>& out) {
        json mj = j.value(key, json::object());
        for (const auto& [k, v] : mj.items()) out[k] = v.get<double>();
    };
    read_map("p_dg", d.p_dg);
    read_map("q_dg", d.q_dg);
    read_map("p_ibr", d.p_ibr);
    read_map("q_ibr", d.q_ibr);
    read_map("es_charge", d.es_charge);
    read_map("es_discharge", d.es_discharge);
    read_map("q_es", d.q_es);
    read_map("es_mode", d.es_mode);
    return d;
}

void save_dispatch(const DispatchSetpoints& d, const std::string& path) {
    nlohmann::ordered_json j;
    j["day"] = d.day;
    j["slot"] = d.slot;
    j["v_slack"] = d.v_slack;
    j["cost"] = d.cost;
    auto write_map = [&](const char* key, const std::map<std::string, double>& m) {
        nlohmann::ordered_json mj = nlohmann::ordered_json::object();
        for (const auto& [k, v] : m) mj[k] = v;
        j[key] = mj;
    };
    write_map("p_dg", d.p_dg);
    write_map("q_dg", d.q_dg);
    write_map("p_ibr", d.p_ibr);
    write_map("q_ibr", d.q_ibr);
    write_map("es_charge", d.es_charge);
    write_map("es_discharge", d.es_discharge);
    write_map("q_es", d.q_es);
    write_map("es_mode", d.es_mode);
    std::ofstream out(path);
    if (!out) throw Error("cannot write dispatch file '" + path + "'");
    out << j.dump(2) << "\n";
}

} // namespace hmg
