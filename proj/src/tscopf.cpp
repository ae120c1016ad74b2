#include "hmg/tscopf.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <memory>
#include <sstream>

#include "hmg/common.hpp"
#include "hmg/solvers.hpp"

namespace hmg {

using Eigen::MatrixXd;
using Eigen::VectorXd;

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();
constexpr double kIneqTol = 1e-6;  // scaled inequality violation
constexpr double kStatTol = 1e-4;  // scaled projected-gradient norm
constexpr double kCompWeight = 1e-3; // charge*discharge penalty, kW^2 scale

enum class Field { mach_p, mach_q, ibr_p, ibr_q, es_c, es_d, es_q, es_u };

DispatchSetpoints slot_tag(int day, int slot) {
    DispatchSetpoints sp;
    sp.day = day;
    sp.slot = slot;
    return sp;
}

struct VarRef {
    Field field;
    std::string id;
};

struct MachIneq {
    std::string id;
    int model_idx = -1; // ordinal into SteadyState::p_mach
    bool slack = false;
    double s2 = 0.0;      // s_max^2, p.u.^2
    double tan_phi = 0.0; // reactive cone slope at rated power factor
    double p_lo = 0.0, p_hi = 0.0;
    double c_gen = 0.0;
};

struct EsRef {
    const EsParams* es = nullptr;
    int i_c = -1, i_d = -1, i_q = -1, i_u = -1; // static var indices
    double p_max = 0.0, s2 = 0.0;               // p.u.
    double range_kwh = 0.0;
};

struct IbrRef {
    std::string id;
    int i_p = -1, i_q = -1;
    double s2 = 0.0;
};

/// Packed decision layout of one slot plus everything the inequality
/// evaluator needs resolved ahead of time.
struct Layout {
    std::vector<StaticVar> vars;
    std::vector<VarRef> refs;
    std::vector<MachIneq> machines; // AC machines in model order
    std::vector<std::string> dc_machines;
    std::vector<double> dc_machine_cost; // c_gen per DC machine
    std::vector<IbrRef> ac_ibrs;
    std::vector<EsRef> storages;
    bool has_ic = false;
    double ic_s2 = 0.0;
    std::vector<double> ac_vmin, ac_vmax, dc_vmin, dc_vmax; // per ordinal
    std::vector<std::string> ineq_names;                    // static block
    std::vector<int> es_queue_row; // per storage, row index of its queue_hi
    VectorXd lower, upper;

    int n_vars() const { return static_cast<int>(vars.size()); }
    int n_static_ineq() const { return static_cast<int>(ineq_names.size()); }
    int find(Field f, const std::string& id) const {
        for (size_t j = 0; j < refs.size(); ++j)
            if (refs[j].field == f && refs[j].id == id) return static_cast<int>(j);
        return -1;
    }
};

Layout make_layout(const HmgSystem& sys, const DynModel& model, int day, int slot) {
    Layout lay;
    auto add_var = [&](Field f, const std::string& id, const char* suffix, double lo, double hi) {
        lay.vars.push_back({id + "." + suffix, lo, hi});
        lay.refs.push_back({f, id});
        return static_cast<int>(lay.vars.size()) - 1;
    };

    for (const auto& m : sys.machines) {
        const BusSpec& b = sys.bus(m.bus);
        if (b.kind == BusKind::dc) {
            add_var(Field::mach_p, m.id, "p", m.p_min_pu(sys.base_kva), m.p_max_pu(sys.base_kva));
            lay.dc_machines.push_back(m.id);
            lay.dc_machine_cost.push_back(m.c_gen);
            continue;
        }
        const int mi = static_cast<int>(lay.machines.size());
        const bool slack = model.machines().at(mi).slack;
        if (model.machines().at(mi).id != m.id)
            throw ValidationError("machine ordering mismatch between model and system");
        MachIneq q;
        q.id = m.id;
        q.model_idx = mi;
        q.slack = slack;
        q.s2 = m.s_max_pu(sys.base_kva) * m.s_max_pu(sys.base_kva);
        const double pf2 = m.s_max_kva * m.s_max_kva - m.p_max_kw * m.p_max_kw;
        q.tan_phi = m.p_max_kw > 0.0 ? std::sqrt(std::max(0.0, pf2)) / m.p_max_kw : 0.0;
        q.p_lo = m.p_min_pu(sys.base_kva);
        q.p_hi = m.p_max_pu(sys.base_kva);
        q.c_gen = m.c_gen;
        lay.machines.push_back(q);
        if (!slack) {
            add_var(Field::mach_p, m.id, "p", q.p_lo, q.p_hi);
            add_var(Field::mach_q, m.id, "q", -m.s_max_pu(sys.base_kva),
                    m.s_max_pu(sys.base_kva));
        }
    }

    for (const auto& r : sys.ibrs) {
        const double alpha = sys.availability(day, slot, r);
        const double hi = alpha * r.p_max_pu(sys.base_kva);
        if (r.kind == IbrKind::wt) {
            IbrRef ref;
            ref.id = r.id;
            ref.i_p = add_var(Field::ibr_p, r.id, "p", 0.0, hi);
            ref.i_q = add_var(Field::ibr_q, r.id, "q", -r.s_max_pu(sys.base_kva),
                              r.s_max_pu(sys.base_kva));
            ref.s2 = r.s_max_pu(sys.base_kva) * r.s_max_pu(sys.base_kva);
            lay.ac_ibrs.push_back(ref);
        } else {
            add_var(Field::ibr_p, r.id, "p", 0.0, hi);
        }
    }

    for (const auto& e : sys.storages) {
        EsRef ref;
        ref.es = &e;
        ref.p_max = e.p_max_pu(sys.base_kva);
        ref.s2 = e.s_max_pu(sys.base_kva) * e.s_max_pu(sys.base_kva);
        ref.range_kwh = e.e_max_kwh - e.e_min_kwh;
        ref.i_c = add_var(Field::es_c, e.id, "c", 0.0, ref.p_max);
        ref.i_d = add_var(Field::es_d, e.id, "d", 0.0, ref.p_max);
        if (sys.bus(e.bus).kind == BusKind::ac)
            ref.i_q = add_var(Field::es_q, e.id, "q", -e.s_max_pu(sys.base_kva),
                              e.s_max_pu(sys.base_kva));
        ref.i_u = add_var(Field::es_u, e.id, "u", 0.0, 1.0);
        lay.storages.push_back(ref);
    }

    lay.has_ic = sys.ic.has_value() && model.has_ic();
    if (lay.has_ic)
        lay.ic_s2 = sys.ic->s_max_pu(sys.base_kva) * sys.ic->s_max_pu(sys.base_kva);

    lay.ac_vmin.assign(model.n_ac_bus(), 0.0);
    lay.ac_vmax.assign(model.n_ac_bus(), 0.0);
    lay.dc_vmin.assign(model.n_dc_bus(), 0.0);
    lay.dc_vmax.assign(model.n_dc_bus(), 0.0);
    std::vector<std::string> ac_name(model.n_ac_bus()), dc_name(model.n_dc_bus());
    for (size_t b = 0; b < sys.buses.size(); ++b) {
        const BusSpec& spec = sys.buses[b];
        if (spec.kind == BusKind::ac) {
            const int j = model.ac_ordinal(static_cast<int>(b));
            lay.ac_vmin[j] = spec.v_min;
            lay.ac_vmax[j] = spec.v_max;
            ac_name[j] = spec.id;
        } else {
            const int j = model.dc_ordinal(static_cast<int>(b));
            lay.dc_vmin[j] = spec.v_min;
            lay.dc_vmax[j] = spec.v_max;
            dc_name[j] = spec.id;
        }
    }

    auto& names = lay.ineq_names;
    for (const auto& m : lay.machines) {
        names.push_back(m.id + ".circle");
        names.push_back(m.id + ".cone_hi");
        names.push_back(m.id + ".cone_lo");
        if (m.slack) {
            names.push_back(m.id + ".p_hi");
            names.push_back(m.id + ".p_lo");
        }
    }
    for (const auto& r : lay.ac_ibrs)
        names.push_back(r.id + ".circle");
    for (const auto& e : lay.storages) {
        names.push_back(e.es->id + ".circle");
        names.push_back(e.es->id + ".gate_c");
        names.push_back(e.es->id + ".gate_d");
        lay.es_queue_row.push_back(static_cast<int>(names.size()));
        names.push_back(e.es->id + ".queue_hi");
        names.push_back(e.es->id + ".queue_lo");
    }
    if (lay.has_ic) names.push_back("ic.circle");
    for (int j = 0; j < model.n_ac_bus(); ++j) {
        names.push_back(ac_name[j] + ".v_hi");
        names.push_back(ac_name[j] + ".v_lo");
    }
    for (int j = 0; j < model.n_dc_bus(); ++j) {
        names.push_back(dc_name[j] + ".v_hi");
        names.push_back(dc_name[j] + ".v_lo");
    }

    const int n = lay.n_vars();
    lay.lower.resize(n);
    lay.upper.resize(n);
    for (int j = 0; j < n; ++j) {
        lay.lower[j] = lay.vars[j].lo;
        lay.upper[j] = lay.vars[j].hi;
    }
    return lay;
}

DispatchSetpoints unpack(const Layout& lay, const VectorXd& x, int day, int slot,
                         double v_slack) {
    DispatchSetpoints sp;
    sp.day = day;
    sp.slot = slot;
    sp.v_slack = v_slack;
    for (int j = 0; j < lay.n_vars(); ++j) {
        const VarRef& r = lay.refs[j];
        switch (r.field) {
        case Field::mach_p: sp.p_dg[r.id] = x[j]; break;
        case Field::mach_q: sp.q_dg[r.id] = x[j]; break;
        case Field::ibr_p: sp.p_ibr[r.id] = x[j]; break;
        case Field::ibr_q: sp.q_ibr[r.id] = x[j]; break;
        case Field::es_c: sp.es_charge[r.id] = x[j]; break;
        case Field::es_d: sp.es_discharge[r.id] = x[j]; break;
        case Field::es_q: sp.q_es[r.id] = x[j]; break;
        case Field::es_u: sp.es_mode[r.id] = x[j]; break;
        }
    }
    return sp;
}

VectorXd pack(const Layout& lay, const DispatchSetpoints& sp) {
    VectorXd x(lay.n_vars());
    for (int j = 0; j < lay.n_vars(); ++j) {
        const VarRef& r = lay.refs[j];
        double v = 0.0;
        switch (r.field) {
        case Field::mach_p: v = sp.get(sp.p_dg, r.id); break;
        case Field::mach_q: v = sp.get(sp.q_dg, r.id); break;
        case Field::ibr_p: v = sp.get(sp.p_ibr, r.id); break;
        case Field::ibr_q: v = sp.get(sp.q_ibr, r.id); break;
        case Field::es_c: v = sp.get(sp.es_charge, r.id); break;
        case Field::es_d: v = sp.get(sp.es_discharge, r.id); break;
        case Field::es_q: v = sp.get(sp.q_es, r.id); break;
        case Field::es_u: {
            auto it = sp.es_mode.find(r.id);
            v = it == sp.es_mode.end() ? 0.5 : it->second;
            break;
        }
        }
        x[j] = std::min(lay.vars[j].hi, std::max(lay.vars[j].lo, v));
    }
    return x;
}

/// One candidate evaluation: dispatch -> power flow -> (optionally) the
/// discretized transient window, plus every inequality value in scaled form.
class SlotEval {
public:
    SlotEval(const NlpInstance& nlp, double v_slack)
        : nlp_(nlp), sys_(*nlp.sys), v_slack_(v_slack),
          model_(sys_, slot_tag(nlp.day, nlp.slot)),
          lay_(make_layout(sys_, model_, nlp.day, nlp.slot)) {}

    struct Result {
        bool ok = false;
        std::string fail;
        double obj = 0.0; // queue term + v*f_op + complementarity penalty
        double queue_term = 0.0;
        double f_op = 0.0;
        double comp = 0.0;
        VectorXd g; // scaled inequalities: static block then path block
        SteadyState ss;
        std::vector<VectorXd> xs; // window states when evaluated with path
        double eq_res = 0.0;
    };

    const Layout& layout() const { return lay_; }
    int n_ineq(bool with_path) const {
        return lay_.n_static_ineq() + (with_path ? n_path_ineq() : 0);
    }
    int n_path_ineq() const {
        return (nlp_.n_steps() + 1) *
               2 * (model_.n_ac_subgrids() + model_.n_ac_bus() + model_.n_dc_bus());
    }
    int evaluations() const { return evals_; }
    const HmgSystem& system() const { return sys_; }
    double v_slack() const { return v_slack_; }

    DispatchSetpoints dispatch_of(const VectorXd& x) const {
        return unpack(lay_, x, nlp_.day, nlp_.slot, v_slack_);
    }

    Result eval(const VectorXd& x, const QueueState& queue, bool with_path,
                const std::vector<VectorXd>* hint) {
        ++evals_;
        Result res;
        res.g = VectorXd::Zero(n_ineq(with_path));
        DispatchSetpoints sp = dispatch_of(x);
        model_.set_dispatch(sp);
        try {
            res.ss = solve_hybrid_pf(model_, model_.base_context());
        } catch (const InfeasibleError& e) {
            res.fail = std::string("power flow: ") + e.what();
            return res;
        }
        res.eq_res = res.ss.residual_norm;
        fill_static(x, queue, res);
        if (with_path) {
            if (!simulate_window(x, res, hint)) return res;
            fill_path(res);
        }
        res.ok = true;
        return res;
    }

    /// Measures the worst backward-Euler residual of an externally produced
    /// trajectory (used to report honest equality residuals for the final,
    /// non-smoothed trajectory).
    double trajectory_residual(const Trajectory& traj) {
        if (traj.states.size() < 2) return 0.0;
        model_.set_dispatch(traj.dispatch);
        // Restore the regulator references of this exact dispatch; the last
        // evaluation was a finite-difference probe and left perturbed ones.
        init_dynamic_state(model_, solve_hybrid_pf(model_, model_.base_context()));
        double worst = 0.0;
        VectorXd r(model_.state_size());
        for (size_t k = 1; k < traj.states.size(); ++k) {
            const StepContext cx = model_.context(traj.events_applied, traj.times[k]);
            model_.eval(traj.states[k].x, &traj.states[k - 1].x, traj.h, cx, false, &r, nullptr);
            worst = std::max(worst, r.lpNorm<Eigen::Infinity>());
        }
        return worst;
    }

private:
    void fill_static(const VectorXd& x, const QueueState& queue, Result& res) {
        const double base = sys_.base_kva;
        int row = 0;
        double cost = 0.0;
        for (const auto& m : lay_.machines) {
            const double p = res.ss.p_mach[m.model_idx];
            const double q = res.ss.q_mach[m.model_idx];
            res.g[row++] = p * p + q * q - m.s2;
            res.g[row++] = q - p * m.tan_phi;
            res.g[row++] = -q - p * m.tan_phi;
            if (m.slack) {
                res.g[row++] = p - m.p_hi;
                res.g[row++] = m.p_lo - p;
            }
            cost += m.c_gen * std::max(0.0, p) * base;
        }
        for (size_t i = 0; i < lay_.dc_machines.size(); ++i) {
            const double p = std::max(0.0, x[lay_.find(Field::mach_p, lay_.dc_machines[i])]);
            cost += lay_.dc_machine_cost[i] * p * base;
        }
        for (const auto& r : lay_.ac_ibrs)
            res.g[row++] = x[r.i_p] * x[r.i_p] + x[r.i_q] * x[r.i_q] - r.s2;
        for (const auto& e : lay_.storages) {
            const double pc = x[e.i_c];
            const double pd = x[e.i_d];
            const double qe = e.i_q >= 0 ? x[e.i_q] : 0.0;
            const double u = x[e.i_u];
            const double net = pd - pc;
            res.g[row++] = net * net + qe * qe - e.s2;
            res.g[row++] = pc - u * e.p_max;
            res.g[row++] = pd - (1.0 - u) * e.p_max;
            const double u_kw = queue_input_kw(*e.es, pc * base, pd * base);
            const double q_next = queue.get(e.es->id) + u_kw * sys_.slot_hours;
            const double scale = std::max(1.0, e.range_kwh);
            res.g[row++] = (q_next - e.range_kwh) / scale;
            res.g[row++] = -q_next / scale;
            res.queue_term += queue.get(e.es->id) * u_kw;
            res.comp += kCompWeight * (pc * base) * (pd * base);
        }
        if (lay_.has_ic)
            res.g[row++] = res.ss.p_ic * res.ss.p_ic + res.ss.q_ic * res.ss.q_ic - lay_.ic_s2;
        for (int j = 0; j < model_.n_ac_bus(); ++j) {
            const double v = res.ss.v_ac[j];
            res.g[row++] = v - lay_.ac_vmax[j];
            res.g[row++] = lay_.ac_vmin[j] - v;
        }
        for (int j = 0; j < model_.n_dc_bus(); ++j) {
            const double v = res.ss.v_dc[j];
            res.g[row++] = v - lay_.dc_vmax[j];
            res.g[row++] = lay_.dc_vmin[j] - v;
        }
        res.f_op = cost * sys_.slot_hours;
        res.obj = res.queue_term + nlp_.v_weight * res.f_op + res.comp;
    }

    bool simulate_window(const VectorXd&, Result& res, const std::vector<VectorXd>* hint) {
        DynamicState eq;
        try {
            eq = init_dynamic_state(model_, res.ss);
        } catch (const InfeasibleError& e) {
            res.fail = std::string("equilibrium: ") + e.what();
            return false;
        }
        const int N = nlp_.n_steps();
        res.xs.clear();
        res.xs.reserve(N + 1);
        res.xs.push_back(eq.x);
        NewtonOptions opt;
        opt.tol = 1e-12;
        opt.max_iter = 30;
        VectorXd x_prev = eq.x;
        for (int k = 1; k <= N; ++k) {
            const double t = nlp_.t0_s + k * nlp_.h_s;
            const StepContext cx = model_.context(nlp_.events, t);
            VectorXd xk = (hint && static_cast<int>(hint->size()) > k) ? (*hint)[k] : x_prev;
            auto fn = [&](const VectorXd& p, VectorXd* r, MatrixXd* J) {
                model_.eval(p, &x_prev, nlp_.h_s, cx, true, r, J);
            };
            NewtonReport rep = newton_solve(fn, xk, opt);
            if (!rep.converged) {
                std::ostringstream msg;
                msg << "transient window diverged at step " << k << " (t=" << t
                    << " s, residual " << rep.residual_norm << ")";
                res.fail = msg.str();
                return false;
            }
            res.eq_res = std::max(res.eq_res, rep.residual_norm);
            res.xs.push_back(xk);
            x_prev = xk;
        }
        return true;
    }

    void fill_path(Result& res) {
        int row = lay_.n_static_ineq();
        const int S = model_.n_ac_subgrids();
        for (const auto& xk : res.xs) {
            for (int s = 0; s < S; ++s) {
                const double f = model_.coi_frequency_hz(xk, s);
                res.g[row++] = f - (sys_.limits.f_max_hz - f_margin_);
                res.g[row++] = (sys_.limits.f_min_hz + f_margin_) - f;
            }
            for (int j = 0; j < model_.n_ac_bus(); ++j) {
                const double v = model_.v_ac(xk, j);
                res.g[row++] = v - (lay_.ac_vmax[j] - v_margin_);
                res.g[row++] = (lay_.ac_vmin[j] + v_margin_) - v;
            }
            for (int j = 0; j < model_.n_dc_bus(); ++j) {
                const double v = model_.v_dc(xk, j);
                res.g[row++] = v - (lay_.dc_vmax[j] - v_margin_);
                res.g[row++] = (lay_.dc_vmin[j] + v_margin_) - v;
            }
        }
    }

public:
    /// Widens the transient path bounds relative to the nominal limits. The
    /// coarse-step trajectory undershoots fast excursions, so the fine-step
    /// verification drives these margins until it too stays inside the limits.
    void widen_path_margins(double df_hz, double dv_pu) {
        f_margin_ += df_hz;
        v_margin_ += dv_pu;
    }

private:
    NlpInstance nlp_;
    const HmgSystem& sys_;
    double v_slack_ = 1.0;
    DynModel model_;
    Layout lay_;
    int evals_ = 0;
    double f_margin_ = 0.0;
    double v_margin_ = 0.0;
};

double phr(double g, double lambda, double mu) {
    const double t = std::max(0.0, lambda + mu * g);
    return (t * t - lambda * lambda) / (2.0 * mu);
}

struct AlState {
    VectorXd lambda;
    double mu = 1e3;
};

struct AlOutcome {
    VectorXd x;
    SlotEval::Result res;
    double viol = 0.0;
    double stat = 0.0;
    bool converged = false;
    int outers = 0;
};

double max_violation(const VectorXd& g) {
    return g.size() == 0 ? 0.0 : std::max(0.0, g.maxCoeff());
}

/// Least-squares multiplier estimate: nonnegative weights on the near-active
/// inequalities that best cancel the objective gradient over the coordinates
/// that sit strictly between their bounds. Penalty weights drift with the
/// penalty parameter, so first-order optimality is judged (and the
/// multipliers refreshed) against this estimate instead.
VectorXd nnls_weights(const VectorXd& fgrad, const MatrixXd& J, const VectorXd& g,
                      const VectorXd& x, const VectorXd& lower, const VectorXd& upper) {
    const int m = static_cast<int>(g.size());
    const int n = static_cast<int>(x.size());
    VectorXd w = VectorXd::Zero(m);
    std::vector<int> act, free_c;
    for (int k = 0; k < m; ++k)
        if (g[k] >= -1e-4) act.push_back(k);
    for (int j = 0; j < n; ++j)
        if (x[j] > lower[j] + 1e-12 && x[j] < upper[j] - 1e-12) free_c.push_back(j);
    if (act.empty() || free_c.empty()) return w;
    const int p = static_cast<int>(act.size());
    const int q = static_cast<int>(free_c.size());
    MatrixXd A(q, p);
    VectorXd b(q);
    for (int i = 0; i < q; ++i) {
        b[i] = -fgrad[free_c[i]];
        for (int k = 0; k < p; ++k) A(i, k) = J(act[k], free_c[i]);
    }
    MatrixXd H = A.transpose() * A;
    H.diagonal().array() += 1e-10 * (1.0 + H.diagonal().maxCoeff());
    const VectorXd c = A.transpose() * b;
    VectorXd wa = VectorXd::Zero(p);
    auto qval = [&](const VectorXd& v) { return 0.5 * v.dot(H * v) - c.dot(v); };
    for (int it = 0; it < 80; ++it) {
        const VectorXd grad = H * wa - c;
        std::vector<int> fs;
        double res = 0.0;
        for (int k = 0; k < p; ++k) {
            if (wa[k] > 0.0 || grad[k] < 0.0) fs.push_back(k);
            res = std::max(res, std::abs(wa[k] > 0.0 ? grad[k] : std::min(0.0, grad[k])));
        }
        if (res <= 1e-10 * (1.0 + c.lpNorm<Eigen::Infinity>()) || fs.empty()) break;
        MatrixXd Hf(fs.size(), fs.size());
        VectorXd gf(fs.size());
        for (size_t a2 = 0; a2 < fs.size(); ++a2) {
            gf[a2] = grad[fs[a2]];
            for (size_t b2 = 0; b2 < fs.size(); ++b2) Hf(a2, b2) = H(fs[a2], fs[b2]);
        }
        const VectorXd df = Hf.llt().solve(-gf);
        const double f0 = qval(wa);
        double step = 1.0;
        bool moved = false;
        for (int bt = 0; bt < 30; ++bt) {
            VectorXd cand = wa;
            for (size_t a2 = 0; a2 < fs.size(); ++a2)
                cand[fs[a2]] = std::max(0.0, wa[fs[a2]] + step * df[a2]);
            if (qval(cand) < f0 - 1e-16) {
                wa = cand;
                moved = true;
                break;
            }
            step *= 0.5;
        }
        if (!moved) break;
    }
    for (int k = 0; k < p; ++k) w[act[k]] = wa[k];
    return w;
}

/// Reduced first-order residual: gradient magnitude on interior coordinates,
/// one-sided at the bounds.
double reduced_kkt(const VectorXd& grad, const VectorXd& x, const VectorXd& lower,
                   const VectorXd& upper) {
    double kkt = 0.0;
    for (int j = 0; j < grad.size(); ++j) {
        double red = std::abs(grad[j]);
        if (x[j] <= lower[j] + 1e-12) red = std::max(0.0, -grad[j]);
        if (x[j] >= upper[j] - 1e-12) red = std::max(0.0, grad[j]);
        kkt = std::max(kkt, red);
    }
    return kkt;
}

/// First-order model of one evaluation point: objective gradient, operating
/// cost gradient and the full inequality Jacobian, from central differences
/// of the smooth maps (one PF / window solve per probe).
struct FdModel {
    VectorXd fgrad;  // d(obj)/dx
    VectorXd opgrad; // d(f_op + comp)/dx
    MatrixXd J;      // m x n, d(g)/dx
};

FdModel fd_model(SlotEval& ev, const VectorXd& x, const QueueState& queue, bool with_path,
                 const VectorXd& lower, const VectorXd& upper,
                 const SlotEval::Result& center) {
    const int n = static_cast<int>(x.size());
    const int m = static_cast<int>(center.g.size());
    FdModel md;
    md.fgrad = VectorXd::Zero(n);
    md.opgrad = VectorXd::Zero(n);
    md.J = MatrixXd::Zero(m, n);
    const std::vector<VectorXd>* hint = with_path ? &center.xs : nullptr;
    VectorXd pp = x;
    for (int j = 0; j < n; ++j) {
        const double step = 1e-6 * std::max(1.0, std::abs(x[j]));
        const double hi = std::min(upper[j], x[j] + step);
        const double lo = std::max(lower[j], x[j] - step);
        if (hi <= lo) continue;
        pp[j] = hi;
        SlotEval::Result rh = ev.eval(pp, queue, with_path, hint);
        pp[j] = lo;
        SlotEval::Result rl = ev.eval(pp, queue, with_path, hint);
        pp[j] = x[j];
        const SlotEval::Result* a = rh.ok ? &rh : &center;
        const SlotEval::Result* b = rl.ok ? &rl : &center;
        const double da = rh.ok ? hi : x[j];
        const double db = rl.ok ? lo : x[j];
        if (da <= db) continue; // both probes failed; leave the column zero
        md.fgrad[j] = (a->obj - b->obj) / (da - db);
        md.opgrad[j] = ((a->f_op + a->comp) - (b->f_op + b->comp)) / (da - db);
        md.J.col(j) = (a->g - b->g) / (da - db);
    }
    return md;
}

/// Minimizes the local augmented model
///   fg.d + sigma/2 |d|^2 + sum_k phr(g0_k + J_k.d)
/// over the step box [dlo, dhi] by projected Newton on the active set. The
/// model is piecewise quadratic, so the penalty cliffs that defeat a plain
/// line search are handled exactly here.
VectorXd model_step(const VectorXd& fg, const MatrixXd& J, const VectorXd& g0,
                    const VectorXd& lambda, double mu, double sigma, const VectorXd& dlo,
                    const VectorXd& dhi) {
    const int n = static_cast<int>(fg.size());
    const int m = static_cast<int>(g0.size());
    VectorXd d = VectorXd::Zero(n);
    auto qval = [&](const VectorXd& dd) {
        double v = fg.dot(dd) + 0.5 * sigma * dd.squaredNorm();
        VectorXd r = g0 + J * dd;
        for (int k = 0; k < m; ++k)
            v += phr(r[k], lambda[k], mu);
        return v;
    };
    double q = qval(d);
    const double scale = 1.0 + std::abs(q);
    for (int it = 0; it < 50; ++it) {
        VectorXd r = g0 + J * d;
        VectorXd w(m);
        for (int k = 0; k < m; ++k)
            w[k] = std::max(0.0, lambda[k] + mu * r[k]);
        VectorXd grad = fg + sigma * d + J.transpose() * w;

        std::vector<int> free;
        double kkt = 0.0;
        for (int j = 0; j < n; ++j) {
            const bool at_lo = d[j] <= dlo[j] + 1e-14;
            const bool at_hi = d[j] >= dhi[j] - 1e-14;
            double red = std::abs(grad[j]);
            if (at_lo) red = std::max(0.0, -grad[j]);
            if (at_hi) red = std::max(0.0, grad[j]);
            kkt = std::max(kkt, red);
            if (!(at_lo && grad[j] >= 0.0) && !(at_hi && grad[j] <= 0.0)) free.push_back(j);
        }
        if (kkt <= 1e-9 * scale || free.empty()) break;

        const int nf = static_cast<int>(free.size());
        MatrixXd H = MatrixXd::Identity(nf, nf) * sigma;
        for (int k = 0; k < m; ++k) {
            if (w[k] <= 0.0) continue;
            VectorXd jf(nf);
            for (int a = 0; a < nf; ++a)
                jf[a] = J(k, free[a]);
            H.selfadjointView<Eigen::Lower>().rankUpdate(jf, mu);
        }
        VectorXd gf(nf);
        for (int a = 0; a < nf; ++a)
            gf[a] = grad[free[a]];
        H.diagonal().array() += 1e-12 * (1.0 + H.diagonal().maxCoeff());
        VectorXd df = H.selfadjointView<Eigen::Lower>().llt().solve(-gf);

        VectorXd dir = VectorXd::Zero(n);
        for (int a = 0; a < nf; ++a)
            dir[free[a]] = df[a];
        double alpha = 1.0;
        bool moved = false;
        for (int ls = 0; ls < 40; ++ls) {
            VectorXd dd = d + alpha * dir;
            for (int j = 0; j < n; ++j)
                dd[j] = std::min(dhi[j], std::max(dlo[j], dd[j]));
            const double qn = qval(dd);
            if (qn < q - 1e-14 * scale) {
                d = dd;
                q = qn;
                moved = true;
                break;
            }
            alpha *= 0.5;
        }
        if (!moved) break;
    }
    return d;
}

/// Augmented-Lagrangian loop over the reduced (static) variables. The
/// equality blocks never appear explicitly: each evaluation solves the
/// power-flow and implicit-step residuals exactly, so only the inequality
/// multipliers iterate here. Steps come from a trust-region model built on
/// finite-difference sensitivities of the smooth maps.
AlOutcome al_solve(SlotEval& ev, const QueueState& queue, VectorXd x, bool with_path,
                   const VectorXd& lower, const VectorXd& upper, AlState& al, int max_outer,
                   int tr_steps, std::vector<std::string>& log, const char* phase) {
    const int n = static_cast<int>(x.size());
    const int m = ev.n_ineq(with_path);
    if (al.lambda.size() != m) {
        VectorXd fresh = VectorXd::Zero(m);
        const int keep = std::min<int>(m, static_cast<int>(al.lambda.size()));
        fresh.head(keep) = al.lambda.head(keep);
        al.lambda = fresh;
    }
    for (int j = 0; j < n; ++j)
        x[j] = std::min(upper[j], std::max(lower[j], x[j]));

    auto al_value = [&](const SlotEval::Result& r) {
        if (!r.ok) return kInf;
        double v = r.obj;
        for (int j = 0; j < m; ++j)
            v += phr(r.g[j], al.lambda[j], al.mu);
        return v;
    };

    AlOutcome out;
    out.x = x;
    SlotEval::Result center = ev.eval(x, queue, with_path, nullptr);
    if (!center.ok) {
        out.res = center;
        out.viol = kInf;
        log.push_back(std::string(phase) + ": start evaluation failed (" + center.fail + ")");
        return out;
    }

    double delta = 0.25;
    double sigma_scale = 1e-3;
    double prev_viol = kInf;
    double prev_obj = kInf;
    int stalled = 0;
    for (int outer = 0; outer < max_outer; ++outer) {
        delta = std::max(delta, 0.01); // a fresh model deserves a fresh radius
        FdModel md = fd_model(ev, x, queue, with_path, lower, upper, center);

        const VectorXd w = nnls_weights(md.fgrad, md.J, center.g, x, lower, upper);
        const double kkt = reduced_kkt(md.fgrad + md.J.transpose() * w, x, lower, upper);

        out.x = x;
        out.res = center;
        out.outers = outer + 1;
        out.viol = max_violation(center.g);
        out.stat = kkt / (1.0 + std::abs(al_value(center)));
        if (out.viol <= 4.0 * kIneqTol) {
            // Near feasibility the least-squares estimate is far more accurate
            // than the running penalty weights; adopt it for the active rows.
            for (int k = 0; k < m; ++k)
                if (center.g[k] >= -1e-4) al.lambda[k] = std::min(1e9, w[k]);
        }
        std::ostringstream line;
        line << phase << " outer " << outer << ": obj=" << center.obj << " viol=" << out.viol
             << " kkt=" << kkt << " mu=" << al.mu << " tr=" << delta;
        log.push_back(line.str());
        if (out.viol <= kIneqTol && out.stat <= kStatTol) {
            out.converged = true;
            break;
        }
        const bool no_progress = out.viol > 0.9 * prev_viol &&
                                 std::abs(center.obj - prev_obj) <=
                                     1e-9 * (1.0 + std::abs(center.obj));
        stalled = no_progress ? stalled + 1 : 0;
        if (stalled >= 3) break;
        prev_viol = out.viol;
        prev_obj = center.obj;

        for (int it = 0; it < tr_steps; ++it) {
            const double sigma = sigma_scale * (1.0 + std::abs(center.obj));
            VectorXd dlo(n), dhi(n);
            for (int j = 0; j < n; ++j) {
                dlo[j] = std::max(lower[j] - x[j], -delta);
                dhi[j] = std::min(upper[j] - x[j], delta);
            }
            VectorXd d = model_step(md.fgrad, md.J, center.g, al.lambda, al.mu, sigma, dlo, dhi);
            if (d.lpNorm<Eigen::Infinity>() < 1e-12) break;
            auto mval = [&](const VectorXd& dd) {
                double v = md.fgrad.dot(dd) + 0.5 * sigma * dd.squaredNorm();
                VectorXd rr = center.g + md.J * dd;
                for (int k = 0; k < m; ++k)
                    v += phr(rr[k], al.lambda[k], al.mu);
                return v;
            };
            const double pred = mval(VectorXd::Zero(n)) - mval(d);
            if (pred <= 1e-12 * (1.0 + std::abs(center.obj))) break;
            SlotEval::Result cand =
                ev.eval(x + d, queue, with_path, with_path ? &center.xs : nullptr);
            const double act = al_value(center) - al_value(cand);
            if (cand.ok && act >= 0.1 * pred) {
                x += d;
                center = cand;
                if (act >= 0.7 * pred) {
                    delta = std::min(2.0, delta * 1.8);
                    sigma_scale = std::max(1e-6, sigma_scale * 0.5);
                }
            } else {
                // The quadratic term understated the true curvature along this
                // step; damp harder as well as shrinking the radius.
                delta = std::max(1e-7, delta * 0.3);
                sigma_scale = std::min(1e3, sigma_scale * 4.0);
            }
        }

        for (int j = 0; j < m; ++j)
            al.lambda[j] = std::min(1e9, std::max(0.0, al.lambda[j] + al.mu * center.g[j]));
        // Growing the penalty only helps while the violation is well above
        // tolerance; past that the multiplier updates finish the job and a
        // huge penalty just wrecks the model conditioning, so back it off
        // again once the iterate is safely feasible.
        const double v_now = max_violation(center.g);
        if (v_now > std::max(4.0 * kIneqTol, 0.25 * prev_viol))
            al.mu = std::min(3e6, al.mu * (v_now > 1e-3 ? 36.0 : 6.0));
        else if (v_now <= kIneqTol)
            al.mu = std::max(1e3, al.mu / 3.0);
    }
    if (out.x.size() == static_cast<Eigen::Index>(x.size()) &&
        (x - out.x).lpNorm<Eigen::Infinity>() > 0.0) {
        // Ran out of outer iterations after the last check moved x; measure
        // the final point honestly and keep whichever iterate scores better.
        FdModel md = fd_model(ev, x, queue, with_path, lower, upper, center);
        const VectorXd w = nnls_weights(md.fgrad, md.J, center.g, x, lower, upper);
        const double kkt = reduced_kkt(md.fgrad + md.J.transpose() * w, x, lower, upper);
        const double viol = max_violation(center.g);
        const double stat = kkt / (1.0 + std::abs(al_value(center)));
        auto badness = [](double v, double s) {
            return std::max(v / kIneqTol, s / kStatTol);
        };
        if (badness(viol, stat) <= badness(out.viol, out.stat)) {
            out.x = x;
            out.res = center;
            out.viol = viol;
            out.stat = stat;
        }
        out.converged = out.viol <= kIneqTol && out.stat <= kStatTol;
    }
    return out;
}

/// Cheapest-first starting point: renewables at their availability cap,
/// machines filled in fuel-cost order against the slot's load, storages idle.
VectorXd merit_start(const HmgSystem& sys, const Layout& lay, int day, int slot) {
    VectorXd x(lay.n_vars());
    for (int j = 0; j < lay.n_vars(); ++j) {
        const VarRef& r = lay.refs[j];
        switch (r.field) {
        case Field::ibr_p: x[j] = lay.vars[j].hi; break;
        case Field::es_u: x[j] = 0.5; break;
        default: x[j] = 0.0; break;
        }
    }
    double residual = 0.0;
    for (const auto& b : sys.buses) {
        auto [p, q] = sys.load_pu(day, slot, b);
        (void)q;
        residual += p;
    }
    residual -= sys.tie_pu(day, slot).first;
    for (const auto& r : sys.ibrs)
        residual -= sys.availability(day, slot, r) * r.p_max_pu(sys.base_kva);

    std::vector<const MachineParams*> order;
    for (const auto& m : sys.machines)
        order.push_back(&m);
    std::sort(order.begin(), order.end(), [](const MachineParams* a, const MachineParams* b) {
        return a->c_gen < b->c_gen || (a->c_gen == b->c_gen && a->id < b->id);
    });
    for (const MachineParams* m : order) {
        const double lo = m->p_min_pu(sys.base_kva);
        const double hi = m->p_max_pu(sys.base_kva);
        const double take = std::min(hi, std::max(lo, residual));
        residual -= take;
        const int j = lay.find(Field::mach_p, m->id);
        if (j >= 0) x[j] = take; // slack machines have no entry and absorb the rest
    }
    for (int j = 0; j < lay.n_vars(); ++j)
        x[j] = std::min(lay.vars[j].hi, std::max(lay.vars[j].lo, x[j]));
    return x;
}

/// Rounds each storage's mode flag, zeroes the losing leg and pins both so a
/// short polish pass can restore feasibility around the now-exact modes.
void round_storage_modes(const Layout& lay, VectorXd& x, VectorXd& lower, VectorXd& upper) {
    for (const auto& e : lay.storages) {
        const bool charging = x[e.i_c] > x[e.i_d] + 1e-12;
        const double u = charging ? 1.0 : 0.0;
        x[e.i_u] = u;
        lower[e.i_u] = upper[e.i_u] = u;
        const int loser = charging ? e.i_d : e.i_c;
        x[loser] = 0.0;
        lower[loser] = upper[loser] = 0.0;
    }
}

NlpSolution finalize_static(SlotEval& ev, const NlpInstance& nlp, AlOutcome& out,
                            std::vector<std::string>& log, int evals) {
    NlpSolution sol;
    sol.setpoints = ev.dispatch_of(out.x);
    sol.setpoints.cost = out.res.f_op;
    sol.trajectory.dispatch = sol.setpoints;
    sol.trajectory.h = nlp.h_s;
    sol.report.converged = out.converged;
    sol.report.objective = out.res.queue_term + nlp.v_weight * out.res.f_op;
    sol.report.queue_term = out.res.queue_term;
    sol.report.f_op = out.res.f_op;
    sol.report.eq_residual = out.res.eq_res;
    sol.report.ineq_violation = out.viol;
    sol.report.stationarity = out.stat;
    sol.report.evaluations = evals;
    sol.report.log = log;
    return sol;
}

} // namespace

NlpInstance build_nlp(const HmgSystem& sys, int day, int slot, const QueueState& queue,
                      double v_weight, const EventSet& events, double window_s, double h_s) {
    if (h_s <= 0.0 || window_s < h_s)
        throw ValidationError("transient window must cover at least one step");
    const double steps = window_s / h_s;
    if (std::abs(steps - std::llround(steps)) > 1e-9)
        throw ValidationError("window length must be an integer number of steps");
    if (v_weight < 0.0) throw ValidationError("cost weight must be non-negative");
    if (sys.machines.empty())
        throw InfeasibleError("cannot dispatch a system without machines");

    NlpInstance nlp;
    nlp.sys = &sys;
    nlp.day = day;
    nlp.slot = slot;
    nlp.queue = queue;
    nlp.v_weight = v_weight;
    nlp.events = events;
    nlp.window_s = window_s;
    nlp.h_s = h_s;
    if (!events.empty()) {
        double first = kInf;
        for (const auto& e : events)
            first = std::min(first, e.start_s);
        nlp.t0_s = std::max(0.0, first - 5.0);
        for (const auto& e : events) {
            if (e.start_s < nlp.t0_s - 1e-9 || e.start_s > nlp.t0_s + window_s + 1e-9)
                throw ValidationError("event must start inside the transient window");
        }
    }

    DynModel model(sys, slot_tag(day, slot));
    Layout lay = make_layout(sys, model, day, slot);
    nlp.statics = lay.vars;
    nlp.n_state = model.state_size();
    nlp.inequalities = lay.ineq_names;
    if (!events.empty()) {
        std::vector<std::string> sub;
        for (int s = 0; s < model.n_ac_subgrids(); ++s)
            sub.push_back("sg" + std::to_string(s));
        for (int k = 0; k <= nlp.n_steps(); ++k) {
            const std::string tag = ".k" + std::to_string(k);
            for (const auto& s : sub) {
                nlp.inequalities.push_back(s + ".f_hi" + tag);
                nlp.inequalities.push_back(s + ".f_lo" + tag);
            }
            for (const auto& b : sys.buses) {
                nlp.inequalities.push_back(b.id + ".v_hi" + tag);
                nlp.inequalities.push_back(b.id + ".v_lo" + tag);
            }
        }
    }
    {
        std::ostringstream o;
        o << "sum_k q_k*u_k + " << v_weight << " * fuel cost of the slot";
        nlp.objective = o.str();
        std::ostringstream e;
        e << "power flow at the window start plus " << (events.empty() ? 0 : nlp.n_steps())
          << " implicit-step residual blocks of dimension " << nlp.n_state;
        nlp.equalities = e.str();
    }
    return nlp;
}

NlpSolution solve_nlp(const NlpInstance& nlp) {
    return solve_nlp(nlp, slot_tag(-1, -1));
}

NlpSolution solve_nlp(const NlpInstance& nlp, const DispatchSetpoints& warm_start) {
    if (!nlp.sys) throw ValidationError("instance has no system attached");
    const bool have_warm = warm_start.day >= 0;
    SlotEval ev(nlp, have_warm ? warm_start.v_slack : 1.0);
    const Layout& lay = ev.layout();
    if (!nlp.statics.empty() && static_cast<int>(nlp.statics.size()) != lay.n_vars())
        throw ValidationError("instance static layout does not match its system");

    std::vector<std::string> log;
    VectorXd x = have_warm ? pack(lay, warm_start)
                           : merit_start(*nlp.sys, lay, nlp.day, nlp.slot);

    // Phase 1: the static problem. For instances without events this is the
    // whole solve; otherwise it produces the stacked warm start.
    AlState al;
    AlOutcome st = al_solve(ev, nlp.queue, x, false, lay.lower, lay.upper, al, 18, 60, log,
                            "static");
    if (!st.res.ok) {
        // The start itself failed to evaluate; retry once from merit order.
        x = merit_start(*nlp.sys, lay, nlp.day, nlp.slot);
        al = AlState{};
        st = al_solve(ev, nlp.queue, x, false, lay.lower, lay.upper, al, 18, 60, log, "static");
    }

    if (nlp.events.empty()) {
        VectorXd lo = lay.lower, hi = lay.upper;
        if (st.res.ok) {
            VectorXd xr = st.x;
            round_storage_modes(lay, xr, lo, hi);
            AlOutcome pol = al_solve(ev, nlp.queue, xr, false, lo, hi, al, 6, 30, log, "polish");
            if (pol.res.ok) st = pol;
        }
        NlpSolution sol = finalize_static(ev, nlp, st, log, ev.evaluations());
        sol.report.infeasible = !st.res.ok;
        if (!st.res.ok && !st.res.fail.empty()) sol.report.log.push_back(st.res.fail);
        return sol;
    }

    // Phase 2: find a start whose transient window is stable, curtailing
    // renewables progressively if necessary.
    VectorXd x_start = st.res.ok ? st.x : x;
    SlotEval::Result probe = ev.eval(x_start, nlp.queue, true, nullptr);
    if (!probe.ok) {
        log.push_back("window unstable at the static optimum: " + probe.fail);
        for (double factor : {0.75, 0.5, 0.25, 0.0}) {
            VectorXd lo = lay.lower, hi = lay.upper;
            VectorXd xc = x_start;
            for (int j = 0; j < lay.n_vars(); ++j) {
                if (lay.refs[j].field == Field::ibr_p) {
                    hi[j] = lay.upper[j] * factor;
                    xc[j] = std::min(xc[j], hi[j]);
                }
            }
            AlState al_c;
            AlOutcome cs = al_solve(ev, nlp.queue, xc, false, lo, hi, al_c, 10, 40, log,
                                    "restoration");
            if (!cs.res.ok) continue;
            probe = ev.eval(cs.x, nlp.queue, true, nullptr);
            std::ostringstream line;
            line << "restoration: renewable cap factor " << factor << " -> "
                 << (probe.ok ? "stable window" : probe.fail);
            log.push_back(line.str());
            if (probe.ok) {
                x_start = cs.x;
                break;
            }
        }
    }
    if (!probe.ok) {
        AlOutcome dead;
        dead.x = x_start;
        dead.res = probe;
        NlpSolution sol = finalize_static(ev, nlp, dead, log, ev.evaluations());
        sol.report.infeasible = true;
        sol.report.log.push_back("no stable operating point found: " + probe.fail);
        return sol;
    }

    // Phase 3: the full problem with frequency/voltage path limits. The path
    // rows arrive with zero multipliers, so start the penalty high enough to
    // make the first corrections count.
    al.mu = std::max(al.mu, 1e5);
    AlOutcome full = al_solve(ev, nlp.queue, x_start, true, lay.lower, lay.upper, al, 10, 28,
                              log, "window");
    if (!full.res.ok) {
        full.x = x_start;
        full.res = probe;
        full.viol = max_violation(probe.g);
    }

    // The coarse trajectory understates fast excursions. Re-check each
    // candidate on the fine grid and pull the offending path bound inward by
    // the observed shortfall until the fine-step run clears the limits too.
    for (int round = 0; round < 3 && full.res.ok; ++round) {
        const TrajectoryMetrics fine =
            verify_dispatch(*nlp.sys, ev.dispatch_of(full.x), nlp.events, nlp.h_s / 4.0);
        double df = 0.0, dv = 0.0;
        for (const auto& v : fine.violations) {
            if (v.limit == "f_min") df = std::max(df, nlp.sys->limits.f_min_hz - v.value);
            if (v.limit == "f_max") df = std::max(df, v.value - nlp.sys->limits.f_max_hz);
            if (v.limit == "v_min") dv = std::max(dv, nlp.sys->limits.v_min - v.value);
            if (v.limit == "v_max") dv = std::max(dv, v.value - nlp.sys->limits.v_max);
        }
        if (df <= 0.0 && dv <= 0.0) break;
        ev.widen_path_margins(df > 0.0 ? 1.25 * df + 1e-4 : 0.0,
                              dv > 0.0 ? 1.25 * dv + 1e-4 : 0.0);
        std::ostringstream line;
        line << "fine-step shortfall: df=" << df << " dv=" << dv << ", widening path margins";
        log.push_back(line.str());
        AlOutcome re = al_solve(ev, nlp.queue, full.x, true, lay.lower, lay.upper, al, 6, 24,
                                log, "tighten");
        if (!re.res.ok) break;
        full = re;
    }

    // Phase 4: exact storage modes, short feasibility polish.
    VectorXd lo = lay.lower, hi = lay.upper;
    VectorXd xr = full.x;
    round_storage_modes(lay, xr, lo, hi);
    AlOutcome pol = al_solve(ev, nlp.queue, xr, true, lo, hi, al, 4, 20, log, "polish");
    if (pol.res.ok) full = pol;

    NlpSolution sol = finalize_static(ev, nlp, full, log, ev.evaluations());
    // The reported trajectory re-runs the production integrator (literal
    // converter rules) on the final setpoints over the same grid.
    sol.trajectory = run(*nlp.sys, sol.setpoints, nlp.events, nlp.t0_s + nlp.window_s, nlp.h_s,
                         nlp.t0_s);
    sol.report.eq_residual =
        std::max(sol.report.eq_residual, ev.trajectory_residual(sol.trajectory));
    if (!sol.trajectory.stable) {
        sol.report.converged = false;
        sol.report.log.push_back("final non-smoothed re-run diverged");
    }
    sol.report.outer_iters = 0;
    for (const auto& line : sol.report.log)
        if (line.find("outer") != std::string::npos) ++sol.report.outer_iters;
    return sol;
}

TrajectoryMetrics verify_dispatch(const HmgSystem& sys, const DispatchSetpoints& setpoints,
                                  const EventSet& events, double h_s) {
    Trajectory traj = run_windowed(sys, setpoints, events, h_s);
    return metrics(traj, sys);
}

double operating_cost(const HmgSystem& sys, const DispatchSetpoints& setpoints,
                      const SteadyState& ss) {
    double kw = 0.0;
    int mi = 0;
    for (const auto& m : sys.machines) {
        double p_pu;
        if (sys.bus(m.bus).kind == BusKind::ac) {
            if (mi >= static_cast<int>(ss.p_mach.size()))
                throw ValidationError("steady state does not match the system's machine list");
            p_pu = ss.p_mach[mi++];
        } else {
            p_pu = setpoints.get(setpoints.p_dg, m.id);
        }
        kw += m.c_gen * std::max(0.0, p_pu) * sys.base_kva;
    }
    return kw * sys.slot_hours;
}

double daily_oracle(const HmgSystem& sys, int day, std::vector<DispatchSetpoints>* schedule) {
    const int T = sys.slots_per_day;
    if (T <= 0) throw ValidationError("system declares no slots");

    // Warm start from the decoupled schedule; the joint problem can only
    // improve on it.
    DaySchedule warm = schedule_day(sys, day, VSchedule::constant(100.0));

    std::vector<std::unique_ptr<SlotEval>> evs;
    std::vector<NlpInstance> insts;
    std::vector<int> offset(T + 1, 0);
    for (int t = 0; t < T; ++t) {
        insts.push_back(build_nlp(sys, day, t, QueueState{}, 0.0, {}));
        evs.emplace_back(new SlotEval(insts[t], 1.0));
        offset[t + 1] = offset[t] + evs[t]->layout().n_vars();
    }
    const int n = offset[T];
    VectorXd lower(n), upper(n), x(n);
    for (int t = 0; t < T; ++t) {
        const Layout& lay = evs[t]->layout();
        lower.segment(offset[t], lay.n_vars()) = lay.lower;
        upper.segment(offset[t], lay.n_vars()) = lay.upper;
        x.segment(offset[t], lay.n_vars()) = pack(lay, warm.slots[t]);
    }

    const int m_per = evs[0]->n_ineq(false);
    const int m = m_per * T;
    VectorXd lambda = VectorXd::Zero(m);
    double mu = 1e3;

    struct SlotCache {
        SlotEval::Result res;
        DispatchSetpoints sp;
        QueueState queue; // queue entering the slot
    };
    auto chain = [&](const VectorXd& p, std::vector<SlotCache>& out) -> bool {
        out.assign(T, {});
        QueueState q = initial_queue(sys);
        for (int t = 0; t < T; ++t) {
            out[t].queue = q;
            out[t].sp = evs[t]->dispatch_of(p.segment(offset[t], evs[t]->layout().n_vars()));
            out[t].res = evs[t]->eval(p.segment(offset[t], evs[t]->layout().n_vars()), q,
                                      false, nullptr);
            if (!out[t].res.ok) return false;
            QueueState next;
            next.slot = q.slot + 1;
            for (const auto& e : sys.storages) {
                const double pc = out[t].sp.get(out[t].sp.es_charge, e.id) * sys.base_kva;
                const double pd = out[t].sp.get(out[t].sp.es_discharge, e.id) * sys.base_kva;
                next.q_kwh[e.id] = q.get(e.id) + queue_input_kw(e, pc, pd) * sys.slot_hours;
            }
            q = next;
        }
        return true;
    };
    auto stack_g = [&](const std::vector<SlotCache>& c) {
        VectorXd gs(m);
        for (int t = 0; t < T; ++t)
            gs.segment(m_per * t, m_per) = c[t].res.g;
        return gs;
    };
    auto op_cost = [&](const std::vector<SlotCache>& c) {
        double v = 0.0;
        for (int t = 0; t < T; ++t)
            v += c[t].res.f_op + c[t].res.comp;
        return v;
    };
    auto total = [&](const std::vector<SlotCache>& c) {
        double v = op_cost(c);
        const VectorXd gs = stack_g(c);
        for (int j = 0; j < m; ++j)
            v += phr(gs[j], lambda[j], mu);
        return v;
    };

    // Joint first-order model: per-slot sensitivities from finite
    // differences, plus the exact linear coupling of later queue rows to
    // earlier storage legs.
    auto joint_model = [&](const VectorXd& p, const std::vector<SlotCache>& c,
                           const VectorXd& lo, const VectorXd& hi) {
        FdModel md;
        md.fgrad = VectorXd::Zero(n);
        md.J = MatrixXd::Zero(m, n);
        for (int t = 0; t < T; ++t) {
            const int nt = evs[t]->layout().n_vars();
            FdModel mt = fd_model(*evs[t], p.segment(offset[t], nt), c[t].queue, false,
                                  lo.segment(offset[t], nt), hi.segment(offset[t], nt),
                                  c[t].res);
            md.J.block(m_per * t, offset[t], m_per, nt) = mt.J;
            md.fgrad.segment(offset[t], nt) = mt.opgrad;
        }
        const Layout& lay0 = evs[0]->layout();
        for (size_t i = 0; i < lay0.storages.size(); ++i) {
            const EsRef& e = lay0.storages[i];
            const double scale = std::max(1.0, e.range_kwh);
            const double dq_dc = -e.es->eta * sys.base_kva * sys.slot_hours / scale;
            const double dq_dd = sys.base_kva * sys.slot_hours / (e.es->eta * scale);
            for (int s = 1; s < T; ++s) {
                const int row_hi = m_per * s + lay0.es_queue_row[i];
                for (int tau = 0; tau < s; ++tau) {
                    const int col_c = offset[tau] + e.i_c;
                    const int col_d = offset[tau] + e.i_d;
                    md.J(row_hi, col_c) += dq_dc;
                    md.J(row_hi, col_d) += dq_dd;
                    md.J(row_hi + 1, col_c) -= dq_dc;
                    md.J(row_hi + 1, col_d) -= dq_dd;
                }
            }
        }
        return md;
    };

    std::vector<SlotCache> cache;
    if (!chain(x, cache)) throw InfeasibleError("daily optimum evaluation failed");
    double delta = 0.25;
    double sigma_scale = 1e-3;
    auto tr_phase = [&](const VectorXd& lo, const VectorXd& hi, int max_outer, int tr_steps) {
        double prev_viol = kInf;
        for (int outer = 0; outer < max_outer; ++outer) {
            delta = std::max(delta, 0.01);
            FdModel md = joint_model(x, cache, lo, hi);
            VectorXd gs = stack_g(cache);
            const VectorXd w = nnls_weights(md.fgrad, md.J, gs, x, lo, hi);
            const double kkt = reduced_kkt(md.fgrad + md.J.transpose() * w, x, lo, hi);
            const double viol = max_violation(gs);
            if (viol <= kIneqTol && kkt / (1.0 + std::abs(total(cache))) <= kStatTol) break;
            if (viol <= 4.0 * kIneqTol)
                for (int k = 0; k < m; ++k)
                    if (gs[k] >= -1e-4) lambda[k] = std::min(1e9, w[k]);

            for (int it = 0; it < tr_steps; ++it) {
                const double sigma = sigma_scale * (1.0 + std::abs(op_cost(cache)));
                VectorXd dlo(n), dhi(n);
                for (int j = 0; j < n; ++j) {
                    dlo[j] = std::max(lo[j] - x[j], -delta);
                    dhi[j] = std::min(hi[j] - x[j], delta);
                }
                VectorXd d = model_step(md.fgrad, md.J, gs, lambda, mu, sigma, dlo, dhi);
                if (d.lpNorm<Eigen::Infinity>() < 1e-12) break;
                auto mval = [&](const VectorXd& dd) {
                    double v = md.fgrad.dot(dd) + 0.5 * sigma * dd.squaredNorm();
                    VectorXd rr = gs + md.J * dd;
                    for (int k = 0; k < m; ++k)
                        v += phr(rr[k], lambda[k], mu);
                    return v;
                };
                const double pred = mval(VectorXd::Zero(n)) - mval(d);
                if (pred <= 1e-12 * (1.0 + std::abs(op_cost(cache)))) break;
                std::vector<SlotCache> cand;
                const bool ok = chain(x + d, cand);
                const double act = ok ? total(cache) - total(cand) : -kInf;
                if (ok && act >= 0.1 * pred) {
                    x += d;
                    cache = cand;
                    gs = stack_g(cache);
                    if (act >= 0.7 * pred) {
                        delta = std::min(2.0, delta * 1.8);
                        sigma_scale = std::max(1e-6, sigma_scale * 0.5);
                    }
                } else {
                    delta = std::max(1e-7, delta * 0.3);
                    sigma_scale = std::min(1e3, sigma_scale * 4.0);
                }
            }

            gs = stack_g(cache);
            for (int j = 0; j < m; ++j)
                lambda[j] = std::min(1e9, std::max(0.0, lambda[j] + mu * gs[j]));
            const double v_now = max_violation(gs);
            if (v_now > std::max(4.0 * kIneqTol, 0.25 * prev_viol))
                mu = std::min(3e6, mu * (v_now > 1e-3 ? 36.0 : 6.0));
            else if (v_now <= kIneqTol)
                mu = std::max(1e3, mu / 3.0);
            prev_viol = v_now;
        }
    };

    VectorXd lo = lower, hi = upper;
    tr_phase(lo, hi, 14, 8);

    // Exact storage modes everywhere, then one short polish.
    for (int t = 0; t < T; ++t) {
        const Layout& lay = evs[t]->layout();
        VectorXd xt = x.segment(offset[t], lay.n_vars());
        VectorXd lot = lo.segment(offset[t], lay.n_vars());
        VectorXd hit = hi.segment(offset[t], lay.n_vars());
        round_storage_modes(lay, xt, lot, hit);
        x.segment(offset[t], lay.n_vars()) = xt;
        lo.segment(offset[t], lay.n_vars()) = lot;
        hi.segment(offset[t], lay.n_vars()) = hit;
    }
    if (!chain(x, cache)) throw InfeasibleError("daily optimum evaluation failed");
    tr_phase(lo, hi, 6, 6);
    if (!chain(x, cache)) throw InfeasibleError("daily optimum evaluation failed");

    double cost = 0.0;
    for (int t = 0; t < T; ++t)
        cost += cache[t].res.f_op;
    if (schedule) {
        schedule->clear();
        for (int t = 0; t < T; ++t) {
            DispatchSetpoints sp = cache[t].sp;
            sp.cost = cache[t].res.f_op;
            schedule->push_back(sp);
        }
    }
    // Never report a joint optimum above the decoupled schedule it started
    // from; if polishing pushed it up, fall back to the starting point.
    if (cost > warm.cost) {
        if (schedule) *schedule = warm.slots;
        cost = warm.cost;
    }
    return cost;
}

} // namespace hmg
