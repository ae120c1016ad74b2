#include "hmg/dynamics.hpp"

#include <algorithm>
#include <cmath>
#include <complex>
#include <fstream>

#include "hmg/common.hpp"
#include <json.hpp>

namespace hmg {

using Eigen::MatrixXd;
using Eigen::VectorXd;
using json = nlohmann::json;

// ---------------------------------------------------------------------------
// Free functions

double coi_frequency(const VectorXd& inertia, const VectorXd& f_hz) {
    if (inertia.size() == 0 || inertia.size() != f_hz.size())
        throw ValidationError("coi_frequency: inertia and frequency vectors must have equal nonzero length");
    if ((inertia.array() <= 0).any())
        throw ValidationError("coi_frequency: inertias must be positive");
    return inertia.dot(f_hz) / inertia.sum();
}

double ic_power(double omega, double v_dc, const IcParams& ic) {
    const double w_lo = ic.omega_min(), w_hi = ic.omega_max();
    const double v_lo = ic.vdc_band[0], v_hi = ic.vdc_band[1];
    const double w_hat = (2.0 * omega - (w_lo + w_hi)) / (w_hi - w_lo);
    const double v_hat = (2.0 * v_dc - (v_lo + v_hi)) / (v_hi - v_lo);
    return -(w_hat - v_hat) / ic.gamma_p;
}

double ic_reactive(double p_ic, double v_ac, const IcParams& ic, double q0, double base_kva) {
    const double s_max = ic.s_max_pu(base_kva);
    if (std::abs(p_ic) > s_max + 1e-12)
        throw ValidationError("ic_reactive: active power exceeds converter rating");
    if (p_ic <= 0.0) return 0.0;
    const double cap = std::sqrt(std::max(0.0, s_max * s_max - p_ic * p_ic));
    const double q = q0 + (1.0 - v_ac) / ic.gamma_q;
    return std::clamp(q, -cap, cap);
}

// ---------------------------------------------------------------------------
// Event set I/O

std::string to_string(ContingencyKind k) {
    switch (k) {
        case ContingencyKind::wind_drop: return "wind_drop";
        case ContingencyKind::load_step: return "load_step";
        case ContingencyKind::islanding: return "islanding";
        case ContingencyKind::ic_outage: return "ic_outage";
    }
    throw ValidationError("unknown contingency kind");
}

ContingencyKind contingency_kind_from(const std::string& s) {
    if (s == "wind_drop") return ContingencyKind::wind_drop;
    if (s == "load_step") return ContingencyKind::load_step;
    if (s == "islanding") return ContingencyKind::islanding;
    if (s == "ic_outage") return ContingencyKind::ic_outage;
    throw ValidationError("unknown contingency kind '" + s + "'");
}

EventSet load_events(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ValidationError("cannot open events file '" + path + "'");
    json j;
    try {
        j = json::parse(in);
    } catch (const json::exception& e) {
        throw ValidationError("events file '" + path + "': " + e.what());
    }
    json arr = j.is_array()           ? j
               : j.contains("contingencies") ? j["contingencies"]
                                             : j.value("events", json::array());
    EventSet out;
    for (const auto& ej : arr) {
        Contingency c;
        c.kind = contingency_kind_from(ej.value("kind", std::string{}));
        c.location = ej.value("location", std::string{});
        c.magnitude = ej.value("magnitude", 0.0);
        c.start_s = ej.value("start_s", 0.0);
        c.duration_s = ej.value("duration_s", 0.0);
        if (c.duration_s < 0) throw ValidationError("contingency duration must be non-negative");
        if (c.kind == ContingencyKind::wind_drop && (c.magnitude < 0 || c.magnitude > 1))
            throw ValidationError("wind_drop magnitude must lie in [0, 1]");
        if (c.kind == ContingencyKind::load_step && c.magnitude <= -1)
            throw ValidationError("load_step magnitude must exceed -1");
        out.push_back(c);
    }
    return out;
}

void save_events(const EventSet& events, const std::string& path) {
    nlohmann::ordered_json arr = nlohmann::ordered_json::array();
    for (const auto& c : events) {
        nlohmann::ordered_json ej;
        ej["kind"] = to_string(c.kind);
        if (!c.location.empty()) ej["location"] = c.location;
        ej["magnitude"] = c.magnitude;
        ej["start_s"] = c.start_s;
        ej["duration_s"] = c.duration_s;
        arr.push_back(ej);
    }
    nlohmann::ordered_json root;
    root["contingencies"] = arr;
    std::ofstream out(path);
    if (!out) throw Error("cannot write events file '" + path + "'");
    out << root.dump(2) << "\n";
}

// ---------------------------------------------------------------------------
// Local helpers

namespace {

/// Machine air-gap quantities and their partials w.r.t. (delta, eqp, v, theta).
struct MachFlow {
    double pe = 0, qe = 0, id = 0;
    double dpe[4] = {0, 0, 0, 0};
    double dqe[4] = {0, 0, 0, 0};
    double did[4] = {0, 0, 0, 0};
};

MachFlow mach_flow(const dyn::Machine& g, double delta, double eqp, double v, double theta) {
    MachFlow f;
    const double d = delta - theta;
    const double sd = std::sin(d), cd = std::cos(d);
    const double xi = 1.0 / g.xdp;
    f.pe = eqp * v * sd * xi;
    f.dpe[0] = eqp * v * cd * xi;
    f.dpe[1] = v * sd * xi;
    f.dpe[2] = eqp * sd * xi;
    f.dpe[3] = -f.dpe[0];
    f.qe = (eqp * v * cd - v * v) * xi;
    f.dqe[0] = -eqp * v * sd * xi;
    f.dqe[1] = v * cd * xi;
    f.dqe[2] = (eqp * cd - 2.0 * v) * xi;
    f.dqe[3] = -f.dqe[0];
    f.id = (eqp - v * cd) * xi;
    f.did[0] = v * sd * xi;
    f.did[1] = xi;
    f.did[2] = -cd * xi;
    f.did[3] = -f.did[0];
    return f;
}

/// Network flows for given bus angles/voltages and per-subgrid COI speeds.
struct NetFlows {
    VectorXd p, q, pdc;
    MatrixXd dp_dth, dp_dv, dq_dth, dq_dv; // n_ac x n_ac
    MatrixXd dp_dw, dq_dw;                 // n_ac x n_subgrid
    MatrixXd dpdc_dv;                      // n_dc x n_dc
};

NetFlows net_flows(const std::vector<dyn::Line>& lines, const std::vector<int>& ac_index,
                   const MatrixXd& g_dc, double omega0, const VectorXd& th, const VectorXd& v,
                   const VectorXd& vdc, const VectorXd& wcoi, bool want_jac) {
    const int n_ac = static_cast<int>(th.size());
    const int n_dc = static_cast<int>(vdc.size());
    const int n_sub = static_cast<int>(wcoi.size());
    NetFlows nf;

    MatrixXd G = MatrixXd::Zero(n_ac, n_ac), B = MatrixXd::Zero(n_ac, n_ac);
    std::vector<MatrixXd> dG, dB;
    if (want_jac) {
        dG.assign(n_sub, MatrixXd::Zero(n_ac, n_ac));
        dB.assign(n_sub, MatrixXd::Zero(n_ac, n_ac));
    }
    for (const auto& ln : lines) {
        if (!ln.ac) continue;
        const int f = ac_index[ln.from], t = ac_index[ln.to];
        const int s = ln.subgrid;
        const double xw = ln.x0 * wcoi[s] / omega0;
        const double z2 = ln.r * ln.r + xw * xw;
        const double g = ln.r / z2, b = -xw / z2;
        G(f, f) += g; G(t, t) += g; G(f, t) -= g; G(t, f) -= g;
        B(f, f) += b; B(t, t) += b; B(f, t) -= b; B(t, f) -= b;
        if (want_jac) {
            // dy/dw = -j (x0/omega0) y^2 with y = g + jb
            const double k = ln.x0 / omega0;
            const double dg = k * 2.0 * g * b;
            const double db = -k * (g * g - b * b);
            dG[s](f, f) += dg; dG[s](t, t) += dg; dG[s](f, t) -= dg; dG[s](t, f) -= dg;
            dB[s](f, f) += db; dB[s](t, t) += db; dB[s](f, t) -= db; dB[s](t, f) -= db;
        }
    }

    nf.p = VectorXd::Zero(n_ac);
    nf.q = VectorXd::Zero(n_ac);
    if (want_jac) {
        nf.dp_dth = MatrixXd::Zero(n_ac, n_ac);
        nf.dp_dv = MatrixXd::Zero(n_ac, n_ac);
        nf.dq_dth = MatrixXd::Zero(n_ac, n_ac);
        nf.dq_dv = MatrixXd::Zero(n_ac, n_ac);
        nf.dp_dw = MatrixXd::Zero(n_ac, n_sub);
        nf.dq_dw = MatrixXd::Zero(n_ac, n_sub);
    }
    for (int i = 0; i < n_ac; ++i) {
        double pi_acc = 0, qi_acc = 0;
        for (int p = 0; p < n_ac; ++p) {
            const double gip = G(i, p), bip = B(i, p);
            const bool coupled = (gip != 0.0 || bip != 0.0);
            if (!coupled && !(want_jac && p == i)) continue;
            const double tip = th[i] - th[p];
            const double c = std::cos(tip), s = std::sin(tip);
            pi_acc += v[i] * v[p] * (gip * c + bip * s);
            qi_acc += v[i] * v[p] * (gip * s - bip * c);
            if (!want_jac) continue;
            if (p != i) {
                nf.dp_dth(i, p) = v[i] * v[p] * (gip * s - bip * c);
                nf.dp_dth(i, i) -= nf.dp_dth(i, p);
                nf.dq_dth(i, p) = -v[i] * v[p] * (gip * c + bip * s);
                nf.dq_dth(i, i) -= nf.dq_dth(i, p);
                nf.dp_dv(i, p) = v[i] * (gip * c + bip * s);
                nf.dq_dv(i, p) = v[i] * (gip * s - bip * c);
            }
            nf.dp_dv(i, i) += v[p] * (gip * c + bip * s);
            nf.dq_dv(i, i) += v[p] * (gip * s - bip * c);
            if (p == i) {
                nf.dp_dv(i, i) += v[i] * gip;
                nf.dq_dv(i, i) -= v[i] * bip;
            }
        }
        nf.p[i] = pi_acc;
        nf.q[i] = qi_acc;
        if (want_jac) {
            for (int s = 0; s < n_sub; ++s) {
                double dp = 0, dq = 0;
                for (int p = 0; p < n_ac; ++p) {
                    const double dg = dG[s](i, p), db = dB[s](i, p);
                    if (dg == 0.0 && db == 0.0) continue;
                    const double tip = th[i] - th[p];
                    const double c = std::cos(tip), sn = std::sin(tip);
                    dp += v[i] * v[p] * (dg * c + db * sn);
                    dq += v[i] * v[p] * (dg * sn - db * c);
                }
                nf.dp_dw(i, s) = dp;
                nf.dq_dw(i, s) = dq;
            }
        }
    }

    nf.pdc = VectorXd::Zero(n_dc);
    if (want_jac) nf.dpdc_dv = MatrixXd::Zero(n_dc, n_dc);
    if (n_dc > 0) {
        const VectorXd gv = g_dc * vdc;
        nf.pdc = vdc.cwiseProduct(gv);
        if (want_jac) {
            nf.dpdc_dv = vdc.asDiagonal() * g_dc;
            nf.dpdc_dv += gv.asDiagonal().toDenseMatrix();
        }
    }
    return nf;
}

/// Converter active-power droop target with clamp at the rating.
struct PicTarget {
    double val = 0;
    double d_dw = 0;   // w.r.t. the AC subgrid COI speed
    double d_dvdc = 0;
};

PicTarget pic_target(const dyn::IcUnit& ic, double w, double vdc) {
    PicTarget t;
    const double dw_hat = 2.0 / (ic.omega_hi - ic.omega_lo);
    const double dv_hat = 2.0 / (ic.v_hi - ic.v_lo);
    const double w_hat = (2.0 * w - (ic.omega_lo + ic.omega_hi)) / (ic.omega_hi - ic.omega_lo);
    const double v_hat = (2.0 * vdc - (ic.v_lo + ic.v_hi)) / (ic.v_hi - ic.v_lo);
    const double raw = -(w_hat - v_hat) / ic.gamma_p;
    if (raw > ic.s_max) {
        t.val = ic.s_max;
    } else if (raw < -ic.s_max) {
        t.val = -ic.s_max;
    } else {
        t.val = raw;
        t.d_dw = -dw_hat / ic.gamma_p;
        t.d_dvdc = dv_hat / ic.gamma_p;
    }
    return t;
}

/// Converter reactive target; literal branch switch or sigmoid blend.
struct QicTarget {
    double val = 0;
    double d_dpic = 0;
    double d_dvac = 0;
};

QicTarget qic_target(const dyn::IcUnit& ic, double p_ic, double v_ac, bool smooth) {
    QicTarget t;
    const double s2 = ic.s_max * ic.s_max;
    const double cap2 = std::max(0.0, s2 - p_ic * p_ic);
    const double cap = std::sqrt(cap2);
    const double qr = ic.q0 + (1.0 - v_ac) / ic.gamma_q;
    double qmid, dqmid_dp = 0, dqmid_dv = 0;
    if (qr > cap) {
        qmid = cap;
        if (cap > 1e-9) dqmid_dp = -p_ic / cap;
    } else if (qr < -cap) {
        qmid = -cap;
        if (cap > 1e-9) dqmid_dp = p_ic / cap;
    } else {
        qmid = qr;
        dqmid_dv = -1.0 / ic.gamma_q;
    }
    if (!smooth) {
        if (p_ic <= 0.0) return t;
        t.val = qmid;
        t.d_dpic = dqmid_dp;
        t.d_dvac = dqmid_dv;
        return t;
    }
    const double width = 1e-3;
    const double a = p_ic / width;
    double sig;
    if (a >= 0) {
        sig = 1.0 / (1.0 + std::exp(-a));
    } else {
        const double e = std::exp(a);
        sig = e / (1.0 + e);
    }
    const double dsig = sig * (1.0 - sig) / width;
    t.val = sig * qmid;
    t.d_dpic = dsig * qmid + sig * dqmid_dp;
    t.d_dvac = sig * dqmid_dv;
    return t;
}

} // namespace

// ---------------------------------------------------------------------------
// DynModel

DynModel::DynModel(const HmgSystem& sys, const DispatchSetpoints& dispatch) : sys_(&sys) {
    base_ = sys.base_kva;
    omega0_ = sys.omega0();
    compile(sys);
    set_dispatch(dispatch);
}

void DynModel::compile(const HmgSystem& sys) {
    const int nb = static_cast<int>(sys.buses.size());
    ac_index_.assign(nb, -1);
    dc_index_.assign(nb, -1);
    bus_subgrid_.assign(nb, -1);
    for (int b = 0; b < nb; ++b) {
        const auto& bus = sys.buses[b];
        if (bus.kind == BusKind::ac) {
            ac_index_[b] = n_ac_++;
            ac_bus_of_.push_back(b);
            auto it = std::find(subgrid_names_.begin(), subgrid_names_.end(), bus.subgrid);
            if (it == subgrid_names_.end()) {
                subgrid_names_.push_back(bus.subgrid);
                bus_subgrid_[b] = static_cast<int>(subgrid_names_.size()) - 1;
            } else {
                bus_subgrid_[b] = static_cast<int>(it - subgrid_names_.begin());
            }
        } else {
            dc_index_[b] = n_dc_++;
            dc_bus_of_.push_back(b);
        }
    }
    const int n_sub = static_cast<int>(subgrid_names_.size());
    subgrid_machines_.assign(n_sub, {});
    subgrid_h_.assign(n_sub, 0.0);
    slack_machine_.assign(n_sub, -1);
    gauge_theta_.assign(n_sub, 0.0);

    for (const auto& m : sys.machines) {
        const int b = sys.bus_index(m.bus);
        if (sys.buses[b].kind != BusKind::ac) continue; // DC units are static injections
        dyn::Machine g;
        g.id = m.id;
        g.bus = b;
        g.subgrid = bus_subgrid_[b];
        g.h = m.h_sys(base_);
        g.xd = m.x_d_sys(base_);
        g.xdp = m.x_dp_sys(base_);
        g.td0 = m.t_d0_prime;
        g.dp = m.gov.d_p * m.s_frac(base_);
        g.di = m.gov.d_i * m.s_frac(base_);
        g.tg = m.gov.t_g;
        g.ka = m.avr.k_a;
        g.ta = m.avr.t_a;
        g.ke = m.avr.k_e;
        g.te = m.avr.t_e;
        g.kf = m.avr.k_f;
        g.tf = m.avr.t_f;
        g.p_max = m.p_max_pu(base_);
        g.s_max = m.s_max_pu(base_);
        const int idx = static_cast<int>(machines_.size());
        machines_.push_back(g);
        subgrid_machines_[g.subgrid].push_back(idx);
        subgrid_h_[g.subgrid] += g.h;
    }
    for (int s = 0; s < n_sub; ++s) {
        double best = -1.0;
        for (int mi : subgrid_machines_[s]) {
            if (machines_[mi].h > best) {
                best = machines_[mi].h;
                slack_machine_[s] = mi;
            }
        }
        if (slack_machine_[s] >= 0) machines_[slack_machine_[s]].slack = true;
    }

    for (const auto& r : sys.ibrs) {
        const int b = sys.bus_index(r.bus);
        if (r.kind == IbrKind::wt) {
            dyn::AcIbr u;
            u.id = r.id;
            u.bus = b;
            u.subgrid = bus_subgrid_[b];
            u.l = r.l_filter;
            u.kp = r.k_p;
            u.ki = r.k_i;
            u.dv = r.d_v_sys(base_);
            u.cap = r.p_max_kw / base_;
            u.s_max = r.s_max_kva / base_;
            ac_ibrs_.push_back(u);
        } else {
            dyn::DcIbr u;
            u.id = r.id;
            u.bus = b;
            u.cap = r.p_max_kw / base_;
            dc_ibrs_.push_back(u);
        }
    }

    for (const auto& l : sys.lines) {
        dyn::Line ln;
        ln.from = sys.bus_index(l.from);
        ln.to = sys.bus_index(l.to);
        ln.ac = sys.buses[ln.from].kind == BusKind::ac;
        ln.subgrid = ln.ac ? bus_subgrid_[ln.from] : -1;
        ln.r = l.r;
        ln.x0 = ln.ac ? l.x.value() : 0.0;
        ln.s_max = l.s_max_kva / base_;
        lines_.push_back(ln);
    }
    g_dc_ = MatrixXd::Zero(n_dc_, n_dc_);
    for (const auto& ln : lines_) {
        if (ln.ac) continue;
        const int f = dc_index_[ln.from], t = dc_index_[ln.to];
        const double g = 1.0 / ln.r;
        g_dc_(f, f) += g;
        g_dc_(t, t) += g;
        g_dc_(f, t) -= g;
        g_dc_(t, f) -= g;
    }

    if (sys.ic) {
        dyn::IcUnit u;
        u.ac_bus = sys.bus_index(sys.ic->ac_bus);
        u.dc_bus = sys.bus_index(sys.ic->dc_bus);
        u.ac_subgrid = bus_subgrid_[u.ac_bus];
        u.s_max = sys.ic->s_max_pu(base_);
        u.gamma_p = sys.ic->gamma_p;
        u.gamma_q = sys.ic->gamma_q;
        u.omega_lo = sys.ic->omega_min();
        u.omega_hi = sys.ic->omega_max();
        u.v_lo = sys.ic->vdc_band[0];
        u.v_hi = sys.ic->vdc_band[1];
        u.q0 = sys.ic->q_nominal_kvar / base_;
        ic_ = u;
    }
    if (sys.tie) tie_bus_ = sys.bus_index(sys.tie->bus);

    alg_off_ = 8 * static_cast<int>(machines_.size()) + 4 * static_cast<int>(ac_ibrs_.size());
    n_state_ = alg_off_ + 2 * n_ac_ + n_dc_ + (ic_ ? 2 : 0);
    n_pf_ = 2 * n_ac_ + n_dc_ + 2 * static_cast<int>(machines_.size()) + (ic_ ? 2 : 0);
}

void DynModel::set_dispatch(const DispatchSetpoints& d) {
    dispatch_ = d;
    const HmgSystem& sys = *sys_;
    if (d.day < 0 || d.day >= static_cast<int>(sys.days.size()))
        throw ValidationError("dispatch day index out of range");
    if (d.slot < 0 || d.slot >= sys.slots_per_day)
        throw ValidationError("dispatch slot index out of range");

    const int nb = static_cast<int>(sys.buses.size());
    load_p_ = VectorXd::Zero(nb);
    load_q_ = VectorXd::Zero(nb);
    stat_p_ = VectorXd::Zero(nb);
    stat_q_ = VectorXd::Zero(nb);
    for (int b = 0; b < nb; ++b) {
        auto [p, q] = sys.load_pu(d.day, d.slot, sys.buses[b]);
        load_p_[b] = p;
        load_q_[b] = q;
    }
    for (auto& g : machines_) {
        g.p_set = d.get(d.p_dg, g.id);
        g.q_set = d.get(d.q_dg, g.id);
    }
    for (const auto& m : sys.machines) {
        const int b = sys.bus_index(m.bus);
        if (sys.buses[b].kind == BusKind::dc) stat_p_[b] += d.get(d.p_dg, m.id);
    }
    auto ibr_spec = [&](const std::string& id) -> const IbrParams& {
        for (const auto& r : sys.ibrs)
            if (r.id == id) return r;
        throw ValidationError("unknown converter unit '" + id + "'");
    };
    for (auto& u : ac_ibrs_) {
        u.alpha = sys.availability(d.day, d.slot, ibr_spec(u.id));
        u.p_ref = d.get(d.p_ibr, u.id);
        u.q_ref = d.get(d.q_ibr, u.id);
    }
    for (auto& u : dc_ibrs_) {
        u.alpha = sys.availability(d.day, d.slot, ibr_spec(u.id));
        u.p_ref = d.get(d.p_ibr, u.id);
    }
    for (const auto& e : sys.storages) {
        const int b = sys.bus_index(e.bus);
        stat_p_[b] += d.es_net(e.id);
        if (sys.buses[b].kind == BusKind::ac) stat_q_[b] += d.get(d.q_es, e.id);
    }
    if (tie_bus_ >= 0) {
        auto [tp, tq] = sys.tie_pu(d.day, d.slot);
        tie_p_ = tp;
        tie_q_ = tq;
    }
}

StepContext DynModel::context(const EventSet& events, double t) const {
    StepContext cx;
    cx.load_scale = VectorXd::Ones(static_cast<int>(sys_->buses.size()));
    cx.ibr_alpha.resize(ac_ibrs_.size());
    for (size_t i = 0; i < ac_ibrs_.size(); ++i) cx.ibr_alpha[i] = ac_ibrs_[i].alpha;
    cx.pv_alpha.resize(dc_ibrs_.size());
    for (size_t i = 0; i < dc_ibrs_.size(); ++i) cx.pv_alpha[i] = dc_ibrs_[i].alpha;
    for (const auto& e : events) {
        if (!e.active_at(t)) continue;
        switch (e.kind) {
            case ContingencyKind::wind_drop: {
                bool found = false;
                for (size_t i = 0; i < ac_ibrs_.size(); ++i)
                    if (ac_ibrs_[i].id == e.location) {
                        cx.ibr_alpha[i] *= (1.0 - e.magnitude);
                        found = true;
                    }
                for (size_t i = 0; i < dc_ibrs_.size(); ++i)
                    if (dc_ibrs_[i].id == e.location) {
                        cx.pv_alpha[i] *= (1.0 - e.magnitude);
                        found = true;
                    }
                if (!found)
                    throw ValidationError("wind_drop targets unknown renewable unit '" + e.location + "'");
                break;
            }
            case ContingencyKind::load_step: {
                const int b = sys_->bus_index(e.location);
                cx.load_scale[b] *= (1.0 + e.magnitude);
                break;
            }
            case ContingencyKind::islanding:
                cx.tie_on = false;
                break;
            case ContingencyKind::ic_outage:
                cx.ic_on = false;
                break;
        }
    }
    return cx;
}

void DynModel::eval(const VectorXd& xn, const VectorXd* xp, double h, const StepContext& cx,
                    bool smooth_ic, VectorXd* r, MatrixXd* jac) const {
    const bool steady = (xp == nullptr);
    const int n = n_state_;
    if (xn.size() != n) throw ValidationError("state dimension mismatch");
    if (!steady && xp->size() != n) throw ValidationError("state dimension mismatch");
    if (!steady && h <= 0) throw ValidationError("step size must be positive");
    if (!r) throw ValidationError("residual output required");
    r->setZero(n);
    MatrixXd* J = jac;
    if (J) J->setZero(n, n);

    const int M = n_machines();
    const int R = n_ac_ibr();
    const int n_sub = n_ac_subgrids();
    const double sc = steady ? 1.0 : -h; // scale on f in each differential row

    // Per-subgrid COI speeds.
    VectorXd wcoi(n_sub);
    for (int s = 0; s < n_sub; ++s) {
        double acc = 0;
        for (int mi : subgrid_machines_[s]) acc += machines_[mi].h * xn[idx_mach(mi, 1)];
        wcoi[s] = omega0_ + acc / subgrid_h_[s];
    }

    const VectorXd th = xn.segment(idx_theta(0), n_ac_);
    const VectorXd v = xn.segment(idx_v(0), n_ac_);
    const VectorXd vdc = n_dc_ > 0 ? xn.segment(idx_vdc(0), n_dc_) : VectorXd{};

    NetFlows nf = net_flows(lines_, ac_index_, g_dc_, omega0_, th, v, vdc, wcoi, J != nullptr);

    VectorXd inj_p = VectorXd::Zero(n_ac_), inj_q = VectorXd::Zero(n_ac_);
    VectorXd inj_dc = VectorXd::Zero(std::max(n_dc_, 1));

    // Loads, static injections, tie import.
    const int nb = static_cast<int>(sys_->buses.size());
    for (int b = 0; b < nb; ++b) {
        const double s = cx.load_scale[b];
        if (ac_index_[b] >= 0) {
            const int i = ac_index_[b];
            inj_p[i] += stat_p_[b] - load_p_[b] * s;
            inj_q[i] += stat_q_[b] - load_q_[b] * s;
        } else {
            const int j = dc_index_[b];
            const double vj = vdc[j];
            inj_dc[j] += stat_p_[b] - load_p_[b] * s * vj * vj;
            if (J) (*J)(idx_vdc(j), idx_vdc(j)) += -2.0 * load_p_[b] * s * vj;
        }
    }
    if (cx.tie_on && tie_bus_ >= 0) {
        inj_p[ac_index_[tie_bus_]] += tie_p_;
        inj_q[ac_index_[tie_bus_]] += tie_q_;
    }
    for (size_t u = 0; u < dc_ibrs_.size(); ++u) {
        const auto& s = dc_ibrs_[u];
        inj_dc[dc_index_[s.bus]] += std::min(s.p_ref, cx.pv_alpha[u] * s.cap);
    }

    auto add_diff = [&](int row, double f) {
        if (steady) {
            (*r)[row] = f;
        } else {
            (*r)[row] = xn[row] - (*xp)[row] - h * f;
            if (J) (*J)(row, row) += 1.0;
        }
    };
    auto dfe = [&](int row, int col, double df) {
        if (J) (*J)(row, col) += sc * df;
    };

    // Machines.
    for (int m = 0; m < M; ++m) {
        const auto& g = machines_[m];
        const int i_d = idx_mach(m, 0), i_w = idx_mach(m, 1), i_e = idx_mach(m, 2);
        const int i_f = idx_mach(m, 3), i_r = idx_mach(m, 4), i_p = idx_mach(m, 5);
        const int i_z = idx_mach(m, 6), i_a = idx_mach(m, 7);
        const double delta = xn[i_d], dom = xn[i_w], eqp = xn[i_e], efd = xn[i_f];
        const double er = xn[i_r], pm = xn[i_p], zg = xn[i_z], wa = xn[i_a];
        const int ac = ac_index_[g.bus];
        const double vb = v[ac], thb = th[ac];
        const int rP = idx_theta(ac), rQ = idx_v(ac);

        MachFlow mf = mach_flow(g, delta, eqp, vb, thb);
        inj_p[ac] += mf.pe;
        inj_q[ac] += mf.qe;
        if (J) {
            const int cols[4] = {i_d, i_e, idx_v(ac), idx_theta(ac)};
            for (int k = 0; k < 4; ++k) {
                (*J)(rP, cols[k]) += mf.dpe[k];
                (*J)(rQ, cols[k]) += mf.dqe[k];
            }
        }

        // delta' = d_omega (slack row becomes the angle gauge when steady)
        if (steady && g.slack) {
            (*r)[i_d] = th[ac_index_[g.bus]] - gauge_theta_[g.subgrid];
            if (J) (*J)(i_d, idx_theta(ac_index_[g.bus])) += 1.0;
        } else {
            add_diff(i_d, dom);
            dfe(i_d, i_w, 1.0);
        }

        // swing
        {
            const double k = omega0_ / (2.0 * g.h);
            add_diff(i_w, k * (pm - mf.pe));
            dfe(i_w, i_p, k);
            const int cols[4] = {i_d, i_e, idx_v(ac), idx_theta(ac)};
            for (int c = 0; c < 4; ++c) dfe(i_w, cols[c], -k * mf.dpe[c]);
        }

        // flux decay
        {
            const double k = 1.0 / g.td0, dx = g.xd - g.xdp;
            add_diff(i_e, k * (efd - eqp - dx * mf.id));
            dfe(i_e, i_f, k);
            dfe(i_e, i_e, -k * (1.0 + dx * mf.did[1]));
            dfe(i_e, i_d, -k * dx * mf.did[0]);
            dfe(i_e, idx_v(ac), -k * dx * mf.did[2]);
            dfe(i_e, idx_theta(ac), -k * dx * mf.did[3]);
        }

        // field winding with non-windup limits
        bool f_hi = false, f_lo = false;
        {
            auto f_at = [&](double e) { return (er - g.ke * e) / g.te; };
            if (!steady && std::isfinite(g.efd_max))
                f_hi = (g.efd_max - (*xp)[i_f] - h * f_at(g.efd_max)) < 0.0;
            if (!steady && !f_hi) f_lo = (0.0 - (*xp)[i_f] - h * f_at(0.0)) > 0.0;
            if (f_hi || f_lo) {
                (*r)[i_f] = efd - (f_hi ? g.efd_max : 0.0);
                if (J) (*J)(i_f, i_f) += 1.0;
            } else {
                add_diff(i_f, (er - g.ke * efd) / g.te);
                dfe(i_f, i_r, 1.0 / g.te);
                dfe(i_f, i_f, -g.ke / g.te);
            }
        }

        // regulator amplifier, frozen while the field is railed outward
        {
            const double uf = (g.kf / g.tf) * (efd - wa);
            const double f_er = (-er + g.ka * (g.v_ref - vb - uf)) / g.ta;
            const bool freeze = (f_hi && f_er > 0.0) || (f_lo && f_er < 0.0);
            if (freeze) {
                (*r)[i_r] = er - (*xp)[i_r];
                if (J) (*J)(i_r, i_r) += 1.0;
            } else {
                add_diff(i_r, f_er);
                dfe(i_r, i_r, -1.0 / g.ta);
                dfe(i_r, idx_v(ac), -g.ka / g.ta);
                dfe(i_r, i_f, -g.ka * g.kf / (g.tf * g.ta));
                dfe(i_r, i_a, g.ka * g.kf / (g.tf * g.ta));
            }
        }

        // prime mover with mechanical limits
        bool p_hi = false, p_lo = false;
        {
            const double pf = zg - g.dp * dom / omega0_;
            if (!steady) {
                p_hi = (g.p_max - (*xp)[i_p] - h * (pf - g.p_max) / g.tg) < 0.0;
                if (!p_hi) p_lo = (0.0 - (*xp)[i_p] - h * (pf - 0.0) / g.tg) > 0.0;
            }
            if (p_hi || p_lo) {
                (*r)[i_p] = pm - (p_hi ? g.p_max : 0.0);
                if (J) (*J)(i_p, i_p) += 1.0;
            } else {
                add_diff(i_p, (pf - pm) / g.tg);
                dfe(i_p, i_z, 1.0 / g.tg);
                dfe(i_p, i_w, -g.dp / (omega0_ * g.tg));
                dfe(i_p, i_p, -1.0 / g.tg);
            }
        }

        // governor integrator; in the steady problem non-slack machines pin
        // their output to the dispatch target instead (the speed condition is
        // already carried by the angle row, and the split between machines is
        // otherwise free)
        {
            const double f_z = -g.di * dom / omega0_;
            if (steady && !g.slack) {
                (*r)[i_z] = pm - g.p_set;
                if (J) (*J)(i_z, i_p) += 1.0;
            } else if (!steady && ((p_hi && f_z > 0.0) || (p_lo && f_z < 0.0))) {
                (*r)[i_z] = zg - (*xp)[i_z];
                if (J) (*J)(i_z, i_z) += 1.0;
            } else {
                add_diff(i_z, f_z);
                dfe(i_z, i_w, -g.di / omega0_);
            }
        }

        // stabilizer washout state
        {
            add_diff(i_a, (efd - wa) / g.tf);
            dfe(i_a, i_f, 1.0 / g.tf);
            dfe(i_a, i_a, -1.0 / g.tf);
        }
    }

    // AC converters (wind).
    for (int u = 0; u < R; ++u) {
        const auto& w = ac_ibrs_[u];
        const int i_id = idx_ibr(u, 0), i_iq = idx_ibr(u, 1);
        const int i_pd = idx_ibr(u, 2), i_pq = idx_ibr(u, 3);
        const double idv = xn[i_id], iqv = xn[i_iq], pid = xn[i_pd], piq = xn[i_pq];
        const int ac = ac_index_[w.bus];
        const double vb = v[ac];
        const int rP = idx_theta(ac), rQ = idx_v(ac), cV = idx_v(ac);

        const double p_eff = std::min(w.p_ref, cx.ibr_alpha[u] * w.cap);
        const double iq_ref = p_eff / vb;
        const double diq_ref = -p_eff / (vb * vb);
        const double id_ref = (w.q_ref + w.dv * (1.0 - vb)) / vb;
        const double did_ref = -(w.q_ref + w.dv) / (vb * vb);

        add_diff(i_id, (w.kp * (id_ref - idv) + pid) / w.l);
        dfe(i_id, i_id, -w.kp / w.l);
        dfe(i_id, i_pd, 1.0 / w.l);
        dfe(i_id, cV, w.kp * did_ref / w.l);

        add_diff(i_iq, (w.kp * (iq_ref - iqv) + piq) / w.l);
        dfe(i_iq, i_iq, -w.kp / w.l);
        dfe(i_iq, i_pq, 1.0 / w.l);
        dfe(i_iq, cV, w.kp * diq_ref / w.l);

        add_diff(i_pd, w.ki * (id_ref - idv));
        dfe(i_pd, i_id, -w.ki);
        dfe(i_pd, cV, w.ki * did_ref);

        add_diff(i_pq, w.ki * (iq_ref - iqv));
        dfe(i_pq, i_iq, -w.ki);
        dfe(i_pq, cV, w.ki * diq_ref);

        inj_p[ac] += vb * iqv;
        inj_q[ac] += vb * idv;
        if (J) {
            (*J)(rP, cV) += iqv;
            (*J)(rP, i_iq) += vb;
            (*J)(rQ, cV) += idv;
            (*J)(rQ, i_id) += vb;
        }
    }

    // Interlinking converter.
    if (ic_) {
        const auto& u = *ic_;
        const int rp = idx_pic(), rq = idx_qic();
        const double pic = xn[rp], qic = xn[rq];
        const int ac = ac_index_[u.ac_bus], dc = dc_index_[u.dc_bus];
        if (!cx.ic_on) {
            (*r)[rp] = pic;
            (*r)[rq] = qic;
            if (J) {
                (*J)(rp, rp) += 1.0;
                (*J)(rq, rq) += 1.0;
            }
        } else {
            PicTarget pt = pic_target(u, wcoi[u.ac_subgrid], vdc[dc]);
            (*r)[rp] = pic - pt.val;
            if (J) {
                (*J)(rp, rp) += 1.0;
                (*J)(rp, idx_vdc(dc)) -= pt.d_dvdc;
                if (pt.d_dw != 0.0) {
                    for (int mi : subgrid_machines_[u.ac_subgrid])
                        (*J)(rp, idx_mach(mi, 1)) -=
                            pt.d_dw * machines_[mi].h / subgrid_h_[u.ac_subgrid];
                }
            }
            QicTarget qt = qic_target(u, pic, v[ac], smooth_ic);
            (*r)[rq] = qic - qt.val;
            if (J) {
                (*J)(rq, rq) += 1.0;
                (*J)(rq, rp) -= qt.d_dpic;
                (*J)(rq, idx_v(ac)) -= qt.d_dvac;
            }
        }
        inj_p[ac] += pic;
        inj_q[ac] += qic;
        inj_dc[dc] -= pic;
        if (J) {
            (*J)(idx_theta(ac), rp) += 1.0;
            (*J)(idx_v(ac), rq) += 1.0;
            (*J)(idx_vdc(dc), rp) -= 1.0;
        }
    }

    // Bus balances.
    for (int i = 0; i < n_ac_; ++i) {
        const int rP = idx_theta(i), rQ = idx_v(i);
        (*r)[rP] += inj_p[i] - nf.p[i];
        (*r)[rQ] += inj_q[i] - nf.q[i];
        if (J) {
            for (int p = 0; p < n_ac_; ++p) {
                (*J)(rP, idx_theta(p)) -= nf.dp_dth(i, p);
                (*J)(rP, idx_v(p)) -= nf.dp_dv(i, p);
                (*J)(rQ, idx_theta(p)) -= nf.dq_dth(i, p);
                (*J)(rQ, idx_v(p)) -= nf.dq_dv(i, p);
            }
            const int s = bus_subgrid_[ac_bus_of_[i]];
            if (nf.dp_dw(i, s) != 0.0 || nf.dq_dw(i, s) != 0.0) {
                for (int mi : subgrid_machines_[s]) {
                    const double wgt = machines_[mi].h / subgrid_h_[s];
                    (*J)(rP, idx_mach(mi, 1)) -= nf.dp_dw(i, s) * wgt;
                    (*J)(rQ, idx_mach(mi, 1)) -= nf.dq_dw(i, s) * wgt;
                }
            }
        }
    }
    for (int j = 0; j < n_dc_; ++j) {
        const int rD = idx_vdc(j);
        (*r)[rD] += inj_dc[j] - nf.pdc[j];
        if (J) {
            for (int k = 0; k < n_dc_; ++k) (*J)(rD, idx_vdc(k)) -= nf.dpdc_dv(j, k);
        }
    }
}

void DynModel::pf_eval(const VectorXd& xpf, const StepContext& cx, VectorXd* r,
                       MatrixXd* jac) const {
    if (xpf.size() != n_pf_) throw ValidationError("power-flow vector dimension mismatch");
    if (!r) throw ValidationError("residual output required");
    const int M = n_machines();
    const int i_th0 = 0, i_v0 = n_ac_, i_dc0 = 2 * n_ac_;
    const int i_m0 = 2 * n_ac_ + n_dc_;
    const int i_pic = i_m0 + 2 * M, i_qic = i_pic + 1;
    r->setZero(n_pf_);
    MatrixXd* J = jac;
    if (J) J->setZero(n_pf_, n_pf_);

    const VectorXd th = xpf.segment(i_th0, n_ac_);
    const VectorXd v = xpf.segment(i_v0, n_ac_);
    const VectorXd vdc = n_dc_ > 0 ? xpf.segment(i_dc0, n_dc_) : VectorXd{};
    const VectorXd wcoi = VectorXd::Constant(std::max(n_ac_subgrids(), 1), omega0_);

    NetFlows nf = net_flows(lines_, ac_index_, g_dc_, omega0_, th, v, vdc, wcoi, J != nullptr);

    VectorXd inj_p = VectorXd::Zero(n_ac_), inj_q = VectorXd::Zero(n_ac_);
    VectorXd inj_dc = VectorXd::Zero(std::max(n_dc_, 1));
    const int nb = static_cast<int>(sys_->buses.size());
    for (int b = 0; b < nb; ++b) {
        const double s = cx.load_scale[b];
        if (ac_index_[b] >= 0) {
            inj_p[ac_index_[b]] += stat_p_[b] - load_p_[b] * s;
            inj_q[ac_index_[b]] += stat_q_[b] - load_q_[b] * s;
        } else {
            const int j = dc_index_[b];
            inj_dc[j] += stat_p_[b] - load_p_[b] * s * vdc[j] * vdc[j];
            if (J) (*J)(i_dc0 + j, i_dc0 + j) += -2.0 * load_p_[b] * s * vdc[j];
        }
    }
    if (cx.tie_on && tie_bus_ >= 0) {
        inj_p[ac_index_[tie_bus_]] += tie_p_;
        inj_q[ac_index_[tie_bus_]] += tie_q_;
    }

    for (int m = 0; m < M; ++m) {
        const auto& g = machines_[m];
        const int ac = ac_index_[g.bus];
        const int c_d = i_m0 + 2 * m, c_e = c_d + 1;
        const double delta = xpf[c_d], eqp = xpf[c_e];
        const double vb = v[ac], thb = th[ac];
        MachFlow mf = mach_flow(g, delta, eqp, vb, thb);
        inj_p[ac] += mf.pe;
        inj_q[ac] += mf.qe;
        const int rP = i_th0 + ac, rQ = i_v0 + ac;
        if (J) {
            const int cols[4] = {c_d, c_e, i_v0 + ac, i_th0 + ac};
            for (int k = 0; k < 4; ++k) {
                (*J)(rP, cols[k]) += mf.dpe[k];
                (*J)(rQ, cols[k]) += mf.dqe[k];
            }
        }
        const int rm = i_m0 + 2 * m;
        if (g.slack) {
            (*r)[rm] = th[ac];
            (*r)[rm + 1] = v[ac] - dispatch_.v_slack;
            if (J) {
                (*J)(rm, i_th0 + ac) += 1.0;
                (*J)(rm + 1, i_v0 + ac) += 1.0;
            }
        } else {
            (*r)[rm] = mf.pe - g.p_set;
            (*r)[rm + 1] = mf.qe - g.q_set;
            if (J) {
                const int cols[4] = {c_d, c_e, i_v0 + ac, i_th0 + ac};
                for (int k = 0; k < 4; ++k) {
                    (*J)(rm, cols[k]) += mf.dpe[k];
                    (*J)(rm + 1, cols[k]) += mf.dqe[k];
                }
            }
        }
    }

    // Converter sources at their references.
    for (size_t u = 0; u < ac_ibrs_.size(); ++u) {
        const auto& w = ac_ibrs_[u];
        const int ac = ac_index_[w.bus];
        const double vb = v[ac];
        const double p_eff = std::min(w.p_ref, cx.ibr_alpha[u] * w.cap);
        inj_p[ac] += p_eff;
        inj_q[ac] += w.q_ref + w.dv * (1.0 - vb);
        if (J) (*J)(i_v0 + ac, i_v0 + ac) += -w.dv;
    }
    for (size_t u = 0; u < dc_ibrs_.size(); ++u) {
        const auto& s = dc_ibrs_[u];
        inj_dc[dc_index_[s.bus]] += std::min(s.p_ref, cx.pv_alpha[u] * s.cap);
    }

    if (ic_) {
        const auto& u = *ic_;
        const int ac = ac_index_[u.ac_bus], dc = dc_index_[u.dc_bus];
        const double pic = xpf[i_pic], qic = xpf[i_qic];
        if (!cx.ic_on) {
            (*r)[i_pic] = pic;
            (*r)[i_qic] = qic;
            if (J) {
                (*J)(i_pic, i_pic) += 1.0;
                (*J)(i_qic, i_qic) += 1.0;
            }
        } else {
            PicTarget pt = pic_target(u, omega0_, vdc[dc]);
            (*r)[i_pic] = pic - pt.val;
            QicTarget qt = qic_target(u, pic, v[ac], false);
            (*r)[i_qic] = qic - qt.val;
            if (J) {
                (*J)(i_pic, i_pic) += 1.0;
                (*J)(i_pic, i_dc0 + dc) -= pt.d_dvdc;
                (*J)(i_qic, i_qic) += 1.0;
                (*J)(i_qic, i_pic) -= qt.d_dpic;
                (*J)(i_qic, i_v0 + ac) -= qt.d_dvac;
            }
        }
        inj_p[ac] += pic;
        inj_q[ac] += qic;
        inj_dc[dc] -= pic;
        if (J) {
            (*J)(i_th0 + ac, i_pic) += 1.0;
            (*J)(i_v0 + ac, i_qic) += 1.0;
            (*J)(i_dc0 + dc, i_pic) -= 1.0;
        }
    }

    for (int i = 0; i < n_ac_; ++i) {
        (*r)[i_th0 + i] += inj_p[i] - nf.p[i];
        (*r)[i_v0 + i] += inj_q[i] - nf.q[i];
        if (J) {
            for (int p = 0; p < n_ac_; ++p) {
                (*J)(i_th0 + i, i_th0 + p) -= nf.dp_dth(i, p);
                (*J)(i_th0 + i, i_v0 + p) -= nf.dp_dv(i, p);
                (*J)(i_v0 + i, i_th0 + p) -= nf.dq_dth(i, p);
                (*J)(i_v0 + i, i_v0 + p) -= nf.dq_dv(i, p);
            }
        }
    }
    for (int j = 0; j < n_dc_; ++j) {
        (*r)[i_dc0 + j] += inj_dc[j] - nf.pdc[j];
        if (J) {
            for (int k = 0; k < n_dc_; ++k) (*J)(i_dc0 + j, i_dc0 + k) -= nf.dpdc_dv(j, k);
        }
    }
}

VectorXd DynModel::pf_flat_start() const {
    VectorXd x = VectorXd::Zero(n_pf_);
    x.segment(n_ac_, n_ac_).setOnes();
    if (n_dc_ > 0) x.segment(2 * n_ac_, n_dc_).setOnes();
    const int i_m0 = 2 * n_ac_ + n_dc_;
    for (int m = 0; m < n_machines(); ++m) x[i_m0 + 2 * m + 1] = 1.0;
    return x;
}

double DynModel::electrical_power(const VectorXd& x, int m) const {
    const auto& g = machines_[m];
    const int ac = ac_index_[g.bus];
    return mach_flow(g, x[idx_mach(m, 0)], x[idx_mach(m, 2)], x[idx_v(ac)], x[idx_theta(ac)]).pe;
}

double DynModel::coi_speed(const VectorXd& x, int subgrid) const {
    double acc = 0;
    for (int mi : subgrid_machines_[subgrid]) acc += machines_[mi].h * x[idx_mach(mi, 1)];
    return omega0_ + acc / subgrid_h_[subgrid];
}

double DynModel::coi_frequency_hz(const VectorXd& x, int subgrid) const {
    return coi_speed(x, subgrid) / (2.0 * pi);
}

double DynModel::ac_line_flow(const VectorXd& x, int line) const {
    const auto& ln = lines_[line];
    if (!ln.ac) throw ValidationError("line is not an AC line");
    const double w = coi_speed(x, ln.subgrid);
    const std::complex<double> z(ln.r, ln.x0 * w / omega0_);
    const int f = ac_index_[ln.from], t = ac_index_[ln.to];
    const std::complex<double> vf = std::polar(x[idx_v(f)], x[idx_theta(f)]);
    const std::complex<double> vt = std::polar(x[idx_v(t)], x[idx_theta(t)]);
    const std::complex<double> i = (vf - vt) / z;
    return std::abs(vf * std::conj(i));
}

void DynModel::network_injections(const VectorXd& theta, const VectorXd& v_ac,
                                  const VectorXd& v_dc, VectorXd& p_ac, VectorXd& q_ac,
                                  VectorXd& p_dc) const {
    const VectorXd wcoi = VectorXd::Constant(std::max(n_ac_subgrids(), 1), omega0_);
    NetFlows nf = net_flows(lines_, ac_index_, g_dc_, omega0_, theta, v_ac, v_dc, wcoi, false);
    p_ac = nf.p;
    q_ac = nf.q;
    p_dc = n_dc_ > 0 ? nf.pdc : VectorXd{};
}

std::string DynModel::var_name(int i) const {
    static const char* mfield[8] = {"delta", "d_omega", "e_q_prime", "e_fd",
                                    "e_r",   "p_m",     "z_gov",     "w_avr"};
    static const char* rfield[4] = {"i_d", "i_q", "pi_d", "pi_q"};
    const int M = n_machines(), R = n_ac_ibr();
    if (i < 8 * M) return machines_[i / 8].id + "." + mfield[i % 8];
    i -= 8 * M;
    if (i < 4 * R) return ac_ibrs_[i / 4].id + "." + rfield[i % 4];
    i -= 4 * R;
    if (i < n_ac_) return sys_->buses[ac_bus_of_[i]].id + ".theta";
    i -= n_ac_;
    if (i < n_ac_) return sys_->buses[ac_bus_of_[i]].id + ".v";
    i -= n_ac_;
    if (i < n_dc_) return sys_->buses[dc_bus_of_[i]].id + ".v_dc";
    i -= n_dc_;
    return i == 0 ? "ic.p" : "ic.q";
}

} // namespace hmg
