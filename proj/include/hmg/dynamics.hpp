#pragma once

#include <Eigen/Dense>

#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "hmg/dispatch.hpp"
#include "hmg/events.hpp"
#include "hmg/netmodel.hpp"

namespace hmg {

/// Trajectory sample: full model state vector plus simulation time.
struct DynamicState {
    Eigen::VectorXd x;
    double t = 0.0;
};

/// Inertia-weighted centre-of-inertia frequency in Hz.
/// inertia and f_hz must be the same nonzero length; inertias must be > 0.
double coi_frequency(const Eigen::VectorXd& inertia, const Eigen::VectorXd& f_hz);

/// Interlinking-converter active-power droop (unclamped), p.u. into the AC
/// side. omega is the AC-side COI speed in rad/s, v_dc the DC terminal
/// voltage in p.u.; both are normalized onto [-1, 1] over the converter's
/// operating bands before the droop gain is applied.
double ic_power(double omega, double v_dc, const IcParams& ic);

/// Interlinking-converter reactive support: zero unless exporting to the AC
/// side, otherwise a voltage droop around q0 clipped to the apparent-power
/// headroom left by p_ic. All powers p.u. on base_kva. Throws if |p_ic|
/// exceeds the converter rating.
double ic_reactive(double p_ic, double v_ac, const IcParams& ic, double q0, double base_kva);

namespace dyn {

/// Synchronous machine compiled onto the system base.
struct Machine {
    std::string id;
    int bus = -1;
    int subgrid = -1;
    double h = 0, xd = 0, xdp = 0, td0 = 0;
    double dp = 0, di = 0, tg = 0;
    double ka = 0, ta = 0, ke = 0, te = 0, kf = 0, tf = 0;
    double p_max = 0, s_max = 0;
    double p_set = 0, q_set = 0;
    bool slack = false;
    double v_ref = 0.0;
    double efd_max = std::numeric_limits<double>::infinity();
};

/// Grid-following AC converter (wind) with inner current loops.
struct AcIbr {
    std::string id;
    int bus = -1;
    int subgrid = -1;
    double l = 0, kp = 0, ki = 0, dv = 0;
    double cap = 0, s_max = 0, alpha = 0;
    double p_ref = 0, q_ref = 0;
};

/// DC-side converter source (solar): power injection capped by availability.
struct DcIbr {
    std::string id;
    int bus = -1;
    double cap = 0, alpha = 0;
    double p_ref = 0;
};

struct Line {
    int from = -1, to = -1;
    int subgrid = -1;
    bool ac = true;
    double r = 0, x0 = 0;
    double s_max = 0;
};

struct IcUnit {
    int ac_bus = -1, dc_bus = -1;
    int ac_subgrid = -1;
    double s_max = 0, gamma_p = 0, gamma_q = 0;
    double omega_lo = 0, omega_hi = 0, v_lo = 0, v_hi = 0;
    double q0 = 0;
};

} // namespace dyn

/// Event-resolved constants for one evaluation instant.
struct StepContext {
    Eigen::VectorXd load_scale;       // per global bus
    std::vector<double> ibr_alpha;    // effective availability per AC IBR
    std::vector<double> pv_alpha;     // effective availability per DC IBR
    bool tie_on = true;
    bool ic_on = true;
};

/// Compiled network + device model. Owns the state layout and evaluates the
/// implicit-step and steady-state residuals with analytic Jacobians. The same
/// arrays drive the steady power-flow equations (see powerflow.hpp).
///
/// State layout:
///   per machine   [delta, d_omega, e_q_prime, e_fd, e_r, p_m, z_gov, w_avr]
///   per AC IBR    [i_d, i_q, pi_d, pi_q]
///   AC buses      [theta...], [v...]
///   DC buses      [v_dc...]
///   converter     [p_ic, q_ic] when present
class DynModel {
public:
    DynModel(const HmgSystem& sys, const DispatchSetpoints& dispatch);

    /// Re-points setpoints (dispatch, availability, loads) at another slot or
    /// candidate dispatch without re-deriving topology.
    void set_dispatch(const DispatchSetpoints& dispatch);

    int state_size() const { return n_state_; }
    int pf_size() const { return n_pf_; }
    int n_machines() const { return static_cast<int>(machines_.size()); }
    int n_ac_ibr() const { return static_cast<int>(ac_ibrs_.size()); }
    int n_ac_bus() const { return n_ac_; }
    int n_dc_bus() const { return n_dc_; }
    int n_ac_subgrids() const { return static_cast<int>(subgrid_machines_.size()); }
    bool has_ic() const { return static_cast<bool>(ic_); }
    const HmgSystem& system() const { return *sys_; }
    const DispatchSetpoints& dispatch() const { return dispatch_; }

    // State indices.
    int idx_mach(int m, int field) const { return 8 * m + field; }
    int idx_ibr(int r, int field) const { return 8 * n_machines() + 4 * r + field; }
    int idx_theta(int ac) const { return alg_off_ + ac; }
    int idx_v(int ac) const { return alg_off_ + n_ac_ + ac; }
    int idx_vdc(int dc) const { return alg_off_ + 2 * n_ac_ + dc; }
    int idx_pic() const { return alg_off_ + 2 * n_ac_ + n_dc_; }
    int idx_qic() const { return idx_pic() + 1; }
    /// AC ordinal of a global bus index, -1 if the bus is DC.
    int ac_ordinal(int bus) const { return ac_index_[bus]; }
    int dc_ordinal(int bus) const { return dc_index_[bus]; }
    std::string var_name(int i) const;

    const std::vector<dyn::Machine>& machines() const { return machines_; }
    const std::vector<dyn::AcIbr>& ac_ibrs() const { return ac_ibrs_; }
    const std::vector<dyn::DcIbr>& dc_ibrs() const { return dc_ibrs_; }
    const std::vector<dyn::Line>& lines() const { return lines_; }

    /// Resolves the event set at time t into per-step constants.
    StepContext context(const EventSet& events, double t) const;
    StepContext base_context() const { return context({}, -1.0); }

    /// Implicit backward-Euler step residual r(x_next) = x_next - x_prev - h f
    /// on differential rows, device/network balance on algebraic rows. With
    /// x_prev == nullptr evaluates the steady-state residual instead (f = 0 on
    /// differential rows, slack-machine angle rows replaced by the gauge
    /// theta = gauge_theta). smooth_ic replaces the converter reactive-branch
    /// switch with a sigmoid blend for optimization use.
    void eval(const Eigen::VectorXd& x_next, const Eigen::VectorXd* x_prev, double h,
              const StepContext& cx, bool smooth_ic, Eigen::VectorXd* r,
              Eigen::MatrixXd* jac) const;

    /// Steady power-flow residual over the reduced unknown vector
    /// [theta, v, v_dc, (delta, e_q') per machine, p_ic, q_ic]; dispatch
    /// targets on non-slack machines, gauge + voltage rows on slack machines.
    void pf_eval(const Eigen::VectorXd& xpf, const StepContext& cx, Eigen::VectorXd* r,
                 Eigen::MatrixXd* jac) const;
    Eigen::VectorXd pf_flat_start() const;

    // Readers on a full state vector.
    double delta(const Eigen::VectorXd& x, int m) const { return x[idx_mach(m, 0)]; }
    double d_omega(const Eigen::VectorXd& x, int m) const { return x[idx_mach(m, 1)]; }
    double e_q_prime(const Eigen::VectorXd& x, int m) const { return x[idx_mach(m, 2)]; }
    double e_fd(const Eigen::VectorXd& x, int m) const { return x[idx_mach(m, 3)]; }
    double p_m(const Eigen::VectorXd& x, int m) const { return x[idx_mach(m, 5)]; }
    double theta(const Eigen::VectorXd& x, int ac) const { return x[idx_theta(ac)]; }
    double v_ac(const Eigen::VectorXd& x, int ac) const { return x[idx_v(ac)]; }
    double v_dc(const Eigen::VectorXd& x, int dc) const { return x[idx_vdc(dc)]; }
    double p_ic(const Eigen::VectorXd& x) const { return ic_ ? x[idx_pic()] : 0.0; }
    double q_ic(const Eigen::VectorXd& x) const { return ic_ ? x[idx_qic()] : 0.0; }
    /// Air-gap power of machine m at state x, p.u.
    double electrical_power(const Eigen::VectorXd& x, int m) const;
    /// COI speed of an AC subgrid in rad/s.
    double coi_speed(const Eigen::VectorXd& x, int subgrid) const;
    double coi_frequency_hz(const Eigen::VectorXd& x, int subgrid) const;
    /// From-side apparent flow of an AC line, p.u.
    double ac_line_flow(const Eigen::VectorXd& x, int line) const;
    /// Net power absorbed by the network at every bus, p.u., at nominal
    /// speed: p/q per AC ordinal and p per DC ordinal. At a converged power
    /// flow these equal the bus injections.
    void network_injections(const Eigen::VectorXd& theta, const Eigen::VectorXd& v_ac,
                            const Eigen::VectorXd& v_dc, Eigen::VectorXd& p_ac,
                            Eigen::VectorXd& q_ac, Eigen::VectorXd& p_dc) const;

    /// Gauge angles (one per AC subgrid) pinning the steady problem.
    void set_gauge(const std::vector<double>& theta) { gauge_theta_ = theta; }
    /// Equilibrium-derived regulator reference and field ceiling.
    void set_machine_refs(int m, double v_ref, double efd_max) {
        machines_[m].v_ref = v_ref;
        machines_[m].efd_max = efd_max;
    }
    int slack_machine(int subgrid) const { return slack_machine_[subgrid]; }
    int machine_subgrid(int m) const { return machines_[m].subgrid; }

private:
    void compile(const HmgSystem& sys);

    const HmgSystem* sys_ = nullptr;
    DispatchSetpoints dispatch_;
    double base_ = 0, omega0_ = 0;

    std::vector<dyn::Machine> machines_;
    std::vector<dyn::AcIbr> ac_ibrs_;
    std::vector<dyn::DcIbr> dc_ibrs_;
    std::vector<dyn::Line> lines_;
    std::optional<dyn::IcUnit> ic_;

    int n_ac_ = 0, n_dc_ = 0, n_state_ = 0, n_pf_ = 0, alg_off_ = 0;
    std::vector<int> ac_index_, dc_index_;       // global bus -> ordinal or -1
    std::vector<int> ac_bus_of_, dc_bus_of_;     // ordinal -> global bus
    std::vector<std::string> subgrid_names_;     // AC subgrid ordinal -> name
    std::vector<int> bus_subgrid_;               // global bus -> AC subgrid ordinal or -1
    std::vector<std::vector<int>> subgrid_machines_;
    std::vector<double> subgrid_h_;              // total inertia per AC subgrid
    std::vector<int> slack_machine_;             // per AC subgrid
    std::vector<double> gauge_theta_;

    // Static per-slot injections (loads handled separately for scaling).
    Eigen::VectorXd load_p_, load_q_;            // per global bus, p.u. consumption
    Eigen::VectorXd stat_p_, stat_q_;            // storage, dc machines: per global bus
    int tie_bus_ = -1;
    double tie_p_ = 0, tie_q_ = 0;

    Eigen::MatrixXd g_dc_;                       // DC conductance Laplacian

    friend struct DynModelTestAccess;
};

/// Convenience wrappers that compile a model per call, solving the slot's
/// power flow first so regulator references exist. Prefer holding a DynModel
/// when evaluating repeatedly.
Eigen::VectorXd residual(const DynamicState& next, const DynamicState& prev, double h,
                         const HmgSystem& sys, const EventSet& events,
                         const DispatchSetpoints& dispatch);
Eigen::VectorXd steady_residual(const DynamicState& s, const HmgSystem& sys,
                                const EventSet& events, const DispatchSetpoints& dispatch);

} // namespace hmg
