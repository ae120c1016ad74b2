#pragma once

#include <string>
#include <vector>

#include "hmg/lyapunov.hpp"
#include "hmg/powerflow.hpp"
#include "hmg/simulate.hpp"

namespace hmg {

/// One packed decision variable of the hourly dispatch problem.
struct StaticVar {
    std::string name; // "<asset>.<field>", e.g. "dg2.p", "es1.u"
    double lo = 0.0;
    double hi = 0.0;
};

/// Descriptor of one slot's stability-constrained dispatch problem. The
/// decision vector is the static dispatch; every trajectory sample of the
/// discretized transient window rides along as equality-eliminated state
/// (the step residuals are solved exactly during evaluation), so the
/// nominal variable count below includes n_steps copies of the dynamic
/// state on top of the statics.
struct NlpInstance {
    const HmgSystem* sys = nullptr;
    int day = 0;
    int slot = 0;
    QueueState queue;
    double v_weight = 100.0;
    EventSet events;
    double window_s = 60.0;
    double h_s = 0.5;
    double t0_s = 0.0; // window start on the simulation clock

    std::vector<StaticVar> statics;
    int n_state = 0;                        // dynamic state dimension
    std::string objective;                  // human-readable description
    std::string equalities;                 // ditto; count via n_equalities()
    std::vector<std::string> inequalities;  // one entry per scalar inequality

    int n_steps() const { return static_cast<int>(window_s / h_s + 0.5); }
    int n_static() const { return static_cast<int>(statics.size()); }
    int n_vars() const { return n_static() + n_steps() * n_state; }
    /// Power-flow equations at the window start plus one implicit-step
    /// residual block per trajectory step.
    int n_equalities() const { return (1 + n_steps()) * n_state; }
};

/// Convergence report of one dispatch solve. `stationarity` is the
/// projected-gradient infinity norm of the working objective scaled by
/// 1 / (1 + |objective|); `eq_residual` is the worst implicit-step or
/// power-flow residual along the returned trajectory.
struct SolveReport {
    bool converged = false;
    bool infeasible = false; // no stable operating point found at all
    double objective = 0.0;  // drift term + v_weight * operating cost
    double queue_term = 0.0;
    double f_op = 0.0;       // realized operating cost, currency
    double eq_residual = 0.0;
    double ineq_violation = 0.0;
    double stationarity = 0.0;
    int outer_iters = 0;
    int evaluations = 0;
    std::vector<std::string> log;
};

struct NlpSolution {
    DispatchSetpoints setpoints;
    Trajectory trajectory; // coarse-step window trajectory; empty when no events
    SolveReport report;
};

/// Assembles the slot's problem: drift-plus-penalty objective, static
/// device and network limits, and (when events are present) frequency and
/// voltage path limits at every sample of the transient window. Events must
/// fall inside [t0, t0 + window_s]; t0 is placed shortly before the first
/// event. Throws ValidationError on window/step inconsistency and
/// InfeasibleError when the system has no machines.
NlpInstance build_nlp(const HmgSystem& sys, int day, int slot, const QueueState& queue,
                      double v_weight, const EventSet& events, double window_s = 60.0,
                      double h_s = 0.5);

/// Solves the instance to the documented tolerances (equality residual
/// 1e-6, inequality violation 1e-6, scaled stationarity 1e-4). Without a
/// warm start the solver bootstraps itself: static solve from a merit-order
/// point, then the transient window constraints are activated, retrying
/// from a renewable-curtailment ladder if the first trajectory diverges.
/// Failure to find any stable point marks the report infeasible; a point
/// that is stable but misses the tolerances only clears `converged`.
NlpSolution solve_nlp(const NlpInstance& nlp);
NlpSolution solve_nlp(const NlpInstance& nlp, const DispatchSetpoints& warm_start);

/// Authoritative stability check: re-simulates the setpoints with the
/// production integrator at a finer step (default h/4 of the dispatch
/// problem's grid) over the padded event window and returns the metrics.
TrajectoryMetrics verify_dispatch(const HmgSystem& sys, const DispatchSetpoints& setpoints,
                                  const EventSet& events, double h_s = 0.125);

/// Realized operating cost of one slot in currency: fuel cost of every
/// machine at its realized output (slack machines included) times the slot
/// length.
double operating_cost(const HmgSystem& sys, const DispatchSetpoints& setpoints,
                      const SteadyState& ss);

} // namespace hmg
