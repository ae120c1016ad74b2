#pragma once

#include <string>
#include <utility>
#include <vector>

#include "hmg/dispatch.hpp"
#include "hmg/dynamics.hpp"
#include "hmg/events.hpp"
#include "hmg/netmodel.hpp"

namespace hmg {

/// Uniform-step implicit trajectory. A run that loses Newton convergence is
/// kept as a first-class result: `stable` drops, the recorded samples stop
/// at the last accepted state, and the failing step is reported. The
/// dispatch that produced the run rides along so downstream consumers can
/// rebuild the model with the right operating context.
struct Trajectory {
    std::vector<double> times;        // s, strictly increasing, uniform step
    std::vector<DynamicState> states; // states[k].t == times[k]
    EventSet events_applied;
    DispatchSetpoints dispatch;
    double h = 0.0;
    bool stable = true;
    int diverged_step = -1;
    double diverged_residual = 0.0;
};

struct Violation {
    std::string limit; // "f_min", "f_max", "rocof", "v_min", "v_max"
    double time_s = 0.0;
    double value = 0.0;
};

struct TrajectoryMetrics {
    double f_nadir = 0.0;   // Hz
    double f_peak = 0.0;    // Hz
    double rocof_max = 0.0; // Hz/s, sliding-window slope
    double dv_max_ac = 0.0; // p.u. deviation from nominal
    double dv_max_dc = 0.0;
    double df_max = 0.0;    // Hz deviation from nominal
    bool stable = true;
    std::vector<Violation> violations; // worst excursion per violated limit
};

/// Integrates the closed-loop model from its pre-event equilibrium at t0 to
/// `horizon` with backward Euler steps of h, applying `events` as step
/// changes. Each step solves the implicit residual to infinity-norm 1e-8
/// with the previous state as the initial guess.
Trajectory run(const HmgSystem& sys, const DispatchSetpoints& setpoints, const EventSet& events,
               double horizon_s, double h_s, double t0_s = 0.0);

/// [t_start, t_end] covering every event plus `pad_s` of settle time on
/// each side, clamped at zero. Empty sets get [0, pad_s].
std::pair<double, double> event_window(const EventSet& events, double pad_s = 30.0);

/// run() over event_window(): the cheap fitness probe used in planning
/// loops, exact because the system sits at equilibrium before the first
/// event starts.
Trajectory run_windowed(const HmgSystem& sys, const DispatchSetpoints& setpoints,
                        const EventSet& events, double h_s, double pad_s = 30.0);

/// Stability metrics of a recorded trajectory. Frequency is the per-subgrid
/// inertia-weighted mean (exactly coi_frequency applied to each sample);
/// RoCoF is the steepest frequency change over a sliding window.
TrajectoryMetrics metrics(const Trajectory& traj, const HmgSystem& sys,
                          double rocof_window_s = 0.5);

/// Attacker objective: df_max + alpha * max(dv_ac, dv_dc); an unstable run
/// ranks above every stable one (+infinity).
double attack_deviation(const TrajectoryMetrics& m, double alpha = 10.0);

} // namespace hmg
