#include "hmg/simulate.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>

#include "hmg/common.hpp"
#include "hmg/powerflow.hpp"
#include "hmg/solvers.hpp"

namespace hmg {

using Eigen::MatrixXd;
using Eigen::VectorXd;

Trajectory run(const HmgSystem& sys, const DispatchSetpoints& setpoints, const EventSet& events,
               double horizon_s, double h_s, double t0_s) {
    if (h_s <= 0.0) throw ValidationError("step size must be positive");
    if (horizon_s < t0_s + h_s)
        throw ValidationError("horizon must cover at least one step past the start time");

    DynModel model(sys, setpoints);
    SteadyState ss = solve_hybrid_pf(model, model.base_context());
    DynamicState eq = init_dynamic_state(model, ss);

    Trajectory traj;
    traj.events_applied = events;
    traj.dispatch = setpoints;
    traj.h = h_s;

    const int steps = static_cast<int>(std::llround((horizon_s - t0_s) / h_s));
    traj.times.reserve(steps + 1);
    traj.states.reserve(steps + 1);
    traj.times.push_back(t0_s);
    traj.states.push_back({eq.x, t0_s});

    VectorXd x = eq.x;
    NewtonOptions opt;
    opt.tol = 1e-8;
    opt.max_iter = 50;
    for (int k = 0; k < steps; ++k) {
        const double t_next = t0_s + (k + 1) * h_s;
        const StepContext cx = model.context(events, t_next);
        VectorXd x_prev = x;
        auto fn = [&](const VectorXd& p, VectorXd* r, MatrixXd* J) {
            model.eval(p, &x_prev, h_s, cx, false, r, J);
        };
        NewtonReport rep = newton_solve(fn, x, opt);
        if (!rep.converged) {
            traj.stable = false;
            traj.diverged_step = k;
            traj.diverged_residual = rep.residual_norm;
            break;
        }
        traj.times.push_back(t_next);
        traj.states.push_back({x, t_next});
    }
    return traj;
}

std::pair<double, double> event_window(const EventSet& events, double pad_s) {
    if (events.empty()) return {0.0, pad_s};
    double first = std::numeric_limits<double>::infinity();
    double last = 0.0;
    for (const auto& e : events) {
        first = std::min(first, e.start_s);
        last = std::max(last, e.end_s());
    }
    return {std::max(0.0, first - pad_s), last + pad_s};
}

Trajectory run_windowed(const HmgSystem& sys, const DispatchSetpoints& setpoints,
                        const EventSet& events, double h_s, double pad_s) {
    auto [t0, t1] = event_window(events, pad_s);
    return run(sys, setpoints, events, t1, h_s, t0);
}

TrajectoryMetrics metrics(const Trajectory& traj, const HmgSystem& sys, double rocof_window_s) {
    if (traj.states.empty()) throw ValidationError("cannot compute metrics of an empty trajectory");

    DynModel model(sys, traj.dispatch);
    const int K = static_cast<int>(traj.states.size());
    const int S = model.n_ac_subgrids();
    const double f0 = sys.f_hz;

    TrajectoryMetrics m;
    m.stable = traj.stable;
    m.f_nadir = std::numeric_limits<double>::infinity();
    m.f_peak = -std::numeric_limits<double>::infinity();

    struct Worst {
        double gap = 0.0; // amount beyond the limit
        double time = 0.0;
        double value = 0.0;
    };
    std::map<std::string, Worst> worst;
    auto note = [&](const std::string& limit, double gap, double t, double value) {
        // Feasibility-tolerance slack: an active limit ridden exactly by an
        // optimal dispatch should not flag on round-off.
        if (gap <= 1e-6) return;
        Worst& w = worst[limit];
        if (gap > w.gap) w = {gap, t, value};
    };

    Eigen::MatrixXd f(S, K);
    for (int k = 0; k < K; ++k) {
        const VectorXd& x = traj.states[k].x;
        const double t = traj.times[k];
        for (int s = 0; s < S; ++s) {
            const double fs = model.coi_frequency_hz(x, s);
            f(s, k) = fs;
            m.f_nadir = std::min(m.f_nadir, fs);
            m.f_peak = std::max(m.f_peak, fs);
            m.df_max = std::max(m.df_max, std::abs(fs - f0));
            note("f_min", sys.limits.f_min_hz - fs, t, fs);
            note("f_max", fs - sys.limits.f_max_hz, t, fs);
        }
        for (int j = 0; j < model.n_ac_bus(); ++j) {
            const double v = model.v_ac(x, j);
            m.dv_max_ac = std::max(m.dv_max_ac, std::abs(v - 1.0));
            note("v_min", sys.limits.v_min - v, t, v);
            note("v_max", v - sys.limits.v_max, t, v);
        }
        for (int j = 0; j < model.n_dc_bus(); ++j) {
            const double v = model.v_dc(x, j);
            m.dv_max_dc = std::max(m.dv_max_dc, std::abs(v - 1.0));
            note("v_min", sys.limits.v_min - v, t, v);
            note("v_max", v - sys.limits.v_max, t, v);
        }
    }

    if (K >= 2) {
        const double h = traj.times[1] - traj.times[0];
        const int mw = std::max(1, static_cast<int>(std::floor(rocof_window_s / h + 1e-9)));
        for (int s = 0; s < S; ++s)
            for (int k = 0; k + mw < K; ++k) {
                const double slope = (f(s, k + mw) - f(s, k)) / (mw * h);
                m.rocof_max = std::max(m.rocof_max, std::abs(slope));
                note("rocof", std::abs(slope) - sys.limits.rocof_hz_s, traj.times[k + mw],
                     slope);
            }
    }

    for (const auto& [limit, w] : worst) m.violations.push_back({limit, w.time, w.value});
    return m;
}

double attack_deviation(const TrajectoryMetrics& m, double alpha) {
    if (alpha < 0.0) throw ValidationError("deviation weighting must be non-negative");
    if (!m.stable) return std::numeric_limits<double>::infinity();
    return m.df_max + alpha * std::max(m.dv_max_ac, m.dv_max_dc);
}

} // namespace hmg
