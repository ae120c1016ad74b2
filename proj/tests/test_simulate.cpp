#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <limits>

#include "hmg/common.hpp"
#include "hmg/dynamics.hpp"
#include "hmg/netmodel.hpp"
#include "hmg/powerflow.hpp"
#include "hmg/simulate.hpp"
#include "toys.hpp"

using namespace hmg;
using hmg::testing::empty_dispatch;
using hmg::testing::two_bus;
using Eigen::VectorXd;

namespace {

HmgSystem bundled() { return load_system(std::string(HMG_DATA_DIR) + "/hmg9.json"); }

DispatchSetpoints noon_dispatch() {
    DispatchSetpoints d;
    d.day = 0;
    d.slot = 12;
    d.p_dg = {{"dg2", 0.15}, {"dg_dc", 0.05}};
    d.q_dg = {{"dg2", 0.05}};
    d.p_ibr = {{"wt1", 0.20}, {"pv1", 0.30}};
    d.q_ibr = {{"wt1", 0.02}};
    return d;
}

Contingency load_step_on(const std::string& bus, double mag, double start, double dur) {
    Contingency c;
    c.kind = ContingencyKind::load_step;
    c.location = bus;
    c.magnitude = mag;
    c.start_s = start;
    c.duration_s = dur;
    return c;
}

/// Frequency ramp trajectory assembled by hand: every sample is the toy's
/// equilibrium layout with the machine speed forced to produce f(t).
Trajectory synthetic_ramp(const HmgSystem& sys, const DispatchSetpoints& d, double slope_hz,
                          double h, double t_end) {
    DynModel model(sys, d);
    Trajectory traj;
    traj.dispatch = d;
    traj.h = h;
    VectorXd base = VectorXd::Zero(model.state_size());
    for (int j = 0; j < model.n_ac_bus(); ++j) base[model.idx_v(j)] = 1.0;
    base[model.idx_mach(0, 2)] = 1.0;
    for (int k = 0;; ++k) {
        const double t = k * h;
        if (t > t_end + 1e-12) break;
        const double f = sys.f_hz - slope_hz * std::min(t, 1.0);
        VectorXd x = base;
        x[model.idx_mach(0, 1)] = 2.0 * pi * (f - sys.f_hz);
        traj.times.push_back(t);
        traj.states.push_back({x, t});
    }
    return traj;
}

} // namespace

TEST_CASE("an undisturbed run holds its equilibrium bit-exactly") {
    HmgSystem sys = bundled();
    Trajectory traj = run(sys, noon_dispatch(), {}, 60.0, 0.02);
    REQUIRE(traj.stable);
    CHECK(traj.times.size() == 3001);
    CHECK(traj.times.back() == doctest::Approx(60.0));

    DynModel model(sys, traj.dispatch);
    double worst = 0.0;
    for (const auto& s : traj.states)
        worst = std::max(worst, std::abs(model.coi_frequency_hz(s.x, 0) - 50.0));
    CHECK(worst <= 1e-6);
    CHECK((traj.states.back().x - traj.states.front().x).lpNorm<Eigen::Infinity>() == 0.0);
}

TEST_CASE("PI governors pull a stepped load back to nominal frequency") {
    HmgSystem sys = two_bus(50.0, 10.0);
    DispatchSetpoints d = empty_dispatch();
    EventSet events{load_step_on("b2", 0.2, 5.0, 100.0)};
    Trajectory traj = run(sys, d, events, 45.0, 0.02);
    REQUIRE(traj.stable);

    DynModel model(sys, d);
    // Independently solved operating point with the stepped load held on.
    SteadyState post = solve_hybrid_pf(model, model.context(events, 10.0));

    const VectorXd& xe = traj.states.back().x;
    CHECK(std::abs(model.coi_frequency_hz(xe, 0) - 50.0) <= 1e-3);
    CHECK(std::abs(model.v_ac(xe, 1) - post.v_ac[1]) <= 1e-3);
    CHECK(std::abs(model.electrical_power(xe, 0) - post.p_mach[0]) <= 1e-3);

    // The frequency genuinely dips before integral action recovers it.
    double nadir = 50.0;
    for (const auto& s : traj.states)
        nadir = std::min(nadir, model.coi_frequency_hz(s.x, 0));
    CHECK(nadir < 49.99);
}

TEST_CASE("halving the step halves the global error against a fine reference") {
    HmgSystem sys = bundled();
    DispatchSetpoints d = noon_dispatch();
    EventSet events{load_step_on("b2", 0.3, 0.96, 100.0)};
    const double t_end = 6.0;

    auto freq_series = [&](double h) {
        Trajectory traj = run(sys, d, events, t_end, h);
        REQUIRE(traj.stable);
        DynModel model(sys, d);
        std::vector<double> f(traj.states.size());
        for (size_t k = 0; k < traj.states.size(); ++k)
            f[k] = model.coi_frequency_hz(traj.states[k].x, 0);
        return f;
    };

    const double h_ref = 0.02 / 16.0;
    std::vector<double> ref = freq_series(h_ref);
    auto global_err = [&](double h) {
        std::vector<double> f = freq_series(h);
        const int stride = static_cast<int>(std::llround(h / h_ref));
        double err = 0.0;
        for (size_t k = 0; k < f.size(); ++k)
            err = std::max(err, std::abs(f[k] - ref[k * stride]));
        return err;
    };

    const double e8 = global_err(0.08), e4 = global_err(0.04), e2 = global_err(0.02);
    CAPTURE(e8);
    CAPTURE(e4);
    CAPTURE(e2);
    CHECK(e8 / e4 >= 1.7);
    CHECK(e8 / e4 <= 2.3);
    CHECK(e4 / e2 >= 1.7);
    CHECK(e4 / e2 <= 2.3);
}

TEST_CASE("identical inputs reproduce the trajectory bit for bit") {
    HmgSystem sys = two_bus(50.0, 10.0);
    EventSet events{load_step_on("b2", 0.2, 1.0, 5.0)};
    Trajectory a = run(sys, empty_dispatch(), events, 10.0, 0.02);
    Trajectory b = run(sys, empty_dispatch(), events, 10.0, 0.02);
    REQUIRE(a.states.size() == b.states.size());
    double worst = 0.0;
    for (size_t k = 0; k < a.states.size(); ++k)
        worst = std::max(worst, (a.states[k].x - b.states[k].x).lpNorm<Eigen::Infinity>());
    CHECK(worst == 0.0);
}

TEST_CASE("a zero-magnitude event leaves the trajectory untouched") {
    HmgSystem sys = two_bus(50.0, 10.0);
    Trajectory base = run(sys, empty_dispatch(), {}, 10.0, 0.02);
    Trajectory nul =
        run(sys, empty_dispatch(), {load_step_on("b2", 0.0, 1.0, 5.0)}, 10.0, 0.02);
    REQUIRE(base.states.size() == nul.states.size());
    double worst = 0.0;
    for (size_t k = 0; k < base.states.size(); ++k)
        worst = std::max(worst, (base.states[k].x - nul.states[k].x).lpNorm<Eigen::Infinity>());
    CHECK(worst == 0.0);
}

TEST_CASE("differential states stay continuous across an event boundary") {
    // Continuity shows up as the onset step change shrinking with h for the
    // integrated states while the forced algebraic voltage jump does not.
    HmgSystem sys = two_bus(50.0, 10.0);
    DispatchSetpoints d = empty_dispatch();
    EventSet events{load_step_on("b2", 0.2, 1.0, 50.0)};
    DynModel model(sys, d);

    auto onset_jump = [&](double h, int idx) {
        Trajectory traj = run(sys, d, events, 3.0, h);
        REQUIRE(traj.stable);
        const int on = static_cast<int>(std::llround(1.0 / h)) + 1;
        return std::abs(traj.states[on].x[idx] - traj.states[on - 1].x[idx]);
    };

    for (int field : {0, 5, 6}) { // rotor angle, mechanical power, governor state
        const int idx = model.idx_mach(0, field);
        const double coarse = onset_jump(0.02, idx), fine = onset_jump(0.01, idx);
        CAPTURE(field);
        CHECK(coarse / std::max(fine, 1e-300) > 1.5);
    }
    const int iv = model.idx_v(1);
    const double coarse = onset_jump(0.02, iv), fine = onset_jump(0.01, iv);
    CHECK(coarse > 1e-3);
    CHECK(coarse / fine < 1.3);
}

TEST_CASE("losing Newton convergence marks the run unstable instead of throwing") {
    HmgSystem sys = two_bus(50.0, 10.0);
    EventSet events{load_step_on("b2", 50.0, 1.0, 10.0)};
    Trajectory traj = run(sys, empty_dispatch(), events, 10.0, 0.02);
    CHECK_FALSE(traj.stable);
    CHECK(traj.diverged_step >= 0);
    CHECK(traj.diverged_residual > 1e-8);
    CHECK(traj.times.back() <= 1.02 + 1e-12);

    TrajectoryMetrics m = metrics(traj, sys);
    CHECK_FALSE(m.stable);
    CHECK(attack_deviation(m) == std::numeric_limits<double>::infinity());
}

TEST_CASE("metrics of a synthetic frequency ramp") {
    HmgSystem sys = two_bus(0.0, 0.0);
    DispatchSetpoints d = empty_dispatch();

    SUBCASE("flat trace") {
        Trajectory traj = synthetic_ramp(sys, d, 0.0, 0.1, 2.0);
        TrajectoryMetrics m = metrics(traj, sys);
        CHECK(m.f_nadir == doctest::Approx(50.0));
        CHECK(m.f_peak == doctest::Approx(50.0));
        CHECK(m.rocof_max == doctest::Approx(0.0));
        CHECK(m.dv_max_ac == doctest::Approx(0.0));
        CHECK(m.violations.empty());
    }
    SUBCASE("gentle ramp stays legal") {
        Trajectory traj = synthetic_ramp(sys, d, 0.5, 0.1, 2.0);
        TrajectoryMetrics m = metrics(traj, sys);
        CHECK(m.f_nadir == doctest::Approx(49.5));
        CHECK(m.f_peak == doctest::Approx(50.0));
        CHECK(m.df_max == doctest::Approx(0.5));
        CHECK(m.rocof_max == doctest::Approx(0.5));
        CHECK(m.violations.empty());
    }
    SUBCASE("steep ramp reports the limits it breaks") {
        Trajectory traj = synthetic_ramp(sys, d, 1.5, 0.1, 2.0);
        TrajectoryMetrics m = metrics(traj, sys);
        CHECK(m.f_nadir == doctest::Approx(48.5));
        CHECK(m.rocof_max == doctest::Approx(1.5));
        REQUIRE(m.violations.size() == 2);
        for (const auto& v : m.violations) {
            if (v.limit == "f_min") {
                CHECK(v.value < sys.limits.f_min_hz);
                CHECK(v.value == doctest::Approx(48.5));
            } else {
                CHECK(v.limit == "rocof");
                CHECK(std::abs(v.value) > sys.limits.rocof_hz_s);
            }
        }
    }
}

TEST_CASE("metric extrema equal the pointwise frequency series") {
    HmgSystem sys = two_bus(50.0, 10.0);
    DispatchSetpoints d = empty_dispatch();
    Trajectory traj = run(sys, d, {load_step_on("b2", 0.2, 1.0, 100.0)}, 15.0, 0.02);
    TrajectoryMetrics m = metrics(traj, sys);

    DynModel model(sys, d);
    double lo = std::numeric_limits<double>::infinity(), hi = -lo, df = 0.0;
    for (const auto& s : traj.states) {
        const double f = model.coi_frequency_hz(s.x, 0);
        lo = std::min(lo, f);
        hi = std::max(hi, f);
        df = std::max(df, std::abs(f - 50.0));
    }
    CHECK(m.f_nadir == lo);
    CHECK(m.f_peak == hi);
    CHECK(m.df_max == df);
    CHECK(m.f_nadir <= m.f_peak);
}

TEST_CASE("attack deviation weighs frequency and voltage exactly as specified") {
    TrajectoryMetrics m;
    m.df_max = 0.8;
    m.dv_max_ac = 0.05;
    m.dv_max_dc = 0.01;
    CHECK(attack_deviation(m, 10.0) == doctest::Approx(1.3));
    CHECK(attack_deviation(m, 0.0) == doctest::Approx(0.8));

    TrajectoryMetrics zero;
    CHECK(attack_deviation(zero, 10.0) == 0.0);

    m.dv_max_dc = 0.2;
    CHECK(attack_deviation(m, 10.0) == doctest::Approx(0.8 + 2.0));
    CHECK_THROWS_AS(attack_deviation(m, -1.0), ValidationError);
}

TEST_CASE("event windows bracket the disturbance with settle margin") {
    EventSet events{load_step_on("b2", 0.2, 300.0, 84.0),
                    load_step_on("b3", 0.1, 310.0, 120.0)};
    auto [t0, t1] = event_window(events, 30.0);
    CHECK(t0 == doctest::Approx(270.0));
    CHECK(t1 == doctest::Approx(460.0));

    auto [a, b] = event_window({}, 30.0);
    CHECK(a == 0.0);
    CHECK(b == 30.0);

    auto [c, e] = event_window({load_step_on("b2", 0.2, 10.0, 5.0)}, 30.0);
    CHECK(c == 0.0);
    CHECK(e == doctest::Approx(45.0));

    HmgSystem sys = two_bus(50.0, 10.0);
    Trajectory traj =
        run_windowed(sys, empty_dispatch(), {load_step_on("b2", 0.2, 100.0, 5.0)}, 0.02, 30.0);
    CHECK(traj.times.front() == doctest::Approx(70.0));
    CHECK(traj.times.back() == doctest::Approx(135.0));
    CHECK(traj.stable);
}

TEST_CASE("degenerate step sizes are rejected") {
    HmgSystem sys = two_bus(10.0, 0.0);
    CHECK_THROWS_AS(run(sys, empty_dispatch(), {}, 10.0, 0.0), ValidationError);
    CHECK_THROWS_AS(run(sys, empty_dispatch(), {}, 10.0, -0.1), ValidationError);
    CHECK_THROWS_AS(run(sys, empty_dispatch(), {}, 0.01, 0.02), ValidationError);
}
