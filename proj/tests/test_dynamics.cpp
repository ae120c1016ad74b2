#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "hmg/common.hpp"
#include "hmg/dynamics.hpp"
#include "hmg/netmodel.hpp"
#include "hmg/powerflow.hpp"
#include "hmg/solvers.hpp"

using namespace hmg;
using Eigen::MatrixXd;
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

template <typename F>
MatrixXd fd_jacobian(F f, const VectorXd& x) {
    const VectorXd r0 = f(x);
    MatrixXd J(r0.size(), x.size());
    for (int i = 0; i < x.size(); ++i) {
        const double e = 1e-7 * std::max(1.0, std::abs(x[i]));
        VectorXd xp = x, xm = x;
        xp[i] += e;
        xm[i] -= e;
        J.col(i) = (f(xp) - f(xm)) / (2.0 * e);
    }
    return J;
}

double max_rel_err(const MatrixXd& a, const MatrixXd& b) {
    double worst = 0;
    for (int r = 0; r < a.rows(); ++r)
        for (int c = 0; c < a.cols(); ++c) {
            const double err = std::abs(a(r, c) - b(r, c)) /
                               std::max({1.0, std::abs(a(r, c)), std::abs(b(r, c))});
            worst = std::max(worst, err);
        }
    return worst;
}

/// Perturbs an equilibrium into a generic transient point that keeps every
/// switching rule (limiters, converter branches) away from its boundary.
VectorXd perturbed_state(const DynModel& m, const VectorXd& x0) {
    VectorXd x = x0;
    for (int g = 0; g < m.n_machines(); ++g) {
        x[m.idx_mach(g, 0)] += 0.04 + 0.01 * g;
        x[m.idx_mach(g, 1)] += 0.40 - 0.25 * g;
        x[m.idx_mach(g, 2)] += 0.02;
        x[m.idx_mach(g, 3)] -= 0.03;
        x[m.idx_mach(g, 4)] += 0.05;
        x[m.idx_mach(g, 5)] += 0.04;
        x[m.idx_mach(g, 6)] += 0.03;
        x[m.idx_mach(g, 7)] -= 0.02;
    }
    for (int u = 0; u < m.n_ac_ibr(); ++u) {
        x[m.idx_ibr(u, 0)] += 0.03;
        x[m.idx_ibr(u, 1)] -= 0.02;
        x[m.idx_ibr(u, 2)] += 0.01;
        x[m.idx_ibr(u, 3)] -= 0.01;
    }
    for (int i = 0; i < m.n_ac_bus(); ++i) {
        x[m.idx_theta(i)] += 0.01 * (i + 1);
        x[m.idx_v(i)] -= 0.015;
    }
    for (int j = 0; j < m.n_dc_bus(); ++j) x[m.idx_vdc(j)] += 0.02;
    if (m.has_ic()) {
        x[m.idx_pic()] += 0.08;
        x[m.idx_qic()] += 0.03;
    }
    return x;
}

} // namespace

TEST_CASE("coi frequency is the inertia-weighted mean") {
    VectorXd h(2), f(2);
    h << 1.0, 3.0;
    f << 50.0, 49.0;
    CHECK(coi_frequency(h, f) == doctest::Approx(49.25).epsilon(1e-12));

    VectorXd h1(1), f1(1);
    h1 << 2.5;
    f1 << 49.7;
    CHECK(coi_frequency(h1, f1) == doctest::Approx(49.7).epsilon(1e-12));

    VectorXd bad(2);
    bad << 1.0, -1.0;
    CHECK_THROWS_AS(coi_frequency(bad, f), ValidationError);
    CHECK_THROWS_AS(coi_frequency(h1, f), ValidationError);
    CHECK_THROWS_AS(coi_frequency(VectorXd{}, VectorXd{}), ValidationError);
}

TEST_CASE("converter droop power on normalized bands") {
    IcParams ic;
    ic.f_band_hz[0] = 49.2;
    ic.f_band_hz[1] = 50.8;
    ic.vdc_band[0] = 0.9;
    ic.vdc_band[1] = 1.1;

    // at the lower frequency edge with the DC voltage centred, a tiny droop
    // constant commands a large import-side correction
    ic.gamma_p = 0.01;
    CHECK(ic_power(2.0 * pi * 49.2, 1.0, ic) == doctest::Approx(100.0).epsilon(1e-12));

    ic.gamma_p = 2.0;
    // w_hat = 0.25, v_hat = 0.5 -> p = -(0.25 - 0.5)/2
    CHECK(ic_power(2.0 * pi * 50.2, 1.05, ic) == doctest::Approx(0.125).epsilon(1e-9));
    // symmetric nominal point commands nothing
    CHECK(ic_power(2.0 * pi * 50.0, 1.0, ic) == doctest::Approx(0.0));
}

TEST_CASE("converter reactive support branch") {
    IcParams ic;
    ic.s_max_kva = 50.0;
    ic.gamma_q = 2.0;
    const double base = 100.0;

    CHECK(ic_reactive(0.0, 0.95, ic, 0.0, base) == 0.0);
    CHECK(ic_reactive(-0.2, 0.90, ic, 0.1, base) == 0.0);
    // droop: q0 + (1 - v)/gamma_q = 0.02, inside the 0.4 headroom circle
    CHECK(ic_reactive(0.3, 0.96, ic, 0.0, base) == doctest::Approx(0.02).epsilon(1e-12));
    // clipped to sqrt(0.5^2 - 0.3^2) = 0.4
    ic.gamma_q = 0.05;
    CHECK(ic_reactive(0.3, 0.96, ic, 0.0, base) == doctest::Approx(0.4).epsilon(1e-12));
    CHECK_THROWS_AS(ic_reactive(0.6, 1.0, ic, 0.0, base), ValidationError);
}

TEST_CASE("backward Euler solves the scalar decay exactly") {
    auto f = [](const VectorXd& x, VectorXd* r, MatrixXd* J) {
        r->resize(1);
        (*r)[0] = -x[0];
        if (J) {
            J->resize(1, 1);
            (*J)(0, 0) = -1.0;
        }
    };
    VectorXd x0(1), x1;
    x0 << 1.0;
    NewtonReport rep = backward_euler_step(f, x0, 0.5, x1);
    CHECK(rep.converged);
    CHECK(x1[0] == doctest::Approx(2.0 / 3.0).epsilon(1e-12));
}

TEST_CASE("newton returns an exact root untouched") {
    int calls_with_jacobian = 0;
    auto fn = [&](const VectorXd& x, VectorXd* r, MatrixXd* J) {
        r->resize(1);
        (*r)[0] = x[0] - 1.0;
        if (J) {
            ++calls_with_jacobian;
            J->resize(1, 1);
            (*J)(0, 0) = 1.0;
        }
    };
    VectorXd x(1);
    x << 1.0;
    NewtonReport rep = newton_solve(fn, x, {});
    CHECK(rep.converged);
    CHECK(rep.iterations == 0);
    CHECK(calls_with_jacobian == 0);
    CHECK(x[0] == 1.0);
}

TEST_CASE("event context resolves step windows") {
    HmgSystem sys = bundled();
    DynModel model(sys, noon_dispatch());
    EventSet ev{{ContingencyKind::wind_drop, "wt1", 0.5, 1.0, 2.0},
                {ContingencyKind::islanding, "", 0.0, 1.5, 1.0},
                {ContingencyKind::load_step, "b2", 0.3, 0.5, 5.0},
                {ContingencyKind::ic_outage, "", 0.0, 4.0, 1.0}};

    StepContext before = model.context(ev, 0.25);
    CHECK(before.tie_on);
    CHECK(before.ic_on);
    CHECK(before.ibr_alpha[0] == doctest::Approx(0.32));
    CHECK(before.load_scale[sys.bus_index("b2")] == 1.0);

    StepContext mid = model.context(ev, 2.0);
    CHECK_FALSE(mid.tie_on);
    CHECK(mid.ic_on);
    CHECK(mid.ibr_alpha[0] == doctest::Approx(0.16));
    CHECK(mid.load_scale[sys.bus_index("b2")] == doctest::Approx(1.3));

    StepContext late = model.context(ev, 4.5);
    CHECK(late.tie_on);
    CHECK_FALSE(late.ic_on);
    CHECK(late.ibr_alpha[0] == doctest::Approx(0.32));

    // boundary semantics: active on (start, start + duration]
    CHECK(model.context(ev, 1.0).ibr_alpha[0] == doctest::Approx(0.32));
    CHECK(model.context(ev, 3.0).ibr_alpha[0] == doctest::Approx(0.16));

    EventSet bad{{ContingencyKind::wind_drop, "nope", 0.5, 0.0, 1.0}};
    CHECK_THROWS_AS(model.context(bad, 0.5), ValidationError);
}

TEST_CASE("hybrid power flow reaches a consistent equilibrium") {
    HmgSystem sys = bundled();
    DispatchSetpoints d = noon_dispatch();
    DynModel model(sys, d);
    SteadyState ss = solve_hybrid_pf(model, model.base_context());

    CHECK(ss.residual_norm <= 1e-8);
    for (int i = 0; i < model.n_ac_bus(); ++i) {
        CHECK(ss.v_ac[i] > 0.9);
        CHECK(ss.v_ac[i] < 1.1);
    }
    for (int j = 0; j < model.n_dc_bus(); ++j) {
        CHECK(ss.v_dc[j] > 0.9);
        CHECK(ss.v_dc[j] < 1.1);
    }
    // the slack machine holds its bus
    const int sm = model.slack_machine(0);
    CHECK(model.machines()[sm].id == "dg1");
    CHECK(ss.theta[model.ac_ordinal(model.machines()[sm].bus)] == doctest::Approx(0.0));
    CHECK(ss.v_ac[model.ac_ordinal(model.machines()[sm].bus)] == doctest::Approx(1.0));
    // non-slack machines deliver their setpoints
    for (int m = 0; m < model.n_machines(); ++m) {
        if (m == sm) continue;
        CHECK(ss.p_mach[m] == doctest::Approx(model.machines()[m].p_set).epsilon(1e-6));
        CHECK(ss.q_mach[m] == doctest::Approx(model.machines()[m].q_set).epsilon(1e-6));
    }
    // DC surplus flows to the AC side through the converter droop
    CHECK(ss.p_ic > 0.0);
    CHECK(ss.v_dc[model.dc_ordinal(sys.bus_index("b7"))] > 1.0);

    DynamicState eq = init_dynamic_state(model, ss);
    StepContext cx = model.base_context();
    VectorXd r;
    model.eval(eq.x, nullptr, 0.0, cx, false, &r, nullptr);
    CHECK(r.lpNorm<Eigen::Infinity>() <= 1e-10);

    // one implicit step away from equilibrium stays at equilibrium
    model.eval(eq.x, &eq.x, 0.02, cx, false, &r, nullptr);
    CHECK(r.lpNorm<Eigen::Infinity>() <= 1e-12);

    // spec-level wrappers agree
    DynamicState prev = eq, next = eq;
    next.t = 0.02;
    VectorXd rw = residual(next, prev, 0.02, sys, {}, d);
    CHECK(rw.lpNorm<Eigen::Infinity>() <= 1e-12);
    VectorXd rs = steady_residual(eq, sys, {}, d);
    CHECK(rs.lpNorm<Eigen::Infinity>() <= 1e-10);
}

TEST_CASE("analytic jacobians match finite differences") {
    HmgSystem sys = bundled();
    DispatchSetpoints d = noon_dispatch();
    DynModel model(sys, d);
    SteadyState ss = solve_hybrid_pf(model, model.base_context());
    DynamicState eq = init_dynamic_state(model, ss);
    const VectorXd xpert = perturbed_state(model, eq.x);

    EventSet ev{{ContingencyKind::wind_drop, "wt1", 0.8, 0.0, 10.0},
                {ContingencyKind::load_step, "b3", 0.25, 0.0, 10.0}};

    struct Case {
        const char* name;
        bool steady;
        bool smooth;
        bool with_events;
    } cases[] = {
        {"transient literal", false, false, false},
        {"transient smooth", false, true, false},
        {"transient under events", false, false, true},
        {"steady literal", true, false, false},
    };
    for (const auto& c : cases) {
        CAPTURE(c.name);
        StepContext cx = model.context(c.with_events ? ev : EventSet{}, 1.0);
        const double h = 0.02;
        auto rf = [&](const VectorXd& x) {
            VectorXd r;
            model.eval(x, c.steady ? nullptr : &eq.x, c.steady ? 0.0 : h, cx, c.smooth, &r,
                       nullptr);
            return r;
        };
        VectorXd r;
        MatrixXd J;
        model.eval(xpert, c.steady ? nullptr : &eq.x, c.steady ? 0.0 : h, cx, c.smooth, &r, &J);
        CHECK(max_rel_err(J, fd_jacobian(rf, xpert)) <= 3e-6);
    }

    // steady power-flow jacobian
    VectorXd xpf = model.pf_flat_start();
    for (int i = 0; i < xpf.size(); ++i) xpf[i] += 0.01 + 0.002 * (i % 5);
    StepContext cx = model.base_context();
    auto pf = [&](const VectorXd& x) {
        VectorXd r;
        model.pf_eval(x, cx, &r, nullptr);
        return r;
    };
    VectorXd r;
    MatrixXd J;
    model.pf_eval(xpf, cx, &r, &J);
    CHECK(max_rel_err(J, fd_jacobian(pf, xpf)) <= 3e-6);
}

TEST_CASE("converter outage forces both channels to zero") {
    HmgSystem sys = bundled();
    DynModel model(sys, noon_dispatch());
    SteadyState ss = solve_hybrid_pf(model, model.base_context());
    DynamicState eq = init_dynamic_state(model, ss);

    EventSet ev{{ContingencyKind::ic_outage, "", 0.0, 1.0, 100.0}};
    StepContext cx = model.context(ev, 2.0);
    VectorXd r;
    model.eval(eq.x, &eq.x, 0.02, cx, false, &r, nullptr);
    CHECK(r[model.idx_pic()] == doctest::Approx(ss.p_ic));
    CHECK(r[model.idx_qic()] == doctest::Approx(ss.q_ic));
}

TEST_CASE("dimension mismatches are rejected") {
    HmgSystem sys = bundled();
    DynModel model(sys, noon_dispatch());
    VectorXd bad = VectorXd::Zero(3), r;
    StepContext cx = model.base_context();
    CHECK_THROWS_AS(model.eval(bad, nullptr, 0.0, cx, false, &r, nullptr), ValidationError);
    CHECK_THROWS_AS(model.pf_eval(bad, cx, &r, nullptr), ValidationError);
    VectorXd good = VectorXd::Zero(model.state_size());
    CHECK_THROWS_AS(model.eval(good, &bad, 0.02, cx, false, &r, nullptr), ValidationError);
    CHECK_THROWS_AS(model.eval(good, &good, -0.1, cx, false, &r, nullptr), ValidationError);

    DispatchSetpoints d;
    d.day = 7;
    CHECK_THROWS_AS(DynModel(sys, d), ValidationError);
}

TEST_CASE("event files round-trip") {
    EventSet ev{{ContingencyKind::wind_drop, "wt1", 0.8, 300.0, 84.0},
                {ContingencyKind::islanding, "", 0.0, 300.0, 300.0}};
    const std::string path = "/tmp/hmg_events_roundtrip.json";
    save_events(ev, path);
    EventSet back = load_events(path);
    CHECK(back == ev);

    EventSet pool = load_events(std::string(HMG_DATA_DIR) + "/pool_n1.json");
    CHECK(pool.size() == 4);
    CHECK(pool[0].kind == ContingencyKind::wind_drop);
    CHECK(pool[0].location == "wt1");
}
