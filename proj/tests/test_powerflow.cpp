#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <complex>
#include <cstdio>
#include <map>

#include "hmg/common.hpp"
#include "hmg/dispatch.hpp"
#include "hmg/dynamics.hpp"
#include "hmg/netmodel.hpp"
#include "hmg/powerflow.hpp"
#include "hmg/solvers.hpp"
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

/// Receiving-end voltage of a two-bus feeder by bisection on the quadratic
/// in u = |V2|^2:  u^2 + u*(2(Pr + Qx) - V1^2) + (P^2 + Q^2)|z|^2 = 0,
/// taking the upper root (the stable high-voltage branch).
double two_bus_voltage_oracle(double p, double q, double r, double x, double v1 = 1.0) {
    const double B = 2.0 * (p * r + q * x) - v1 * v1;
    const double C = (p * p + q * q) * (r * r + x * x);
    auto g = [&](double u) { return u * u + B * u + C; };
    double lo = -B / 2.0;           // vertex, below both roots' midpoint
    double hi = v1 * v1;            // g(V1^2) > 0 for any nonzero load
    REQUIRE(g(lo) < 0.0);
    REQUIRE(g(hi) > 0.0);
    for (int it = 0; it < 200; ++it) {
        const double mid = 0.5 * (lo + hi);
        (g(mid) < 0.0 ? lo : hi) = mid;
    }
    return std::sqrt(0.5 * (lo + hi));
}

} // namespace

TEST_CASE("two-bus receiving-end voltage matches the quadratic oracle") {
    struct Case {
        double p, q;
    };
    for (const Case c : {Case{0.5, 0.0}, Case{0.4, 0.1}}) {
        CAPTURE(c.p);
        CAPTURE(c.q);
        const double r = 0.1, x = 0.2;
        HmgSystem sys = two_bus(c.p * 100.0, c.q * 100.0, r, x);
        SteadyState ss = solve_hybrid_pf(sys, empty_dispatch());

        const double v2 = two_bus_voltage_oracle(c.p, c.q, r, x);
        CHECK(std::abs(ss.v_ac[1] - v2) <= 1e-8);

        // The solved phasors must reproduce the load injection exactly.
        const std::complex<double> z(r, x);
        const std::complex<double> vf = std::polar(ss.v_ac[0], ss.theta[0]);
        const std::complex<double> vt = std::polar(ss.v_ac[1], ss.theta[1]);
        const std::complex<double> s_inj = vt * std::conj((vt - vf) / z);
        CHECK(std::abs(s_inj.real() + c.p) <= 1e-8);
        CHECK(std::abs(s_inj.imag() + c.q) <= 1e-8);
        CHECK(ss.p_inj[1] == doctest::Approx(-c.p).epsilon(1e-8));
        CHECK(ss.q_inj[1] == doctest::Approx(-c.q).epsilon(1e-8));

        // Slack machine covers load plus the series loss.
        const double loss = std::norm((vf - vt) / z) * r;
        CHECK(ss.p_mach[0] == doctest::Approx(c.p + loss).epsilon(1e-8));
        CHECK(ss.f_ss == 50.0);
    }
}

TEST_CASE("zero injections leave the flat start untouched") {
    HmgSystem sys = two_bus(0.0, 0.0);
    SteadyState ss = solve_hybrid_pf(sys, empty_dispatch());
    CHECK(ss.iterations == 0);
    CHECK(ss.theta.cwiseAbs().maxCoeff() == 0.0);
    CHECK((ss.v_ac.array() - 1.0).abs().maxCoeff() == 0.0);
    CHECK(ss.p_mach[0] == 0.0);
    CHECK(ss.q_mach[0] == 0.0);
    CHECK(ss.p_ic == 0.0);

    // Equilibrium back-solve: rotor aligned with the bus, integrators at rest.
    DispatchSetpoints d = empty_dispatch();
    DynModel model(sys, d);
    DynamicState eq = init_dynamic_state(model, ss);
    CHECK(eq.x[model.idx_mach(0, 0)] == doctest::Approx(0.0));          // delta
    CHECK(eq.x[model.idx_mach(0, 5)] == doctest::Approx(0.0));          // p_m
    CHECK(eq.x[model.idx_mach(0, 6)] == doctest::Approx(0.0));          // z_gov
    CHECK(eq.x[model.idx_mach(0, 2)] == doctest::Approx(1.0));          // e_q_prime
    CHECK(eq.x[model.idx_mach(0, 7)] == doctest::Approx(eq.x[model.idx_mach(0, 3)]));
}

TEST_CASE("loaded equilibrium satisfies every steady equation") {
    HmgSystem sys = two_bus(50.0, 20.0);
    DispatchSetpoints d = empty_dispatch();
    DynModel model(sys, d);
    SteadyState ss = solve_hybrid_pf(model, model.base_context());
    CHECK(ss.p_mach[0] > 0.5);
    CHECK(ss.q_mach[0] > 0.2);

    DynamicState eq = init_dynamic_state(model, ss);
    VectorXd r;
    model.eval(eq.x, nullptr, 0.0, model.base_context(), false, &r, nullptr);
    CHECK(r.lpNorm<Eigen::Infinity>() <= 1e-10);

    // Fixed point of the implicit step operator.
    VectorXd xn = eq.x;
    auto fn = [&](const VectorXd& p, VectorXd* rr, Eigen::MatrixXd* J) {
        model.eval(p, &eq.x, 0.02, model.base_context(), false, rr, J);
    };
    NewtonOptions opt;
    newton_solve(fn, xn, opt);
    CHECK((xn - eq.x).lpNorm<Eigen::Infinity>() <= 1e-10);
}

TEST_CASE("bundled system base case stays inside its voltage boxes") {
    HmgSystem sys = bundled();
    DispatchSetpoints d = noon_dispatch();
    DynModel model(sys, d);
    SteadyState ss = solve_hybrid_pf(model, model.base_context());

    CHECK(ss.residual_norm <= 1e-8);
    CHECK(ss.v_ac.minCoeff() >= 0.9);
    CHECK(ss.v_ac.maxCoeff() <= 1.1);
    CHECK(ss.v_dc.minCoeff() >= 0.9);
    CHECK(ss.v_dc.maxCoeff() <= 1.1);
    CHECK(ss.f_ss == 50.0);

    // The convenience overload sees the same operating point.
    SteadyState ss2 = solve_hybrid_pf(sys, d);
    CHECK((ss2.v_ac - ss.v_ac).lpNorm<Eigen::Infinity>() <= 1e-12);
    CHECK(ss2.p_ic == doctest::Approx(ss.p_ic).epsilon(1e-12));
}

TEST_CASE("converged flows balance generation, load, and independently computed losses") {
    HmgSystem sys = bundled();
    DispatchSetpoints d = noon_dispatch();
    DynModel model(sys, d);
    SteadyState ss = solve_hybrid_pf(model, model.base_context());

    // Bus ordinals rebuilt here from scratch so the check shares nothing
    // with the model's own network assembly.
    std::map<std::string, int> ac_ord, dc_ord;
    for (const auto& b : sys.buses) {
        if (b.kind == BusKind::ac)
            ac_ord.emplace(b.id, static_cast<int>(ac_ord.size()));
        else
            dc_ord.emplace(b.id, static_cast<int>(dc_ord.size()));
    }
    double ac_loss = 0.0, dc_loss = 0.0;
    for (const auto& ln : sys.lines) {
        if (ln.x.has_value()) {
            const std::complex<double> z(ln.r, *ln.x);
            const auto vf = std::polar(ss.v_ac[ac_ord.at(ln.from)], ss.theta[ac_ord.at(ln.from)]);
            const auto vt = std::polar(ss.v_ac[ac_ord.at(ln.to)], ss.theta[ac_ord.at(ln.to)]);
            ac_loss += std::norm((vf - vt) / z) * ln.r;
        } else {
            const double dv = ss.v_dc[dc_ord.at(ln.from)] - ss.v_dc[dc_ord.at(ln.to)];
            dc_loss += dv * dv / ln.r;
        }
    }

    double ac_gen = 0.0, dc_gen = 0.0;
    for (int m = 0; m < model.n_machines(); ++m) ac_gen += ss.p_mach[m];
    for (const auto& g : sys.machines)
        if (sys.bus(g.bus).kind == BusKind::dc) dc_gen += d.get(d.p_dg, g.id);
    for (const auto& u : sys.ibrs) {
        const double p_eff =
            std::min(d.get(d.p_ibr, u.id), sys.availability(0, 12, u) * u.p_max_pu(sys.base_kva));
        (sys.bus(u.bus).kind == BusKind::ac ? ac_gen : dc_gen) += p_eff;
    }

    ac_gen += sys.tie_pu(0, 12).first;

    double ac_load = 0.0, dc_load = 0.0;
    for (const auto& b : sys.buses) {
        auto [p, q] = sys.load_pu(0, 12, b);
        if (b.kind == BusKind::ac)
            ac_load += p;
        else
            dc_load += p * ss.v_dc[dc_ord.at(b.id)] * ss.v_dc[dc_ord.at(b.id)];
    }

    CHECK(std::abs(ac_gen + ss.p_ic - ac_load - ac_loss) <= 1e-8);
    CHECK(std::abs(dc_gen - ss.p_ic - dc_load - dc_loss) <= 1e-8);

    // Summed network absorption is exactly the loss, split by subgrid kind.
    double inj_ac = 0.0, inj_dc = 0.0;
    for (int b = 0; b < static_cast<int>(sys.buses.size()); ++b)
        (sys.buses[b].kind == BusKind::ac ? inj_ac : inj_dc) += ss.p_inj[b];
    CHECK(inj_ac == doctest::Approx(ac_loss).epsilon(1e-8));
    CHECK(inj_dc == doctest::Approx(dc_loss).epsilon(1e-8));
}

TEST_CASE("importing converter ships no reactive power") {
    HmgSystem sys = bundled();
    DispatchSetpoints d = noon_dispatch();
    d.p_dg["dg_dc"] = 0.0;
    d.p_ibr["pv1"] = 0.05;
    SteadyState ss = solve_hybrid_pf(sys, d);
    CHECK(ss.p_ic < 0.0);
    CHECK(ss.q_ic == 0.0);
    CHECK(ss.v_dc.minCoeff() < 1.0);
}

TEST_CASE("infeasible operating points are reported, not returned") {
    // Load far beyond the feeder's maximum power transfer.
    CHECK_THROWS_AS(solve_hybrid_pf(two_bus(500.0, 0.0), empty_dispatch()), InfeasibleError);

    // A converged flow whose machine would need an implausible field voltage.
    HmgSystem weak = two_bus(20.0, 30.0, 0.1, 0.2, 10.0);
    DispatchSetpoints d = empty_dispatch();
    DynModel model(weak, d);
    SteadyState ss = solve_hybrid_pf(model, model.base_context());
    CHECK_THROWS_AS(init_dynamic_state(model, ss), InfeasibleError);
}

TEST_CASE("dispatch files round-trip through the loader") {
    DispatchSetpoints d;
    d.day = 2;
    d.slot = 17;
    d.p_dg = {{"dg1", 0.41}, {"dg2", 0.15}};
    d.q_dg = {{"dg1", 0.02}};
    d.p_ibr = {{"wt1", 0.2}};
    d.q_ibr = {{"wt1", 0.01}};
    d.es_charge = {{"es1", 0.05}};
    d.es_discharge = {{"es1", 0.0}};
    d.q_es = {{"es1", 0.015}};
    d.es_mode = {{"es1", 1}};
    d.v_slack = 1.02;
    d.cost = 123.456;

    const std::string path = "/tmp/hmg_dispatch_rt.json";
    save_dispatch(d, path);
    DispatchSetpoints e = load_dispatch(path);
    CHECK(e.day == d.day);
    CHECK(e.slot == d.slot);
    CHECK(e.p_dg == d.p_dg);
    CHECK(e.q_dg == d.q_dg);
    CHECK(e.p_ibr == d.p_ibr);
    CHECK(e.q_ibr == d.q_ibr);
    CHECK(e.es_charge == d.es_charge);
    CHECK(e.es_discharge == d.es_discharge);
    CHECK(e.q_es == d.q_es);
    CHECK(e.es_mode == d.es_mode);
    CHECK(e.v_slack == d.v_slack);
    CHECK(e.cost == doctest::Approx(d.cost));
    std::remove(path.c_str());
}
