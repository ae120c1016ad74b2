#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdio>
#include <fstream>

#include "hmg/netmodel.hpp"

using namespace hmg;

namespace {

std::string data_path(const char* name) {
    return std::string(HMG_DATA_DIR) + "/" + name;
}

// Independent annuity oracle: inverse of the present-value sum of n unit
// payments, evaluated term by term rather than through the closed form.
double annuity_oracle(double r, int n) {
    double pv = 0.0;
    for (int k = 1; k <= n; ++k)
        pv += std::pow(1.0 + r, -k);
    return 1.0 / pv;
}

} // namespace

TEST_CASE("per-unit conversions") {
    CHECK(to_per_unit(100.0, 100.0) == doctest::Approx(1.0));
    CHECK(to_per_unit(25.0, 100.0) == doctest::Approx(0.25));
    CHECK(from_per_unit(0.25, 100.0) == doctest::Approx(25.0));
    CHECK(from_per_unit(to_per_unit(37.5, 100.0), 100.0) == doctest::Approx(37.5));
    CHECK_THROWS_AS(to_per_unit(1.0, 0.0), ValidationError);
    CHECK_THROWS_AS(from_per_unit(1.0, -5.0), ValidationError);
}

TEST_CASE("annuity factor matches the present-value oracle") {
    const std::pair<double, int> cases[] = {
        {0.086, 20}, {0.065, 25}, {0.092, 25}, {0.089, 23}, {0.078, 25}, {0.08, 20}};
    for (auto [r, n] : cases)
        CHECK(annuity_factor(r, n) == doctest::Approx(annuity_oracle(r, n)).epsilon(1e-12));
    // Frozen oracle outputs for the bundled cost catalog.
    CHECK(annuity_factor(0.086, 20) == doctest::Approx(0.106441600191).epsilon(1e-9));
    CHECK(annuity_factor(0.065, 25) == doctest::Approx(0.081981481084).epsilon(1e-9));
    CHECK(annuity_factor(0.0, 10) == doctest::Approx(0.1));
    CHECK_THROWS_AS(annuity_factor(0.08, 0), ValidationError);
}

TEST_CASE("bundled system loads with the expected shape") {
    HmgSystem sys = load_system(data_path("hmg9.json"));
    CHECK(sys.lines.size() == 10);
    int ac = 0, dc = 0;
    for (const auto& b : sys.buses)
        (b.kind == BusKind::ac ? ac : dc)++;
    CHECK(ac == 6);
    CHECK(dc == 3);
    CHECK(sys.machines.size() == 3);
    CHECK(sys.ibrs.size() == 2);
    CHECK(sys.storages.size() == 2);
    REQUIRE(sys.ic.has_value());
    CHECK(sys.ic->ac_subgrid == "ac1");
    CHECK(sys.ic->dc_subgrid == "dc1");
    REQUIRE(sys.tie.has_value());
    CHECK(sys.days.size() == 2);
    double w = 0.0;
    for (const auto& d : sys.days)
        w += d.weight;
    CHECK(w == doctest::Approx(365.0));

    auto [p, q] = sys.load_pu(0, 12, sys.bus("b2"));
    CHECK(p == doctest::Approx(0.30));
    CHECK(q == doctest::Approx(0.09));
    CHECK(sys.availability(1, 19, sys.ibrs[0]) == doctest::Approx(0.88));
    auto [tp, tq] = sys.tie_pu(0, 5);
    CHECK(tp == doctest::Approx(0.12));
    CHECK(tq == doctest::Approx(0.04));
}

TEST_CASE("save and reload is a field-for-field identity") {
    HmgSystem sys = load_system(data_path("hmg9.json"));
    std::string tmp = "roundtrip_hmg9.json";
    save_system(sys, tmp);
    HmgSystem again = load_system(tmp);
    CHECK(again == sys);
    std::remove(tmp.c_str());
}

TEST_CASE("validation rejects broken inputs and names the record") {
    HmgSystem base = load_system(data_path("hmg9.json"));

    SUBCASE("DC line with a reactance") {
        HmgSystem sys = base;
        for (auto& l : sys.lines)
            if (l.from == "b7" && l.to == "b8")
                l.x = 0.1;
        try {
            validate(sys);
            FAIL("expected ValidationError");
        } catch (const ValidationError& e) {
            CHECK(std::string(e.what()).find("b7-b8") != std::string::npos);
        }
    }
    SUBCASE("AC line without a reactance") {
        HmgSystem sys = base;
        sys.lines[0].x.reset();
        CHECK_THROWS_AS(validate(sys), ValidationError);
    }
    SUBCASE("line to a missing bus") {
        HmgSystem sys = base;
        sys.lines[0].to = "nowhere";
        CHECK_THROWS_AS(validate(sys), ValidationError);
    }
    SUBCASE("duplicate bus id") {
        HmgSystem sys = base;
        sys.buses.push_back(sys.buses[0]);
        CHECK_THROWS_AS(validate(sys), ValidationError);
    }
    SUBCASE("day weights must sum to a year") {
        HmgSystem sys = base;
        sys.days[0].weight += 1.0;
        CHECK_THROWS_AS(validate(sys), ValidationError);
    }
    SUBCASE("storage energy ordering") {
        HmgSystem sys = base;
        sys.storages[0].e_init_kwh = sys.storages[0].e_max_kwh + 1.0;
        CHECK_THROWS_AS(validate(sys), ValidationError);
    }
    SUBCASE("availability must stay within [0,1]") {
        HmgSystem sys = base;
        sys.days[0].series["wind"].p[3] = 1.4;
        CHECK_THROWS_AS(validate(sys), ValidationError);
    }
    SUBCASE("x_d_prime below x_d") {
        HmgSystem sys = base;
        sys.machines[0].x_d_prime = sys.machines[0].x_d + 0.1;
        CHECK_THROWS_AS(validate(sys), ValidationError);
    }
    SUBCASE("load profile missing from one day") {
        HmgSystem sys = base;
        sys.days[1].series.erase("load_b4");
        try {
            validate(sys);
            FAIL("expected ValidationError");
        } catch (const ValidationError& e) {
            CHECK(std::string(e.what()).find("load_b4") != std::string::npos);
        }
    }
}

TEST_CASE("machine per-unit accessors scale with machine size") {
    HmgSystem sys = load_system(data_path("hmg9.json"));
    const MachineParams& dg1 = sys.machines[0];
    // 187.5 kVA machine on a 100 kVA system base.
    CHECK(dg1.s_frac(sys.base_kva) == doctest::Approx(1.875));
    CHECK(dg1.h_sys(sys.base_kva) == doctest::Approx(2.0 * 1.875));
    CHECK(dg1.x_dp_sys(sys.base_kva) == doctest::Approx(0.3 / 1.875));
    CHECK(dg1.d_p_sys(sys.base_kva) == doctest::Approx(20.0 * 1.875));
    CHECK(dg1.p_max_pu(sys.base_kva) == doctest::Approx(1.5));
}

TEST_CASE("default sizing reproduces nameplate blocks") {
    HmgSystem sys = load_system(data_path("hmg9.json"));
    SizingDecision d = default_sizing(sys, true);
    CHECK(d.blocks.at("dg1") == 30);
    CHECK(d.blocks.at("dg2") == 16);
    CHECK(d.blocks.at("dg_dc") == 10);
    CHECK(d.blocks.at("wt1") == 32);
    CHECK(d.blocks.at("pv1") == 16);
    CHECK(d.blocks.at("es1") == 12);
    CHECK(d.blocks.at("es2") == 8);
    CHECK(d.blocks.at("ic") == 50);
    auto ids = sizeable_assets(sys, false);
    CHECK(ids.size() == 7);
    CHECK(sizeable_assets(sys, true).size() == 8);
}

TEST_CASE("apply_sizing rescales capacities and drops zeroed assets") {
    HmgSystem sys = load_system(data_path("hmg9.json"));
    SizingDecision d;
    d.blocks["dg1"] = 15; // 75 kW, half the nameplate
    d.blocks["wt1"] = 0;
    d.blocks["ic"] = 37;
    HmgSystem sized = apply_sizing(sys, d);
    CHECK(sized.machines[0].p_max_kw == doctest::Approx(75.0));
    CHECK(sized.machines[0].s_max_kva == doctest::Approx(93.75));
    CHECK(sized.machines[0].h_sys(sys.base_kva) == doctest::Approx(2.0 * 0.9375));
    CHECK(sized.ibrs.size() == 1); // wt1 removed
    CHECK(sized.ibrs[0].id == "pv1");
    CHECK(sized.ic->s_max_kva == doctest::Approx(37.0));
    // Untouched assets keep their nameplate.
    CHECK(sized.machines[1].p_max_kw == doctest::Approx(80.0));

    SizingDecision bad;
    bad.blocks["nope"] = 3;
    CHECK_THROWS_AS(apply_sizing(sys, bad), ValidationError);
}

TEST_CASE("annualized investment cost") {
    HmgSystem sys = load_system(data_path("hmg9.json"));

    // One PV block: 5 kW at the frozen 61.1275923 per kW-year.
    SizingDecision d;
    d.blocks["pv1"] = 1;
    CHECK(annualized_investment_cost(sys, d) == doctest::Approx(5.0 * 61.1275923263).epsilon(1e-9));

    // Hand-summed mixed decision.
    SizingDecision m;
    m.blocks["dg1"] = 10;  // 50 kW dg_ac
    m.blocks["es1"] = 2;   // 10 kWh block pair
    double expect = 50.0 * (2150.0 * annuity_factor(0.092, 25) + 41.6) +
                    10.0 * (3400.0 * annuity_factor(0.086, 20) + 39.0);
    CHECK(annualized_investment_cost(sys, m) == doctest::Approx(expect).epsilon(1e-12));

    SizingDecision bad;
    bad.blocks["b1"] = 1;
    CHECK_THROWS_AS(annualized_investment_cost(sys, bad), ValidationError);
}
