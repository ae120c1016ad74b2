#include "hmg/netmodel.hpp"

#include <fstream>
#include <queue>
#include <set>
#include <sstream>

#include <json.hpp>

namespace hmg {

using nlohmann::json;
using nlohmann::ordered_json;

double to_per_unit(double value, double base) {
    if (base <= 0.0)
        throw ValidationError("to_per_unit: base must be positive");
    return value / base;
}

double from_per_unit(double value, double base) {
    if (base <= 0.0)
        throw ValidationError("from_per_unit: base must be positive");
    return value * base;
}

int HmgSystem::bus_index(const std::string& id) const {
    for (size_t i = 0; i < buses.size(); ++i)
        if (buses[i].id == id)
            return static_cast<int>(i);
    throw ValidationError("unknown bus id '" + id + "'");
}

const BusSpec& HmgSystem::bus(const std::string& id) const {
    return buses[static_cast<size_t>(bus_index(id))];
}

const DayProfile& HmgSystem::day(int d) const {
    if (d < 0 || d >= static_cast<int>(days.size()))
        throw ValidationError("day index " + std::to_string(d) + " out of range");
    return days[static_cast<size_t>(d)];
}

const ProfileSeries& HmgSystem::profile(int d, const std::string& name) const {
    const DayProfile& dp = day(d);
    auto it = dp.series.find(name);
    if (it == dp.series.end())
        throw ValidationError("day '" + dp.name + "' has no profile '" + name + "'");
    return it->second;
}

std::pair<double, double> HmgSystem::load_pu(int d, int slot, const BusSpec& b) const {
    if (b.load_profile.empty())
        return {0.0, 0.0};
    const ProfileSeries& s = profile(d, b.load_profile);
    double p = s.p.at(static_cast<size_t>(slot)) / base_kva;
    double q = s.q.empty() ? 0.0 : s.q.at(static_cast<size_t>(slot)) / base_kva;
    return {p, q};
}

double HmgSystem::availability(int d, int slot, const IbrParams& r) const {
    const ProfileSeries& s = profile(d, r.availability_profile);
    return s.p.at(static_cast<size_t>(slot));
}

std::pair<double, double> HmgSystem::tie_pu(int d, int slot) const {
    if (!tie)
        return {0.0, 0.0};
    const ProfileSeries& s = profile(d, tie->profile);
    double p = s.p.at(static_cast<size_t>(slot)) / base_kva;
    double q = s.q.empty() ? 0.0 : s.q.at(static_cast<size_t>(slot)) / base_kva;
    return {p, q};
}

namespace {

[[noreturn]] void fail(const std::string& where, const std::string& what) {
    throw ValidationError(where + ": " + what);
}

const json& req(const json& j, const char* field, const std::string& where) {
    auto it = j.find(field);
    if (it == j.end())
        fail(where, std::string("missing required field '") + field + "'");
    return *it;
}

SizingRange parse_sizing(const json& j, const std::string& where) {
    SizingRange s;
    s.unit_kw = j.value("unit_kw", 1.0);
    s.min_kw = j.value("min_kw", 0.0);
    s.max_kw = req(j, "max_kw", where).get<double>();
    if (s.unit_kw <= 0.0)
        fail(where, "sizing unit_kw must be positive");
    if (s.min_kw < 0.0 || s.max_kw < s.min_kw)
        fail(where, "sizing range must satisfy 0 <= min_kw <= max_kw");
    return s;
}

ordered_json dump_sizing(const SizingRange& s) {
    return ordered_json{{"unit_kw", s.unit_kw}, {"min_kw", s.min_kw}, {"max_kw", s.max_kw}};
}

} // namespace

HmgSystem load_system(const std::string& path) {
    std::ifstream in(path);
    if (!in)
        throw ValidationError("cannot open system file '" + path + "'");
    json j;
    try {
        in >> j;
    } catch (const json::exception& e) {
        throw ValidationError("system file '" + path + "' is not valid JSON: " + e.what());
    }

    HmgSystem sys;
    sys.name = j.value("name", std::string{});
    sys.base_kva = j.value("base_kva", 100.0);
    sys.f_hz = j.value("f_hz", 50.0);
    sys.slots_per_day = j.value("slots_per_day", 24);
    sys.slot_hours = j.value("slot_hours", 1.0);

    if (auto it = j.find("limits"); it != j.end()) {
        sys.limits.f_min_hz = it->value("f_min_hz", sys.limits.f_min_hz);
        sys.limits.f_max_hz = it->value("f_max_hz", sys.limits.f_max_hz);
        sys.limits.rocof_hz_s = it->value("rocof_hz_s", sys.limits.rocof_hz_s);
        sys.limits.v_min = it->value("v_min", sys.limits.v_min);
        sys.limits.v_max = it->value("v_max", sys.limits.v_max);
    }

    for (const auto& bj : req(j, "buses", "system")) {
        BusSpec b;
        b.id = req(bj, "id", "bus").get<std::string>();
        std::string where = "bus '" + b.id + "'";
        std::string kind = req(bj, "kind", where).get<std::string>();
        if (kind == "ac")
            b.kind = BusKind::ac;
        else if (kind == "dc")
            b.kind = BusKind::dc;
        else
            fail(where, "kind must be 'ac' or 'dc', got '" + kind + "'");
        b.subgrid = req(bj, "subgrid", where).get<std::string>();
        b.load_profile = bj.value("load_profile", std::string{});
        b.v_nominal = bj.value("v_nominal", 1.0);
        b.v_min = bj.value("v_min", sys.limits.v_min);
        b.v_max = bj.value("v_max", sys.limits.v_max);
        sys.buses.push_back(std::move(b));
    }

    for (const auto& lj : req(j, "lines", "system")) {
        LineSpec l;
        l.from = req(lj, "from", "line").get<std::string>();
        l.to = req(lj, "to", "line").get<std::string>();
        std::string where = "line " + l.from + "-" + l.to;
        l.r = req(lj, "r", where).get<double>();
        if (lj.contains("x"))
            l.x = lj["x"].get<double>();
        l.s_max_kva = req(lj, "s_max_kva", where).get<double>();
        sys.lines.push_back(std::move(l));
    }

    for (const auto& mj : j.value("machines", json::array())) {
        MachineParams m;
        m.id = req(mj, "id", "machine").get<std::string>();
        std::string where = "machine '" + m.id + "'";
        m.bus = req(mj, "bus", where).get<std::string>();
        m.p_min_kw = mj.value("p_min_kw", 0.0);
        m.p_max_kw = req(mj, "p_max_kw", where).get<double>();
        m.s_max_kva = mj.value("s_max_kva", m.p_max_kw / 0.9);
        m.c_gen = mj.value("c_gen", 0.0);
        m.h = mj.value("h_s", 2.0);
        m.x_d = mj.value("x_d", 1.8);
        m.x_d_prime = mj.value("x_d_prime", 0.3);
        m.t_d0_prime = mj.value("t_d0_prime_s", 5.0);
        if (auto it = mj.find("governor"); it != mj.end()) {
            m.gov.d_p = it->value("d_p", m.gov.d_p);
            m.gov.d_i = it->value("d_i", m.gov.d_i);
            m.gov.t_g = it->value("t_g_s", m.gov.t_g);
        }
        if (auto it = mj.find("avr"); it != mj.end()) {
            m.avr.k_a = it->value("k_a", m.avr.k_a);
            m.avr.t_a = it->value("t_a_s", m.avr.t_a);
            m.avr.k_e = it->value("k_e", m.avr.k_e);
            m.avr.t_e = it->value("t_e_s", m.avr.t_e);
            m.avr.k_f = it->value("k_f", m.avr.k_f);
            m.avr.t_f = it->value("t_f_s", m.avr.t_f);
        }
        m.cost_class = mj.value("cost_class", std::string{});
        if (auto it = mj.find("sizing"); it != mj.end())
            m.sizing = parse_sizing(*it, where);
        sys.machines.push_back(std::move(m));
    }

    for (const auto& rj : j.value("ibrs", json::array())) {
        IbrParams r;
        r.id = req(rj, "id", "ibr").get<std::string>();
        std::string where = "ibr '" + r.id + "'";
        r.bus = req(rj, "bus", where).get<std::string>();
        std::string kind = req(rj, "kind", where).get<std::string>();
        if (kind == "wt")
            r.kind = IbrKind::wt;
        else if (kind == "pv")
            r.kind = IbrKind::pv;
        else
            fail(where, "kind must be 'wt' or 'pv', got '" + kind + "'");
        r.p_max_kw = req(rj, "p_max_kw", where).get<double>();
        r.s_max_kva = rj.value("s_max_kva", r.p_max_kw);
        r.l_filter = rj.value("l_filter", 0.1);
        r.k_p = rj.value("k_p", 1.0);
        r.k_i = rj.value("k_i", 10.0);
        r.d_v = rj.value("d_v", 5.0);
        r.availability_profile = req(rj, "availability_profile", where).get<std::string>();
        r.cost_class = rj.value("cost_class", std::string{});
        if (auto it = rj.find("sizing"); it != rj.end())
            r.sizing = parse_sizing(*it, where);
        sys.ibrs.push_back(std::move(r));
    }

    for (const auto& ej : j.value("storages", json::array())) {
        EsParams e;
        e.id = req(ej, "id", "storage").get<std::string>();
        std::string where = "storage '" + e.id + "'";
        e.bus = req(ej, "bus", where).get<std::string>();
        e.p_max_kw = req(ej, "p_max_kw", where).get<double>();
        e.s_max_kva = ej.value("s_max_kva", e.p_max_kw);
        e.e_max_kwh = ej.value("e_max_kwh", 2.0 * e.p_max_kw);
        e.e_min_kwh = ej.value("e_min_kwh", 0.1 * e.e_max_kwh);
        e.e_init_kwh = ej.value("e_init_kwh", 0.5 * e.e_max_kwh);
        e.eta = ej.value("eta", 0.95);
        e.cost_class = ej.value("cost_class", std::string{});
        if (auto it = ej.find("sizing"); it != ej.end())
            e.sizing = parse_sizing(*it, where);
        sys.storages.push_back(std::move(e));
    }

    if (auto it = j.find("ic"); it != j.end()) {
        IcParams ic;
        ic.ac_bus = req(*it, "ac_bus", "ic").get<std::string>();
        ic.dc_bus = req(*it, "dc_bus", "ic").get<std::string>();
        ic.s_max_kva = it->value("s_max_kva", 50.0);
        ic.gamma_p = it->value("gamma_p", 2.0);
        ic.gamma_q = it->value("gamma_q", 2.0);
        ic.q_nominal_kvar = it->value("q_nominal_kvar", 0.0);
        if (auto b = it->find("f_band_hz"); b != it->end()) {
            ic.f_band_hz[0] = (*b)[0].get<double>();
            ic.f_band_hz[1] = (*b)[1].get<double>();
        }
        if (auto b = it->find("vdc_band"); b != it->end()) {
            ic.vdc_band[0] = (*b)[0].get<double>();
            ic.vdc_band[1] = (*b)[1].get<double>();
        }
        ic.cost_class = it->value("cost_class", std::string{});
        if (auto s = it->find("sizing"); s != it->end())
            ic.sizing = parse_sizing(*s, "ic");
        sys.ic = std::move(ic);
    }

    if (auto it = j.find("grid_tie"); it != j.end()) {
        GridTie t;
        t.bus = req(*it, "bus", "grid_tie").get<std::string>();
        t.profile = req(*it, "profile", "grid_tie").get<std::string>();
        sys.tie = std::move(t);
    }

    for (const auto& dj : j.value("days", json::array())) {
        DayProfile d;
        d.name = req(dj, "name", "day").get<std::string>();
        std::string where = "day '" + d.name + "'";
        d.weight = req(dj, "weight", where).get<double>();
        for (const auto& [pname, pj] : req(dj, "profiles", where).items()) {
            ProfileSeries s;
            s.p = req(pj, "p", where + " profile '" + pname + "'").get<std::vector<double>>();
            if (pj.contains("q"))
                s.q = pj["q"].get<std::vector<double>>();
            d.series.emplace(pname, std::move(s));
        }
        sys.days.push_back(std::move(d));
    }

    json costs_j = j.value("costs", json::object());
    for (const auto& [cname, cj] : costs_j.items()) {
        CostEntry c;
        std::string where = "cost class '" + cname + "'";
        c.capital_per_kw = req(cj, "capital_per_kw", where).get<double>();
        c.om_per_kw_yr = cj.value("om_per_kw_yr", 0.0);
        c.discount = req(cj, "discount", where).get<double>();
        c.lifetime_yr = req(cj, "lifetime_yr", where).get<int>();
        sys.costs.emplace(cname, c);
    }

    // Derive the IC subgrid identifiers before validation so that errors can
    // name them.
    if (sys.ic) {
        for (const auto& b : sys.buses) {
            if (b.id == sys.ic->ac_bus)
                sys.ic->ac_subgrid = b.subgrid;
            if (b.id == sys.ic->dc_bus)
                sys.ic->dc_subgrid = b.subgrid;
        }
    }

    validate(sys);
    return sys;
}

namespace {

void check_profile_ref(const HmgSystem& sys, const std::string& name,
                       const std::string& where, bool want_q, bool availability) {
    for (const auto& d : sys.days) {
        auto it = d.series.find(name);
        if (it == d.series.end())
            fail(where, "profile '" + name + "' missing from day '" + d.name + "'");
        const ProfileSeries& s = it->second;
        if (static_cast<int>(s.p.size()) != sys.slots_per_day)
            fail(where, "profile '" + name + "' in day '" + d.name + "' has " +
                            std::to_string(s.p.size()) + " slots, expected " +
                            std::to_string(sys.slots_per_day));
        if (want_q && static_cast<int>(s.q.size()) != sys.slots_per_day)
            fail(where, "profile '" + name + "' in day '" + d.name + "' needs a q series");
        if (!want_q && !s.q.empty())
            fail(where, "profile '" + name + "' in day '" + d.name + "' must not carry q");
        if (availability)
            for (double v : s.p)
                if (v < 0.0 || v > 1.0)
                    fail(where, "availability profile '" + name + "' leaves [0, 1] in day '" +
                                    d.name + "'");
    }
}

} // namespace

void validate(const HmgSystem& sys) {
    if (sys.base_kva <= 0.0)
        fail("system", "base_kva must be positive");
    if (sys.f_hz <= 0.0)
        fail("system", "f_hz must be positive");
    if (sys.slots_per_day < 1 || sys.slot_hours <= 0.0)
        fail("system", "slots_per_day and slot_hours must be positive");
    if (!(sys.limits.f_min_hz < sys.f_hz && sys.f_hz < sys.limits.f_max_hz))
        fail("limits", "f_min_hz < f_hz < f_max_hz violated");
    if (!(sys.limits.v_min < sys.limits.v_max))
        fail("limits", "v_min < v_max violated");

    std::set<std::string> bus_ids;
    std::map<std::string, BusKind> subgrid_kind;
    for (const auto& b : sys.buses) {
        std::string where = "bus '" + b.id + "'";
        if (b.id.empty())
            fail("bus", "empty id");
        if (!bus_ids.insert(b.id).second)
            fail(where, "duplicate bus id");
        if (b.subgrid.empty())
            fail(where, "empty subgrid");
        if (!(b.v_min < b.v_nominal && b.v_nominal < b.v_max))
            fail(where, "v_min < v_nominal < v_max violated");
        auto [it, fresh] = subgrid_kind.emplace(b.subgrid, b.kind);
        if (!fresh && it->second != b.kind)
            fail(where, "subgrid '" + b.subgrid + "' mixes AC and DC buses");
    }

    std::map<std::string, std::vector<std::string>> adjacency;
    for (const auto& l : sys.lines) {
        std::string where = "line " + l.from + "-" + l.to;
        if (!bus_ids.count(l.from) || !bus_ids.count(l.to))
            fail(where, "endpoint bus does not exist");
        if (l.from == l.to)
            fail(where, "self loop");
        const BusSpec& bf = sys.bus(l.from);
        const BusSpec& bt = sys.bus(l.to);
        if (bf.kind != bt.kind || bf.subgrid != bt.subgrid)
            fail(where, "endpoints must share one subgrid");
        if (bf.kind == BusKind::dc && l.x.has_value())
            fail(where, "DC line must not declare a reactance");
        if (bf.kind == BusKind::ac && (!l.x.has_value() || *l.x <= 0.0))
            fail(where, "AC line needs a positive reactance");
        if (l.r < 0.0)
            fail(where, "negative resistance");
        if (bf.kind == BusKind::dc && l.r <= 0.0)
            fail(where, "DC line needs a positive resistance");
        if (l.s_max_kva <= 0.0)
            fail(where, "s_max_kva must be positive");
        adjacency[l.from].push_back(l.to);
        adjacency[l.to].push_back(l.from);
    }

    // Every subgrid with more than one bus must be connected by its lines.
    std::map<std::string, std::vector<std::string>> subgrid_buses;
    for (const auto& b : sys.buses)
        subgrid_buses[b.subgrid].push_back(b.id);
    for (const auto& [sg, members] : subgrid_buses) {
        std::set<std::string> seen;
        std::queue<std::string> work;
        work.push(members.front());
        seen.insert(members.front());
        while (!work.empty()) {
            std::string cur = work.front();
            work.pop();
            for (const auto& nb : adjacency[cur])
                if (seen.insert(nb).second)
                    work.push(nb);
        }
        for (const auto& m : members)
            if (!seen.count(m))
                fail("subgrid '" + sg + "'", "bus '" + m + "' is not connected");
    }

    std::set<std::string> asset_ids;
    auto claim_id = [&](const std::string& id, const std::string& where) {
        if (id.empty())
            fail(where, "empty id");
        if (!asset_ids.insert(id).second)
            fail(where, "duplicate asset id");
    };

    std::map<std::string, int> ac_machines_per_subgrid;
    for (const auto& m : sys.machines) {
        std::string where = "machine '" + m.id + "'";
        claim_id(m.id, where);
        if (!bus_ids.count(m.bus))
            fail(where, "bus '" + m.bus + "' does not exist");
        if (m.p_min_kw < 0.0 || m.p_max_kw < m.p_min_kw)
            fail(where, "0 <= p_min_kw <= p_max_kw violated");
        if (m.p_max_kw <= 0.0)
            fail(where, "p_max_kw must be positive");
        if (m.s_max_kva < m.p_max_kw)
            fail(where, "s_max_kva below p_max_kw");
        if (m.c_gen < 0.0)
            fail(where, "negative c_gen");
        const BusSpec& b = sys.bus(m.bus);
        if (b.kind == BusKind::ac) {
            if (m.h <= 0.0 || m.t_d0_prime <= 0.0)
                fail(where, "h_s and t_d0_prime_s must be positive");
            if (!(0.0 < m.x_d_prime && m.x_d_prime < m.x_d))
                fail(where, "0 < x_d_prime < x_d violated");
            if (m.gov.d_p <= 0.0 || m.gov.d_i < 0.0 || m.gov.t_g <= 0.0)
                fail(where, "governor gains/lag out of range");
            if (m.avr.k_a <= 0.0 || m.avr.t_a <= 0.0 || m.avr.k_e <= 0.0 ||
                m.avr.t_e <= 0.0 || m.avr.k_f < 0.0 || m.avr.t_f <= 0.0)
                fail(where, "avr parameters out of range");
            ac_machines_per_subgrid[b.subgrid]++;
        }
        if (m.sizing && m.cost_class.empty())
            fail(where, "sizeable asset needs a cost_class");
        if (!m.cost_class.empty() && !sys.costs.count(m.cost_class))
            fail(where, "cost class '" + m.cost_class + "' not in costs");
    }
    for (const auto& [sg, kind] : subgrid_kind)
        if (kind == BusKind::ac && ac_machines_per_subgrid[sg] == 0)
            fail("subgrid '" + sg + "'", "AC subgrid needs at least one machine");

    for (const auto& r : sys.ibrs) {
        std::string where = "ibr '" + r.id + "'";
        claim_id(r.id, where);
        if (!bus_ids.count(r.bus))
            fail(where, "bus '" + r.bus + "' does not exist");
        const BusSpec& b = sys.bus(r.bus);
        if (r.kind == IbrKind::wt && b.kind != BusKind::ac)
            fail(where, "wt units must sit on an AC bus");
        if (r.kind == IbrKind::pv && b.kind != BusKind::dc)
            fail(where, "pv units must sit on a DC bus");
        if (r.p_max_kw <= 0.0 || r.s_max_kva < r.p_max_kw)
            fail(where, "0 < p_max_kw <= s_max_kva violated");
        if (r.kind == IbrKind::wt && (r.l_filter <= 0.0 || r.k_p <= 0.0 || r.k_i <= 0.0))
            fail(where, "current-loop parameters must be positive");
        if (r.d_v < 0.0)
            fail(where, "negative d_v");
        if (r.availability_profile.empty())
            fail(where, "availability_profile is required");
        check_profile_ref(sys, r.availability_profile, where, false, true);
        if (r.sizing && r.cost_class.empty())
            fail(where, "sizeable asset needs a cost_class");
        if (!r.cost_class.empty() && !sys.costs.count(r.cost_class))
            fail(where, "cost class '" + r.cost_class + "' not in costs");
    }

    for (const auto& e : sys.storages) {
        std::string where = "storage '" + e.id + "'";
        claim_id(e.id, where);
        if (!bus_ids.count(e.bus))
            fail(where, "bus '" + e.bus + "' does not exist");
        if (e.p_max_kw <= 0.0 || e.s_max_kva < e.p_max_kw)
            fail(where, "0 < p_max_kw <= s_max_kva violated");
        if (!(0.0 <= e.e_min_kwh && e.e_min_kwh <= e.e_init_kwh && e.e_init_kwh <= e.e_max_kwh))
            fail(where, "0 <= e_min <= e_init <= e_max violated");
        if (!(0.0 < e.eta && e.eta <= 1.0))
            fail(where, "eta must lie in (0, 1]");
        if (e.sizing && e.cost_class.empty())
            fail(where, "sizeable asset needs a cost_class");
        if (!e.cost_class.empty() && !sys.costs.count(e.cost_class))
            fail(where, "cost class '" + e.cost_class + "' not in costs");
    }

    if (sys.ic) {
        const IcParams& ic = *sys.ic;
        if (!bus_ids.count(ic.ac_bus) || !bus_ids.count(ic.dc_bus))
            fail("ic", "endpoint bus does not exist");
        if (sys.bus(ic.ac_bus).kind != BusKind::ac)
            fail("ic", "ac_bus '" + ic.ac_bus + "' is not an AC bus");
        if (sys.bus(ic.dc_bus).kind != BusKind::dc)
            fail("ic", "dc_bus '" + ic.dc_bus + "' is not a DC bus");
        if (ic.gamma_p <= 0.0 || ic.gamma_q <= 0.0)
            fail("ic", "gamma_p and gamma_q must be positive");
        if (ic.s_max_kva <= 0.0)
            fail("ic", "s_max_kva must be positive");
        if (!(ic.f_band_hz[0] < sys.f_hz && sys.f_hz < ic.f_band_hz[1]))
            fail("ic", "f_band_hz must bracket the nominal frequency");
        if (!(ic.vdc_band[0] < 1.0 && 1.0 < ic.vdc_band[1]))
            fail("ic", "vdc_band must bracket 1 p.u.");
        if (ic.sizing && ic.cost_class.empty())
            fail("ic", "sizeable asset needs a cost_class");
        if (!ic.cost_class.empty() && !sys.costs.count(ic.cost_class))
            fail("ic", "cost class '" + ic.cost_class + "' not in costs");
    }

    if (sys.tie) {
        if (!bus_ids.count(sys.tie->bus))
            fail("grid_tie", "bus '" + sys.tie->bus + "' does not exist");
        if (sys.bus(sys.tie->bus).kind != BusKind::ac)
            fail("grid_tie", "tie bus must be AC");
        check_profile_ref(sys, sys.tie->profile, "grid_tie", true, false);
    }

    for (const auto& b : sys.buses) {
        if (b.load_profile.empty())
            continue;
        check_profile_ref(sys, b.load_profile, "bus '" + b.id + "'",
                          b.kind == BusKind::ac, false);
    }

    if (sys.days.empty())
        fail("days", "at least one representative day is required");
    std::set<std::string> day_names;
    double weight_sum = 0.0;
    for (const auto& d : sys.days) {
        if (!day_names.insert(d.name).second)
            fail("day '" + d.name + "'", "duplicate day name");
        if (d.weight <= 0.0)
            fail("day '" + d.name + "'", "weight must be positive");
        weight_sum += d.weight;
    }
    if (std::abs(weight_sum - 365.0) > 1e-6)
        fail("days", "weights sum to " + std::to_string(weight_sum) + ", expected 365");

    for (const auto& [cname, c] : sys.costs) {
        std::string where = "cost class '" + cname + "'";
        if (c.capital_per_kw < 0.0 || c.om_per_kw_yr < 0.0)
            fail(where, "negative cost");
        if (c.discount < 0.0)
            fail(where, "negative discount rate");
        if (c.lifetime_yr < 1)
            fail(where, "lifetime_yr must be at least 1");
    }
}

void save_system(const HmgSystem& sys, const std::string& path) {
    ordered_json j;
    j["name"] = sys.name;
    j["base_kva"] = sys.base_kva;
    j["f_hz"] = sys.f_hz;
    j["slots_per_day"] = sys.slots_per_day;
    j["slot_hours"] = sys.slot_hours;
    j["limits"] = {{"f_min_hz", sys.limits.f_min_hz},
                   {"f_max_hz", sys.limits.f_max_hz},
                   {"rocof_hz_s", sys.limits.rocof_hz_s},
                   {"v_min", sys.limits.v_min},
                   {"v_max", sys.limits.v_max}};

    j["buses"] = ordered_json::array();
    for (const auto& b : sys.buses) {
        ordered_json bj{{"id", b.id},
                        {"kind", b.kind == BusKind::ac ? "ac" : "dc"},
                        {"subgrid", b.subgrid},
                        {"v_nominal", b.v_nominal},
                        {"v_min", b.v_min},
                        {"v_max", b.v_max}};
        if (!b.load_profile.empty())
            bj["load_profile"] = b.load_profile;
        j["buses"].push_back(std::move(bj));
    }

    j["lines"] = ordered_json::array();
    for (const auto& l : sys.lines) {
        ordered_json lj{{"from", l.from}, {"to", l.to}, {"r", l.r}};
        if (l.x)
            lj["x"] = *l.x;
        lj["s_max_kva"] = l.s_max_kva;
        j["lines"].push_back(std::move(lj));
    }

    j["machines"] = ordered_json::array();
    for (const auto& m : sys.machines) {
        ordered_json mj{{"id", m.id},
                        {"bus", m.bus},
                        {"p_min_kw", m.p_min_kw},
                        {"p_max_kw", m.p_max_kw},
                        {"s_max_kva", m.s_max_kva},
                        {"c_gen", m.c_gen},
                        {"h_s", m.h},
                        {"x_d", m.x_d},
                        {"x_d_prime", m.x_d_prime},
                        {"t_d0_prime_s", m.t_d0_prime}};
        mj["governor"] = {{"d_p", m.gov.d_p}, {"d_i", m.gov.d_i}, {"t_g_s", m.gov.t_g}};
        mj["avr"] = {{"k_a", m.avr.k_a}, {"t_a_s", m.avr.t_a}, {"k_e", m.avr.k_e},
                     {"t_e_s", m.avr.t_e}, {"k_f", m.avr.k_f}, {"t_f_s", m.avr.t_f}};
        if (!m.cost_class.empty())
            mj["cost_class"] = m.cost_class;
        if (m.sizing)
            mj["sizing"] = dump_sizing(*m.sizing);
        j["machines"].push_back(std::move(mj));
    }

    j["ibrs"] = ordered_json::array();
    for (const auto& r : sys.ibrs) {
        ordered_json rj{{"id", r.id},
                        {"bus", r.bus},
                        {"kind", r.kind == IbrKind::wt ? "wt" : "pv"},
                        {"p_max_kw", r.p_max_kw},
                        {"s_max_kva", r.s_max_kva},
                        {"l_filter", r.l_filter},
                        {"k_p", r.k_p},
                        {"k_i", r.k_i},
                        {"d_v", r.d_v},
                        {"availability_profile", r.availability_profile}};
        if (!r.cost_class.empty())
            rj["cost_class"] = r.cost_class;
        if (r.sizing)
            rj["sizing"] = dump_sizing(*r.sizing);
        j["ibrs"].push_back(std::move(rj));
    }

    j["storages"] = ordered_json::array();
    for (const auto& e : sys.storages) {
        ordered_json ej{{"id", e.id},
                        {"bus", e.bus},
                        {"p_max_kw", e.p_max_kw},
                        {"s_max_kva", e.s_max_kva},
                        {"e_max_kwh", e.e_max_kwh},
                        {"e_min_kwh", e.e_min_kwh},
                        {"e_init_kwh", e.e_init_kwh},
                        {"eta", e.eta}};
        if (!e.cost_class.empty())
            ej["cost_class"] = e.cost_class;
        if (e.sizing)
            ej["sizing"] = dump_sizing(*e.sizing);
        j["storages"].push_back(std::move(ej));
    }

    if (sys.ic) {
        const IcParams& ic = *sys.ic;
        ordered_json cj{{"ac_bus", ic.ac_bus},
                        {"dc_bus", ic.dc_bus},
                        {"s_max_kva", ic.s_max_kva},
                        {"gamma_p", ic.gamma_p},
                        {"gamma_q", ic.gamma_q},
                        {"q_nominal_kvar", ic.q_nominal_kvar},
                        {"f_band_hz", {ic.f_band_hz[0], ic.f_band_hz[1]}},
                        {"vdc_band", {ic.vdc_band[0], ic.vdc_band[1]}}};
        if (!ic.cost_class.empty())
            cj["cost_class"] = ic.cost_class;
        if (ic.sizing)
            cj["sizing"] = dump_sizing(*ic.sizing);
        j["ic"] = std::move(cj);
    }

    if (sys.tie)
        j["grid_tie"] = {{"bus", sys.tie->bus}, {"profile", sys.tie->profile}};

    j["days"] = ordered_json::array();
    for (const auto& d : sys.days) {
        ordered_json dj{{"name", d.name}, {"weight", d.weight}};
        ordered_json ps = ordered_json::object();
        for (const auto& [pname, s] : d.series) {
            ordered_json sj{{"p", s.p}};
            if (!s.q.empty())
                sj["q"] = s.q;
            ps[pname] = std::move(sj);
        }
        dj["profiles"] = std::move(ps);
        j["days"].push_back(std::move(dj));
    }

    j["costs"] = ordered_json::object();
    for (const auto& [cname, c] : sys.costs)
        j["costs"][cname] = {{"capital_per_kw", c.capital_per_kw},
                             {"om_per_kw_yr", c.om_per_kw_yr},
                             {"discount", c.discount},
                             {"lifetime_yr", c.lifetime_yr}};

    std::ofstream out(path);
    if (!out)
        throw ValidationError("cannot write system file '" + path + "'");
    out << j.dump(2) << "\n";
}

std::vector<std::string> sizeable_assets(const HmgSystem& sys, bool include_ic) {
    std::vector<std::string> ids;
    for (const auto& m : sys.machines)
        if (m.sizing)
            ids.push_back(m.id);
    for (const auto& r : sys.ibrs)
        if (r.sizing)
            ids.push_back(r.id);
    for (const auto& e : sys.storages)
        if (e.sizing)
            ids.push_back(e.id);
    if (include_ic && sys.ic && sys.ic->sizing)
        ids.push_back("ic");
    return ids;
}

namespace {

int nameplate_blocks(double kw, const SizingRange& s, const std::string& where) {
    double blocks = kw / s.unit_kw;
    double rounded = std::round(blocks);
    if (std::abs(blocks - rounded) > 1e-9)
        fail(where, "nameplate " + std::to_string(kw) + " kW is not a multiple of unit_kw");
    return static_cast<int>(rounded);
}

} // namespace

SizingDecision default_sizing(const HmgSystem& sys, bool include_ic) {
    SizingDecision d;
    for (const auto& m : sys.machines)
        if (m.sizing)
            d.blocks[m.id] = nameplate_blocks(m.p_max_kw, *m.sizing, "machine '" + m.id + "'");
    for (const auto& r : sys.ibrs)
        if (r.sizing)
            d.blocks[r.id] = nameplate_blocks(r.p_max_kw, *r.sizing, "ibr '" + r.id + "'");
    for (const auto& e : sys.storages)
        if (e.sizing)
            d.blocks[e.id] = nameplate_blocks(e.p_max_kw, *e.sizing, "storage '" + e.id + "'");
    if (include_ic && sys.ic && sys.ic->sizing)
        d.blocks["ic"] = nameplate_blocks(sys.ic->s_max_kva, *sys.ic->sizing, "ic");
    return d;
}

HmgSystem apply_sizing(const HmgSystem& sys, const SizingDecision& sizing) {
    HmgSystem out = sys;
    std::set<std::string> used;

    auto capacity = [&](const std::string& id, const SizingRange& range,
                        double nameplate) -> std::optional<double> {
        auto it = sizing.blocks.find(id);
        if (it == sizing.blocks.end())
            return std::nullopt;
        used.insert(id);
        if (it->second < 0)
            fail("sizing", "asset '" + id + "' has negative blocks");
        double kw = it->second * range.unit_kw;
        if (kw != 0.0 && (kw < range.min_kw - 1e-9 || kw > range.max_kw + 1e-9))
            fail("sizing", "asset '" + id + "' capacity " + std::to_string(kw) +
                               " kW outside [" + std::to_string(range.min_kw) + ", " +
                               std::to_string(range.max_kw) + "]");
        (void)nameplate;
        return kw;
    };

    std::vector<MachineParams> machines;
    for (auto m : out.machines) {
        if (m.sizing) {
            if (auto kw = capacity(m.id, *m.sizing, m.p_max_kw)) {
                if (*kw == 0.0)
                    continue;
                double f = *kw / m.p_max_kw;
                m.p_min_kw *= f;
                m.p_max_kw *= f;
                m.s_max_kva *= f;
            }
        }
        machines.push_back(std::move(m));
    }
    out.machines = std::move(machines);

    std::vector<IbrParams> ibrs;
    for (auto r : out.ibrs) {
        if (r.sizing) {
            if (auto kw = capacity(r.id, *r.sizing, r.p_max_kw)) {
                if (*kw == 0.0)
                    continue;
                double f = *kw / r.p_max_kw;
                r.p_max_kw *= f;
                r.s_max_kva *= f;
            }
        }
        ibrs.push_back(std::move(r));
    }
    out.ibrs = std::move(ibrs);

    std::vector<EsParams> storages;
    for (auto e : out.storages) {
        if (e.sizing) {
            if (auto kw = capacity(e.id, *e.sizing, e.p_max_kw)) {
                if (*kw == 0.0)
                    continue;
                double f = *kw / e.p_max_kw;
                e.p_max_kw *= f;
                e.s_max_kva *= f;
                e.e_max_kwh *= f;
                e.e_min_kwh *= f;
                e.e_init_kwh *= f;
            }
        }
        storages.push_back(std::move(e));
    }
    out.storages = std::move(storages);

    if (out.ic && out.ic->sizing) {
        if (auto kw = capacity("ic", *out.ic->sizing, out.ic->s_max_kva)) {
            if (*kw == 0.0)
                out.ic.reset();
            else
                out.ic->s_max_kva = *kw;
        }
    }

    for (const auto& [id, blocks] : sizing.blocks) {
        (void)blocks;
        if (!used.count(id))
            fail("sizing", "asset '" + id + "' is unknown or not sizeable");
    }
    return out;
}

double annualized_investment_cost(const HmgSystem& sys, const SizingDecision& sizing) {
    double total = 0.0;
    auto add = [&](const std::string& id, const std::string& cost_class,
                   const SizingRange& range) {
        auto it = sizing.blocks.find(id);
        if (it == sizing.blocks.end())
            return;
        if (cost_class.empty() || !sys.costs.count(cost_class))
            fail("costs", "asset '" + id + "' has no usable cost class");
        double kw = it->second * range.unit_kw;
        total += kw * sys.costs.at(cost_class).annual_per_kw();
    };
    for (const auto& m : sys.machines)
        if (m.sizing)
            add(m.id, m.cost_class, *m.sizing);
    for (const auto& r : sys.ibrs)
        if (r.sizing)
            add(r.id, r.cost_class, *r.sizing);
    for (const auto& e : sys.storages)
        if (e.sizing)
            add(e.id, e.cost_class, *e.sizing);
    if (sys.ic && sys.ic->sizing)
        add("ic", sys.ic->cost_class, *sys.ic->sizing);
    for (const auto& [id, blocks] : sizing.blocks) {
        (void)blocks;
        bool known = id == "ic" && sys.ic && sys.ic->sizing;
        for (const auto& m : sys.machines)
            known |= m.id == id && m.sizing.has_value();
        for (const auto& r : sys.ibrs)
            known |= r.id == id && r.sizing.has_value();
        for (const auto& e : sys.storages)
            known |= e.id == id && e.sizing.has_value();
        if (!known)
            fail("costs", "sizing entry '" + id + "' is unknown or not sizeable");
    }
    return total;
}

} // namespace hmg
