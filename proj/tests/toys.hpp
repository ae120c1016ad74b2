#pragma once

#include "hmg/dispatch.hpp"
#include "hmg/netmodel.hpp"

namespace hmg::testing {

/// Single machine at b1 feeding a load at b2 over one line. Flat 24-slot
/// profiles so any slot sees the same operating point.
inline HmgSystem two_bus(double p_kw, double q_kvar, double r = 0.1, double x = 0.2,
                         double mach_kva = 120.0) {
    HmgSystem s;
    s.name = "toy2";
    s.base_kva = 100.0;
    s.f_hz = 50.0;
    s.slots_per_day = 24;

    BusSpec b1;
    b1.id = "b1";
    b1.subgrid = "a";
    BusSpec b2 = b1;
    b2.id = "b2";
    b2.load_profile = "ld";
    s.buses = {b1, b2};

    LineSpec l;
    l.from = "b1";
    l.to = "b2";
    l.r = r;
    l.x = x;
    l.s_max_kva = 500.0;
    s.lines = {l};

    MachineParams g;
    g.id = "g1";
    g.bus = "b1";
    g.p_max_kw = 100.0;
    g.s_max_kva = mach_kva;
    s.machines = {g};

    DayProfile d;
    d.name = "flat";
    d.weight = 365.0;
    ProfileSeries ld;
    ld.p.assign(24, p_kw);
    ld.q.assign(24, q_kvar);
    d.series["ld"] = ld;
    s.days = {d};
    return s;
}

inline DispatchSetpoints empty_dispatch() {
    DispatchSetpoints d;
    d.day = 0;
    d.slot = 0;
    return d;
}

} // namespace hmg::testing
