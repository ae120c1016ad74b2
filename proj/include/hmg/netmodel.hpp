#pragma once

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "hmg/common.hpp"

namespace hmg {

// All structs below keep the numbers exactly as they appear in the system
// file (kW, kvar, kWh, Hz, seconds); per-unit views are derived on demand so
// that a load -> save -> load round trip is bit-exact. Electrical machine
// parameters are on the machine's own MVA base, network impedances on the
// system base.

enum class BusKind { ac, dc };

struct BusSpec {
    std::string id;
    BusKind kind = BusKind::ac;
    std::string subgrid;
    std::string load_profile; // empty: no load at this bus
    double v_nominal = 1.0;   // p.u.
    double v_min = 0.9;       // p.u.
    double v_max = 1.1;       // p.u.

    bool operator==(const BusSpec&) const = default;
};

struct LineSpec {
    std::string from;
    std::string to;
    double r = 0.0;                // p.u. on system base
    std::optional<double> x;      // p.u.; must be absent on DC lines
    double s_max_kva = 0.0;

    bool operator==(const LineSpec&) const = default;
};

/// Integer-block sizing range for one asset. Assets without a `sizing`
/// entry in the file keep their nameplate capacity during planning.
struct SizingRange {
    double unit_kw = 1.0;
    double min_kw = 0.0;
    double max_kw = 0.0;

    bool operator==(const SizingRange&) const = default;
};

struct GovernorParams {
    double d_p = 20.0;  // p.u. power per p.u. speed deviation, machine base
    double d_i = 5.0;   // p.u. power per p.u. speed-deviation integral
    double t_g = 0.5;   // prime-mover lag, s

    bool operator==(const GovernorParams&) const = default;
};

struct AvrParams {
    double k_a = 200.0;
    double t_a = 0.02; // s
    double k_e = 1.0;
    double t_e = 0.3;  // s
    double k_f = 0.06;
    double t_f = 1.0;  // s

    bool operator==(const AvrParams&) const = default;
};

/// Synchronous machine (flux-decay model) plus its controllers. On DC buses
/// a "machine" degenerates to a dispatchable constant-power source and the
/// dynamic fields are ignored.
struct MachineParams {
    std::string id;
    std::string bus;
    double p_min_kw = 0.0;
    double p_max_kw = 0.0;
    double s_max_kva = 0.0;     // default: p_max_kw / 0.9
    double c_gen = 0.0;         // fuel cost, currency per kWh
    double h = 2.0;             // inertia constant, s, machine base
    double x_d = 1.8;           // p.u., machine base
    double x_d_prime = 0.3;     // p.u., machine base
    double t_d0_prime = 5.0;    // s
    GovernorParams gov;
    AvrParams avr;
    std::string cost_class;
    std::optional<SizingRange> sizing;

    bool operator==(const MachineParams&) const = default;

    double p_min_pu(double base_kva) const { return p_min_kw / base_kva; }
    double p_max_pu(double base_kva) const { return p_max_kw / base_kva; }
    double s_max_pu(double base_kva) const { return s_max_kva / base_kva; }
    /// Machine size as a fraction of the system base.
    double s_frac(double base_kva) const { return s_max_kva / base_kva; }
    /// Inertia constant referred to the system base.
    double h_sys(double base_kva) const { return h * s_frac(base_kva); }
    double x_d_sys(double base_kva) const { return x_d / s_frac(base_kva); }
    double x_dp_sys(double base_kva) const { return x_d_prime / s_frac(base_kva); }
    /// Governor gains referred to the system base (input: p.u. speed).
    double d_p_sys(double base_kva) const { return gov.d_p * s_frac(base_kva); }
    double d_i_sys(double base_kva) const { return gov.d_i * s_frac(base_kva); }
};

enum class IbrKind { wt, pv };

/// Inverter-based resource. WT units sit on AC buses and carry the
/// current-loop model; PV units sit on DC buses and inject power directly.
struct IbrParams {
    std::string id;
    std::string bus;
    IbrKind kind = IbrKind::wt;
    double p_max_kw = 0.0;
    double s_max_kva = 0.0;      // default: p_max_kw
    double l_filter = 0.1;
    double k_p = 1.0;
    double k_i = 10.0;
    double d_v = 5.0;            // voltage-droop gain, p.u. Q per p.u. V, own base
    std::string availability_profile;
    std::string cost_class;
    std::optional<SizingRange> sizing;

    bool operator==(const IbrParams&) const = default;

    double p_max_pu(double base_kva) const { return p_max_kw / base_kva; }
    double s_max_pu(double base_kva) const { return s_max_kva / base_kva; }
    double d_v_sys(double base_kva) const { return d_v * s_max_kva / base_kva; }
};

struct EsParams {
    std::string id;
    std::string bus;
    double p_max_kw = 0.0;   // charge and discharge magnitude limit
    double s_max_kva = 0.0;  // default: p_max_kw
    double e_max_kwh = 0.0;  // default: 2 kWh per kW
    double e_min_kwh = 0.0;
    double e_init_kwh = 0.0; // default: e_max / 2
    double eta = 0.95;       // one-way efficiency
    std::string cost_class;
    std::optional<SizingRange> sizing;

    bool operator==(const EsParams&) const = default;

    double p_max_pu(double base_kva) const { return p_max_kw / base_kva; }
    double s_max_pu(double base_kva) const { return s_max_kva / base_kva; }
};

/// Interlinking converter between one AC and one DC subgrid. The droop
/// couples normalized AC frequency to normalized DC voltage.
struct IcParams {
    std::string ac_bus;
    std::string dc_bus;
    std::string ac_subgrid; // derived from ac_bus at load time
    std::string dc_subgrid;
    double s_max_kva = 50.0;
    double gamma_p = 2.0;       // droop constant in p = -(w_hat - v_hat)/gamma_p
    double gamma_q = 2.0;
    double q_nominal_kvar = 0.0;
    double f_band_hz[2] = {49.2, 50.8}; // normalization band for frequency
    double vdc_band[2] = {0.9, 1.1};    // normalization band for DC voltage
    std::string cost_class;
    std::optional<SizingRange> sizing;

    bool operator==(const IcParams&) const = default;

    double s_max_pu(double base_kva) const { return s_max_kva / base_kva; }
    double q_nominal_pu(double base_kva) const { return q_nominal_kvar / base_kva; }
    double omega_min() const { return 2.0 * pi * f_band_hz[0]; }
    double omega_max() const { return 2.0 * pi * f_band_hz[1]; }
};

/// Optional upstream connection, modelled as a fixed power import that an
/// islanding event removes.
struct GridTie {
    std::string bus;
    std::string profile;

    bool operator==(const GridTie&) const = default;
};

struct CostEntry {
    double capital_per_kw = 0.0;
    double om_per_kw_yr = 0.0;
    double discount = 0.0;
    int lifetime_yr = 1;

    bool operator==(const CostEntry&) const = default;

    double annual_per_kw() const {
        return capital_per_kw * annuity_factor(discount, lifetime_yr) + om_per_kw_yr;
    }
};

/// One named series of a representative day: p (and q for AC loads) in file
/// units, or a dimensionless availability fraction.
struct ProfileSeries {
    std::vector<double> p;
    std::vector<double> q;

    bool operator==(const ProfileSeries&) const = default;
};

struct DayProfile {
    std::string name;
    double weight = 0.0; // days per year represented by this profile
    std::map<std::string, ProfileSeries> series;

    bool operator==(const DayProfile&) const = default;
};

struct SystemLimits {
    double f_min_hz = 49.2;
    double f_max_hz = 50.8;
    double rocof_hz_s = 1.0;
    double v_min = 0.9;
    double v_max = 1.1;

    bool operator==(const SystemLimits&) const = default;
};

struct HmgSystem {
    std::string name;
    double base_kva = 100.0;
    double f_hz = 50.0;
    int slots_per_day = 24;
    double slot_hours = 1.0;
    SystemLimits limits;
    std::vector<BusSpec> buses;
    std::vector<LineSpec> lines;
    std::vector<MachineParams> machines;
    std::vector<IbrParams> ibrs;
    std::vector<EsParams> storages;
    std::optional<IcParams> ic;
    std::optional<GridTie> tie;
    std::vector<DayProfile> days;
    std::map<std::string, CostEntry> costs;

    bool operator==(const HmgSystem&) const = default;

    double omega0() const { return 2.0 * pi * f_hz; }

    int bus_index(const std::string& id) const;
    const BusSpec& bus(const std::string& id) const;
    const DayProfile& day(int d) const;
    /// Series lookup with day/slot bounds checking; throws ValidationError
    /// if the profile is missing or too short.
    const ProfileSeries& profile(int d, const std::string& name) const;

    /// AC load at a bus in p.u. (p, q); zero if the bus carries no load.
    std::pair<double, double> load_pu(int d, int slot, const BusSpec& b) const;
    /// Availability fraction of an IBR in [0, 1].
    double availability(int d, int slot, const IbrParams& r) const;
    /// Tie import in p.u. (p, q); zero if no tie is declared.
    std::pair<double, double> tie_pu(int d, int slot) const;
};

double to_per_unit(double value, double base);
double from_per_unit(double value, double base);

/// Parses and validates a system file. Throws ValidationError with the
/// offending record named on any violated invariant.
HmgSystem load_system(const std::string& path);
void save_system(const HmgSystem& sys, const std::string& path);
void validate(const HmgSystem& sys);

/// Installed capacity per sizeable asset, in integer blocks of that asset's
/// unit_kw. Assets absent from the map keep their nameplate capacity.
struct SizingDecision {
    std::map<std::string, int> blocks;

    bool operator==(const SizingDecision&) const = default;
};

/// Ordered ids of assets that declare a sizing range (machines, IBRs,
/// storages, then the IC); `include_ic` gates the converter entry.
std::vector<std::string> sizeable_assets(const HmgSystem& sys, bool include_ic);

/// Nameplate capacities expressed as blocks. Requires every sizeable
/// nameplate to be an exact multiple of its unit size.
SizingDecision default_sizing(const HmgSystem& sys, bool include_ic);

/// Returns a copy of the system with capacities replaced according to the
/// sizing. Capacity scales limits and stored energy proportionally; an
/// asset sized to zero blocks is removed outright.
HmgSystem apply_sizing(const HmgSystem& sys, const SizingDecision& sizing);

/// Annual capital recovery plus fixed O&M for the sized assets, in currency
/// per year. Only assets present in `sizing.blocks` are counted.
double annualized_investment_cost(const HmgSystem& sys, const SizingDecision& sizing);

} // namespace hmg
