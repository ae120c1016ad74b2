#pragma once

#include <map>
#include <string>

namespace hmg {

/// One slot's operating point, all in per unit on the system base.
/// Storage charge/discharge are non-negative magnitudes; the bus injection is
/// discharge - charge. es_mode carries the (possibly relaxed) mode indicator
/// used by the dispatch optimizer: 1 = charging leg active, 0 = discharging.
struct DispatchSetpoints {
    int day = 0;
    int slot = 0;
    std::map<std::string, double> p_dg;
    std::map<std::string, double> q_dg;
    std::map<std::string, double> p_ibr;
    std::map<std::string, double> q_ibr;
    std::map<std::string, double> es_charge;
    std::map<std::string, double> es_discharge;
    std::map<std::string, double> q_es;
    std::map<std::string, double> es_mode;
    double v_slack = 1.0;
    /// Realized operating cost of the slot (currency), filled by the solver.
    double cost = 0.0;

    bool operator==(const DispatchSetpoints&) const = default;

    double get(const std::map<std::string, double>& m, const std::string& id) const {
        auto it = m.find(id);
        return it == m.end() ? 0.0 : it->second;
    }
    double es_net(const std::string& id) const {
        return get(es_discharge, id) - get(es_charge, id);
    }
};

DispatchSetpoints load_dispatch(const std::string& path);
void save_dispatch(const DispatchSetpoints& d, const std::string& path);

} // namespace hmg
