#pragma once

#include <string>
#include <vector>

namespace hmg {

enum class ContingencyKind { wind_drop, load_step, islanding, ic_outage };

/// One disturbance: a renewable availability drop, a load step, loss of the
/// upstream tie, or an interlinking-converter outage. Times are seconds on
/// the simulation clock; the change applies as a step at start_s and is
/// reverted as a step at start_s + duration_s.
struct Contingency {
    ContingencyKind kind = ContingencyKind::load_step;
    std::string location; // ibr id (wind_drop) or bus id (load_step)
    double magnitude = 0.0;
    double start_s = 0.0;
    double duration_s = 0.0;

    bool operator==(const Contingency&) const = default;

    bool active_at(double t) const { return t > start_s && t <= start_s + duration_s; }
    double end_s() const { return start_s + duration_s; }
};

using EventSet = std::vector<Contingency>;

std::string to_string(ContingencyKind k);
ContingencyKind contingency_kind_from(const std::string& s);

/// Reads {"contingencies": [...]} (also accepts the key "events" or a bare
/// array) from a JSON file.
EventSet load_events(const std::string& path);
void save_events(const EventSet& events, const std::string& path);

} // namespace hmg
