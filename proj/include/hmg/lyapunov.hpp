#pragma once

#include <map>
#include <string>
#include <vector>

#include "hmg/dispatch.hpp"
#include "hmg/events.hpp"
#include "hmg/netmodel.hpp"

namespace hmg {

/// Per-storage backlog of discharged energy, q = e_max - e in kWh. Keeping
/// the queue instead of the energy itself turns the daily state-of-charge
/// coupling into a scalar that each hourly dispatch can price on its own:
/// a large q means the unit is depleted and charging should look cheap.
struct QueueState {
    int slot = 0;
    std::map<std::string, double> q_kwh;

    bool operator==(const QueueState&) const = default;

    double get(const std::string& id) const {
        auto it = q_kwh.find(id);
        return it == q_kwh.end() ? 0.0 : it->second;
    }
};

/// Queue at the start of the day, from each storage's initial energy.
QueueState initial_queue(const HmgSystem& sys);

/// Queue equivalent of a stored-energy snapshot (id -> kWh).
QueueState queue_from_energy(const HmgSystem& sys, const std::map<std::string, double>& e_kwh);

/// Stored energy implied by a queue (the exact inverse of the above).
std::map<std::string, double> energy_from_queue(const HmgSystem& sys, const QueueState& q);

/// Rate at which one storage's queue grows, in kW: p_d / eta - eta * p_c for
/// non-negative charge/discharge magnitudes. Losses are charged to the
/// queue on both legs so that q + e stays exactly e_max along any schedule.
double queue_input_kw(const EsParams& es, double p_c_kw, double p_d_kw);

/// Advances every queue by one interval of `dt_h` hours under the given
/// dispatch (per-unit magnitudes on the system base). Out-of-range results
/// are reported via ValidationError; the per-slot dispatch bounds are meant
/// to prevent them.
QueueState queue_update(const HmgSystem& sys, const QueueState& q, const DispatchSetpoints& d,
                        double dt_h);

/// Drift-plus-penalty score of a candidate slot dispatch: sum_k q_k * u_k
/// + v * cost, with u_k the candidate's queue input in kW and cost the
/// candidate's realized operating cost (currency). The additive drift
/// constant is argmin-invariant and therefore omitted.
double drift_bound_objective(const HmgSystem& sys, const QueueState& q,
                             const DispatchSetpoints& candidate, double v);

/// Per-slot weighting of the cost term. Size 1 means one value for the
/// whole day; otherwise one entry per slot.
struct VSchedule {
    std::vector<double> v;

    double at(int slot) const;
    static VSchedule constant(double value);
    /// Off-peak value everywhere except slots [peak_begin, peak_end).
    static VSchedule two_level(double off_peak, double peak, int slots_per_day = 24,
                               int peak_begin = 17, int peak_end = 21);
};

/// One day of hourly dispatch produced by chaining per-slot solves through
/// the queue recursion.
struct DaySchedule {
    std::vector<DispatchSetpoints> slots;
    std::vector<QueueState> queues; // queues[t] = state entering slot t; size slots+1
    std::vector<double> slot_cost;  // realized operating cost per slot, currency
    double cost = 0.0;              // sum of slot_cost
};

/// Decoupled daily operation: solves the drift-plus-penalty dispatch slot by
/// slot, carrying the queues forward. `events_by_slot` injects transient
/// contingencies into specific slots; other slots solve the static problem.
/// Throws InfeasibleError naming the slot that failed.
DaySchedule schedule_day(const HmgSystem& sys, int day, const VSchedule& v_sched,
                         const std::map<int, EventSet>& events_by_slot = {});

/// Time-coupled daily optimum used as the gap reference: one nonlinear
/// program over all slots with the storage energies chained exactly, pure
/// operating-cost objective, no contingencies. Returns the daily cost and,
/// optionally, the optimizing schedule.
double daily_oracle(const HmgSystem& sys, int day,
                    std::vector<DispatchSetpoints>* schedule = nullptr);

} // namespace hmg
