#include "hmg/lyapunov.hpp"

#include <cmath>
#include <sstream>

#include "hmg/common.hpp"
#include "hmg/tscopf.hpp"

namespace hmg {

QueueState initial_queue(const HmgSystem& sys) {
    QueueState q;
    for (const auto& e : sys.storages)
        q.q_kwh[e.id] = e.e_max_kwh - e.e_init_kwh;
    return q;
}

QueueState queue_from_energy(const HmgSystem& sys, const std::map<std::string, double>& e_kwh) {
    QueueState q;
    for (const auto& e : sys.storages) {
        auto it = e_kwh.find(e.id);
        const double energy = it == e_kwh.end() ? e.e_init_kwh : it->second;
        if (energy < e.e_min_kwh - 1e-9 || energy > e.e_max_kwh + 1e-9)
            throw ValidationError("storage '" + e.id + "' energy outside its capacity range");
        q.q_kwh[e.id] = e.e_max_kwh - energy;
    }
    return q;
}

std::map<std::string, double> energy_from_queue(const HmgSystem& sys, const QueueState& q) {
    std::map<std::string, double> e_kwh;
    for (const auto& e : sys.storages)
        e_kwh[e.id] = e.e_max_kwh - q.get(e.id);
    return e_kwh;
}

double queue_input_kw(const EsParams& es, double p_c_kw, double p_d_kw) {
    if (es.eta <= 0.0) throw ValidationError("storage '" + es.id + "' has non-positive efficiency");
    return p_d_kw / es.eta - es.eta * p_c_kw;
}

QueueState queue_update(const HmgSystem& sys, const QueueState& q, const DispatchSetpoints& d,
                        double dt_h) {
    if (dt_h <= 0.0) throw ValidationError("queue update interval must be positive");
    QueueState out;
    out.slot = q.slot + 1;
    for (const auto& e : sys.storages) {
        const double p_c = d.get(d.es_charge, e.id) * sys.base_kva;
        const double p_d = d.get(d.es_discharge, e.id) * sys.base_kva;
        double next = q.get(e.id) + queue_input_kw(e, p_c, p_d) * dt_h;
        const double range = e.e_max_kwh - e.e_min_kwh;
        const double tol = 1e-6 * std::max(1.0, range);
        if (next < -tol || next > range + tol) {
            std::ostringstream msg;
            msg << "storage '" << e.id << "' queue " << next << " kWh leaves [0, " << range
                << "] after slot " << q.slot;
            throw ValidationError(msg.str());
        }
        out.q_kwh[e.id] = std::min(range, std::max(0.0, next));
    }
    return out;
}

double drift_bound_objective(const HmgSystem& sys, const QueueState& q,
                             const DispatchSetpoints& candidate, double v) {
    if (v < 0.0) throw ValidationError("cost weight must be non-negative");
    double drift = 0.0;
    for (const auto& e : sys.storages) {
        const double p_c = candidate.get(candidate.es_charge, e.id) * sys.base_kva;
        const double p_d = candidate.get(candidate.es_discharge, e.id) * sys.base_kva;
        drift += q.get(e.id) * queue_input_kw(e, p_c, p_d);
    }
    return drift + v * candidate.cost;
}

double VSchedule::at(int slot) const {
    if (v.empty()) throw ValidationError("empty cost-weight schedule");
    if (v.size() == 1) return v[0];
    if (slot < 0 || slot >= static_cast<int>(v.size()))
        throw ValidationError("slot outside the cost-weight schedule");
    return v[slot];
}

VSchedule VSchedule::constant(double value) {
    if (value < 0.0) throw ValidationError("cost weight must be non-negative");
    return VSchedule{{value}};
}

VSchedule VSchedule::two_level(double off_peak, double peak, int slots_per_day, int peak_begin,
                               int peak_end) {
    if (off_peak < 0.0 || peak < 0.0)
        throw ValidationError("cost weight must be non-negative");
    if (slots_per_day <= 0 || peak_begin < 0 || peak_end > slots_per_day || peak_begin > peak_end)
        throw ValidationError("peak window outside the day");
    VSchedule s;
    s.v.assign(slots_per_day, off_peak);
    for (int t = peak_begin; t < peak_end; ++t)
        s.v[t] = peak;
    return s;
}

DaySchedule schedule_day(const HmgSystem& sys, int day, const VSchedule& v_sched,
                         const std::map<int, EventSet>& events_by_slot) {
    DaySchedule out;
    QueueState q = initial_queue(sys);
    out.queues.push_back(q);
    const DispatchSetpoints* warm = nullptr;
    for (int slot = 0; slot < sys.slots_per_day; ++slot) {
        EventSet ev;
        if (auto it = events_by_slot.find(slot); it != events_by_slot.end()) ev = it->second;
        NlpInstance nlp = build_nlp(sys, day, slot, q, v_sched.at(slot), ev);
        NlpSolution sol = warm ? solve_nlp(nlp, *warm) : solve_nlp(nlp);
        if (sol.report.infeasible) {
            std::ostringstream msg;
            msg << "slot " << slot << " of day " << day << " has no stable dispatch";
            if (!sol.report.log.empty()) msg << ": " << sol.report.log.back();
            throw InfeasibleError(msg.str());
        }
        out.slots.push_back(sol.setpoints);
        out.slot_cost.push_back(sol.report.f_op);
        out.cost += sol.report.f_op;
        q = queue_update(sys, q, sol.setpoints, sys.slot_hours);
        out.queues.push_back(q);
        warm = &out.slots.back();
    }
    return out;
}

} // namespace hmg
