#pragma once

#include <Eigen/Dense>

#include "hmg/dynamics.hpp"

namespace hmg {

/// Converged steady operating point of the hybrid grid, per-unit.
struct SteadyState {
    Eigen::VectorXd theta, v_ac;   // per AC bus ordinal
    Eigen::VectorXd v_dc;          // per DC bus ordinal
    Eigen::VectorXd delta, e_q_prime;
    Eigen::VectorXd p_mach, q_mach; // realized machine outputs (slack included)
    Eigen::VectorXd p_inj, q_inj;  // net bus injections, system bus order (q = 0 on DC)
    double p_ic = 0, q_ic = 0;
    double f_ss = 0;               // steady frequency, Hz (PI governors pin it to nominal)
    int iterations = 0;
    double residual_norm = 0;
};

/// Newton power flow on the hybrid AC/DC network at nominal speed. Non-slack
/// machines hold their dispatch targets; each AC subgrid's highest-inertia
/// machine holds its bus at v_slack / angle zero and absorbs the mismatch.
/// Throws InfeasibleError when the iteration fails.
SteadyState solve_hybrid_pf(const DynModel& model, const StepContext& cx);
SteadyState solve_hybrid_pf(const HmgSystem& sys, const DispatchSetpoints& dispatch);

/// Exact dynamic equilibrium for a solved steady state. Back-computes the
/// regulator references and field ceilings (storing them on the model),
/// assembles the full state vector, and polishes it with Newton on the
/// steady residual. Throws InfeasibleError when a machine's field voltage
/// sits outside its capability range.
DynamicState init_dynamic_state(DynModel& model, const SteadyState& ss);

} // namespace hmg
