#pragma once

#include <Eigen/Dense>

#include <functional>

namespace hmg {

struct NewtonOptions {
    double tol = 1e-10;        // infinity norm of the residual
    int max_iter = 50;
    int max_backtrack = 8;
    double step_limit = 0.0;   // 0 = unlimited; else cap on |dx| per component
};

struct NewtonReport {
    bool converged = false;
    int iterations = 0;
    double residual_norm = 0.0;
};

/// Damped Newton on r(x) = 0 with a dense analytic Jacobian. Checks the
/// residual before the first update so an exact root is returned untouched.
/// fn must fill r always and jac when the pointer is non-null.
NewtonReport newton_solve(
    const std::function<void(const Eigen::VectorXd&, Eigen::VectorXd*, Eigen::MatrixXd*)>& fn,
    Eigen::VectorXd& x, const NewtonOptions& opt = {});

/// One backward-Euler step for dx/dt = f(x): solves x - x_prev - h f(x) = 0
/// starting from x_prev. f fills the vector field and, when the matrix
/// pointer is non-null, its Jacobian.
NewtonReport backward_euler_step(
    const std::function<void(const Eigen::VectorXd&, Eigen::VectorXd*, Eigen::MatrixXd*)>& f,
    const Eigen::VectorXd& x_prev, double h, Eigen::VectorXd& x_next,
    const NewtonOptions& opt = {});

struct BoxNlp {
    int n = 0;
    Eigen::VectorXd lower, upper;
    /// Objective; fills the gradient when asked iff analytic_gradient is set.
    std::function<double(const Eigen::VectorXd&, Eigen::VectorXd*)> f;
    bool analytic_gradient = false;
};

struct LbfgsOptions {
    int max_iter = 200;
    int history = 8;
    double g_tol = 1e-6;      // projected-gradient infinity norm
    double f_tol = 1e-12;     // relative objective change
    double fd_step = 1e-5;    // relative central-difference step when no gradient
};

struct LbfgsReport {
    bool converged = false;
    int iterations = 0;
    double f = 0.0;
    double pg_norm = 0.0;     // projected gradient norm at the solution
};

/// Projected L-BFGS for box-constrained minimization.
LbfgsReport lbfgs_box(const BoxNlp& nlp, Eigen::VectorXd& x, const LbfgsOptions& opt = {});

} // namespace hmg
