#include "hmg/solvers.hpp"

#include <algorithm>
#include <cmath>

#include "hmg/common.hpp"

namespace hmg {

using Eigen::MatrixXd;
using Eigen::VectorXd;

NewtonReport newton_solve(
    const std::function<void(const VectorXd&, VectorXd*, MatrixXd*)>& fn, VectorXd& x,
    const NewtonOptions& opt) {
    NewtonReport rep;
    const int n = static_cast<int>(x.size());
    VectorXd r(n), r_trial(n);
    MatrixXd J(n, n);
    fn(x, &r, nullptr);
    double norm = r.lpNorm<Eigen::Infinity>();
    for (int it = 0; it < opt.max_iter; ++it) {
        if (!std::isfinite(norm)) break;
        if (norm <= opt.tol) {
            rep.converged = true;
            break;
        }
        fn(x, &r, &J);
        VectorXd dx = J.partialPivLu().solve(-r);
        if (!dx.allFinite()) break;
        if (opt.step_limit > 0) {
            const double m = dx.lpNorm<Eigen::Infinity>();
            if (m > opt.step_limit) dx *= opt.step_limit / m;
        }
        double lambda = 1.0;
        double new_norm = norm;
        VectorXd x_trial;
        for (int bt = 0; bt <= opt.max_backtrack; ++bt) {
            x_trial = x + lambda * dx;
            fn(x_trial, &r_trial, nullptr);
            new_norm = r_trial.lpNorm<Eigen::Infinity>();
            if (std::isfinite(new_norm) && new_norm < norm) break;
            lambda *= 0.5;
        }
        x = x_trial;
        r = r_trial;
        norm = new_norm;
        rep.iterations = it + 1;
    }
    if (norm <= opt.tol) rep.converged = true;
    rep.residual_norm = norm;
    return rep;
}

NewtonReport backward_euler_step(
    const std::function<void(const VectorXd&, VectorXd*, MatrixXd*)>& f,
    const VectorXd& x_prev, double h, VectorXd& x_next, const NewtonOptions& opt) {
    if (h <= 0) throw ValidationError("step size must be positive");
    const int n = static_cast<int>(x_prev.size());
    x_next = x_prev;
    auto fn = [&](const VectorXd& x, VectorXd* r, MatrixXd* J) {
        VectorXd fv(n);
        if (J) {
            MatrixXd Jf(n, n);
            f(x, &fv, &Jf);
            *J = MatrixXd::Identity(n, n) - h * Jf;
        } else {
            f(x, &fv, nullptr);
        }
        *r = x - x_prev - h * fv;
    };
    return newton_solve(fn, x_next, opt);
}

namespace {

VectorXd box_clamp(const VectorXd& x, const VectorXd& lo, const VectorXd& hi) {
    return x.cwiseMax(lo).cwiseMin(hi);
}

} // namespace

LbfgsReport lbfgs_box(const BoxNlp& nlp, VectorXd& x, const LbfgsOptions& opt) {
    const int n = nlp.n;
    if (x.size() != n || nlp.lower.size() != n || nlp.upper.size() != n)
        throw ValidationError("box NLP dimension mismatch");
    LbfgsReport rep;
    x = box_clamp(x, nlp.lower, nlp.upper);

    auto value = [&](const VectorXd& p) { return nlp.f(p, nullptr); };
    auto grad = [&](const VectorXd& p) -> VectorXd {
        if (nlp.analytic_gradient) {
            VectorXd gg(n);
            nlp.f(p, &gg);
            return gg;
        }
        // Central differences, shrunk at the box edges.
        VectorXd out(n);
        VectorXd pp = p;
        for (int i = 0; i < n; ++i) {
            const double step = opt.fd_step * std::max(1.0, std::abs(p[i]));
            const double lo = std::max(nlp.lower[i], p[i] - step);
            const double hi = std::min(nlp.upper[i], p[i] + step);
            pp[i] = hi;
            const double fh = nlp.f(pp, nullptr);
            pp[i] = lo;
            const double fl = nlp.f(pp, nullptr);
            pp[i] = p[i];
            out[i] = (hi > lo) ? (fh - fl) / (hi - lo) : 0.0;
        }
        return out;
    };

    double f = value(x);
    VectorXd g = grad(x);

    std::vector<VectorXd> s_hist, y_hist;
    std::vector<double> rho_hist;

    auto projected_gradient = [&](const VectorXd& p, const VectorXd& gg) {
        VectorXd pg = p - gg;
        pg = box_clamp(pg, nlp.lower, nlp.upper) - p;
        return pg;
    };

    for (int it = 0; it < opt.max_iter; ++it) {
        rep.iterations = it;
        VectorXd pg = projected_gradient(x, g);
        rep.pg_norm = pg.lpNorm<Eigen::Infinity>();
        if (rep.pg_norm <= opt.g_tol) {
            rep.converged = true;
            break;
        }

        // Two-loop recursion.
        VectorXd q = -g;
        const int k = static_cast<int>(s_hist.size());
        std::vector<double> alpha(k);
        for (int i = k - 1; i >= 0; --i) {
            alpha[i] = rho_hist[i] * s_hist[i].dot(q);
            q -= alpha[i] * y_hist[i];
        }
        if (k > 0) {
            const double gamma =
                s_hist.back().dot(y_hist.back()) / y_hist.back().squaredNorm();
            q *= std::max(1e-12, gamma);
        }
        for (int i = 0; i < k; ++i) {
            const double beta = rho_hist[i] * y_hist[i].dot(q);
            q += s_hist[i] * (alpha[i] - beta);
        }
        VectorXd dir = q;
        if (dir.dot(g) > -1e-14 * dir.norm() * g.norm()) dir = -g; // safeguard
        // Keep the first trial within a few box-widths of the iterate so a
        // steep penalty region cannot demand dozens of halvings.
        const double dir_cap = 10.0 * std::max(1.0, x.lpNorm<Eigen::Infinity>());
        const double dir_norm = dir.lpNorm<Eigen::Infinity>();
        if (dir_norm > dir_cap) dir *= dir_cap / dir_norm;

        // Backtracking projected line search.
        double step = 1.0;
        double f_new = f;
        VectorXd x_new;
        bool accepted = false;
        for (int ls = 0; ls < 45; ++ls) {
            x_new = box_clamp(x + step * dir, nlp.lower, nlp.upper);
            VectorXd d = x_new - x;
            if (d.lpNorm<Eigen::Infinity>() < 1e-15) {
                step *= 0.5;
                continue;
            }
            f_new = value(x_new);
            if (std::isfinite(f_new) && f_new <= f + 1e-4 * g.dot(d)) {
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if (!accepted) {
            // try a plain projected-gradient step before giving up
            x_new = box_clamp(x - 1e-4 * g / std::max(1.0, g.lpNorm<Eigen::Infinity>()),
                              nlp.lower, nlp.upper);
            f_new = value(x_new);
            if (!std::isfinite(f_new) || f_new >= f) {
                rep.converged = rep.pg_norm <= 10 * opt.g_tol;
                break;
            }
        }

        VectorXd g_new = grad(x_new);
        VectorXd s = x_new - x;
        VectorXd y = g_new - g;
        const double sy = s.dot(y);
        if (sy > 1e-12 * s.norm() * y.norm()) {
            s_hist.push_back(s);
            y_hist.push_back(y);
            rho_hist.push_back(1.0 / sy);
            if (static_cast<int>(s_hist.size()) > opt.history) {
                s_hist.erase(s_hist.begin());
                y_hist.erase(y_hist.begin());
                rho_hist.erase(rho_hist.begin());
            }
        }
        const double df = std::abs(f - f_new);
        x = x_new;
        g = g_new;
        f = f_new;
        if (df <= opt.f_tol * std::max(1.0, std::abs(f))) {
            VectorXd pg2 = projected_gradient(x, g);
            rep.pg_norm = pg2.lpNorm<Eigen::Infinity>();
            rep.converged = true;
            break;
        }
    }
    rep.f = f;
    VectorXd pg = projected_gradient(x, g);
    rep.pg_norm = pg.lpNorm<Eigen::Infinity>();
    return rep;
}

} // namespace hmg
