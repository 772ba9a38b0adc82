#pragma once

// Deterministic first-order solvers used by the probe trainers.

#include <cmath>
#include <deque>
#include <limits>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "probegeo/error.hpp"

namespace probegeo {

struct SolverOptions {
  double tol = 1e-6;    // gradient-norm tolerance, relative to max(1, |g0|)
  int max_iters = 20000;
  int history = 10;     // L-BFGS memory
};

struct SolverResult {
  Eigen::VectorXd x;
  double value = 0;
  int iterations = 0;
};

namespace detail {
inline std::vector<double> to_std(const Eigen::VectorXd& v) {
  return std::vector<double>(v.data(), v.data() + v.size());
}
}  // namespace detail

// L-BFGS with Armijo backtracking. f(x, grad) returns the value and fills grad.
// Stops when |grad| <= tol * max(1, |grad(x0)|).
template <typename F>
SolverResult minimize_lbfgs(F&& f, Eigen::VectorXd x, const SolverOptions& opts = {}) {
  using Eigen::VectorXd;
  const Eigen::Index n = x.size();
  VectorXd g(n), g_new(n), x_new(n), dir(n);
  double fx = f(x, g);
  if (!std::isfinite(fx)) throw NumericalError("objective is not finite at the starting point");
  const double target = opts.tol * std::max(1.0, g.norm());

  std::deque<VectorXd> s_hist, y_hist;
  std::deque<double> rho_hist;
  std::vector<double> alpha(static_cast<std::size_t>(opts.history));

  for (int it = 0; it < opts.max_iters; ++it) {
    if (g.norm() <= target) return {x, fx, it};

    // Two-loop recursion.
    dir = -g;
    const int m = static_cast<int>(s_hist.size());
    for (int i = m - 1; i >= 0; --i) {
      alpha[i] = rho_hist[i] * s_hist[i].dot(dir);
      dir -= alpha[i] * y_hist[i];
    }
    if (m > 0) dir *= s_hist.back().dot(y_hist.back()) / y_hist.back().squaredNorm();
    for (int i = 0; i < m; ++i) {
      const double beta = rho_hist[i] * y_hist[i].dot(dir);
      dir += (alpha[i] - beta) * s_hist[i];
    }
    double slope = g.dot(dir);
    if (!(slope < 0)) {
      s_hist.clear();
      y_hist.clear();
      rho_hist.clear();
      dir = -g;
      slope = -g.squaredNorm();
    }

    double step = (m == 0) ? std::min(1.0, 1.0 / g.norm()) : 1.0;
    double f_new = 0;
    bool accepted = false;
    for (int ls = 0; ls < 60; ++ls) {
      x_new = x + step * dir;
      f_new = f(x_new, g_new);
      if (std::isfinite(f_new) && f_new <= fx + 1e-4 * step * slope) {
        accepted = true;
        break;
      }
      step *= 0.5;
    }
    if (!accepted) {
      if (m > 0) {
        // Memory may be stale; retry along steepest descent.
        s_hist.clear();
        y_hist.clear();
        rho_hist.clear();
        continue;
      }
      // No representable decrease along -g: the iterate is optimal to machine precision.
      return {x, fx, it};
    }

    VectorXd s = x_new - x;
    VectorXd y = g_new - g;
    const double sy = s.dot(y);
    if (sy > 1e-12 * s.norm() * y.norm()) {
      if (static_cast<int>(s_hist.size()) == opts.history) {
        s_hist.pop_front();
        y_hist.pop_front();
        rho_hist.pop_front();
      }
      s_hist.push_back(std::move(s));
      y_hist.push_back(std::move(y));
      rho_hist.push_back(1.0 / sy);
    }
    x.swap(x_new);
    g.swap(g_new);
    fx = f_new;
  }
  if (g.norm() <= target) return {x, fx, opts.max_iters};
  throw NumericalError("L-BFGS did not converge within " + std::to_string(opts.max_iters) +
                           " iterations (|grad| = " + std::to_string(g.norm()) + ")",
                       detail::to_std(x));
}

struct ProximalOptions {
  double tol = 1e-9;           // prox-gradient residual (sup norm) at which to stop
  double stall_tol = 1e-13;    // or: objective decrease over `window` iterations < stall_tol * max(1, |F|)
  int window = 50;
  int max_iters = 100000;
};

struct ProximalResult {
  Eigen::VectorXd x;
  double value = 0;  // smooth part + penalty
  int iterations = 0;
};

inline double soft_threshold(double v, double t) {
  if (v > t) return v - t;
  if (v < -t) return v + t;
  return 0.0;
}

// Accelerated proximal gradient (FISTA, backtracking) for
// f(x) + lambda * sum_{j in penalized} |x_j|. Momentum is dropped whenever a step
// would raise the composite objective, so the returned iterates are monotone;
// soft-thresholding produces exact zeros.
template <typename F>
ProximalResult minimize_proximal(F&& f, Eigen::VectorXd x, double lambda,
                                 const std::vector<bool>& penalized,
                                 const ProximalOptions& opts = {}) {
  using Eigen::VectorXd;
  const Eigen::Index n = x.size();
  auto penalty = [&](const VectorXd& v) {
    double s = 0;
    for (Eigen::Index j = 0; j < n; ++j)
      if (penalized[static_cast<std::size_t>(j)]) s += std::abs(v[j]);
    return lambda * s;
  };
  VectorXd gx(n), gy(n), z(n), gz(n);
  const double fx0 = f(x, gx);
  if (!std::isfinite(fx0)) throw NumericalError("objective is not finite at the starting point");
  double obj = fx0 + penalty(x);
  VectorXd y = x;
  double fy = fx0;
  gy = gx;
  double t = 1.0, lip = 1.0;
  std::deque<double> history{obj};

  for (int it = 0; it < opts.max_iters; ++it) {
    double fz = 0;
    bool accepted = false;
    for (int ls = 0; ls < 100; ++ls) {
      const double step = 1.0 / lip;
      for (Eigen::Index j = 0; j < n; ++j) {
        const double v = y[j] - step * gy[j];
        z[j] = penalized[static_cast<std::size_t>(j)] ? soft_threshold(v, step * lambda) : v;
      }
      const VectorXd diff = z - y;
      fz = f(z, gz);
      if (std::isfinite(fz) &&
          fz <= fy + gy.dot(diff) + 0.5 * lip * diff.squaredNorm() + 1e-15 * std::abs(fy)) {
        accepted = true;
        break;
      }
      lip *= 2.0;
    }
    if (!accepted) return {x, obj, it};
    const double residual = lip * (z - y).lpNorm<Eigen::Infinity>();
    const double obj_z = fz + penalty(z);
    if (obj_z > obj) {
      // Restart from x without momentum; the next plain step cannot increase F.
      if (t == 1.0 && y == x) return {x, obj, it + 1};
      y = x;
      fy = f(y, gy);
      t = 1.0;
      continue;
    }
    const double t_next = 0.5 * (1.0 + std::sqrt(1.0 + 4.0 * t * t));
    y = z + ((t - 1.0) / t_next) * (z - x);
    x = z;
    gx = gz;
    obj = obj_z;
    t = t_next;
    fy = f(y, gy);
    if (residual <= opts.tol) return {x, obj, it + 1};
    history.push_back(obj);
    if (static_cast<int>(history.size()) > opts.window) {
      if (history.front() - obj < opts.stall_tol * std::max(1.0, std::abs(obj))) return {x, obj, it + 1};
      history.pop_front();
    }
    lip *= 0.9;  // let the step grow again
  }
  throw NumericalError("proximal gradient did not converge within " +
                           std::to_string(opts.max_iters) + " iterations",
                       detail::to_std(x));
}

}  // namespace probegeo
