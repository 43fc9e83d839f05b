#pragma once

// Small dense quasi-Newton maximizer and finite-difference derivatives for
// the hyperparameter posterior (a handful of dimensions, expensive objective).

#include <Eigen/Dense>

#include <cmath>
#include <functional>
#include <limits>

#include "mmpart/errors.hpp"

namespace mmpart {

using Objective = std::function<double(const Eigen::VectorXd&)>;

inline Eigen::VectorXd central_gradient(const Objective& f, const Eigen::VectorXd& x, double h) {
  Eigen::VectorXd g(x.size());
  Eigen::VectorXd xp = x;
  for (Eigen::Index k = 0; k < x.size(); ++k) {
    xp(k) = x(k) + h;
    const double fp = f(xp);
    xp(k) = x(k) - h;
    const double fm = f(xp);
    xp(k) = x(k);
    g(k) = (fp - fm) / (2.0 * h);
  }
  return g;
}

inline Eigen::MatrixXd central_hessian(const Objective& f, const Eigen::VectorXd& x, double h) {
  const Eigen::Index m = x.size();
  Eigen::MatrixXd hess(m, m);
  const double f0 = f(x);
  Eigen::VectorXd xp = x;
  for (Eigen::Index a = 0; a < m; ++a) {
    xp(a) = x(a) + h;
    const double fp = f(xp);
    xp(a) = x(a) - h;
    const double fm = f(xp);
    xp(a) = x(a);
    hess(a, a) = (fp - 2.0 * f0 + fm) / (h * h);
    for (Eigen::Index b = 0; b < a; ++b) {
      double acc = 0.0;
      for (int sa : {1, -1}) {
        for (int sb : {1, -1}) {
          xp(a) = x(a) + sa * h;
          xp(b) = x(b) + sb * h;
          acc += sa * sb * f(xp);
        }
      }
      xp(a) = x(a);
      xp(b) = x(b);
      hess(a, b) = hess(b, a) = acc / (4.0 * h * h);
    }
  }
  return hess;
}

struct BfgsOptions {
  int max_iterations = 200;
  double gradient_tolerance = 1e-4;
  double gradient_step = 1e-4;
  double max_step = 1.0;
};

struct BfgsResult {
  Eigen::VectorXd x;
  double value = 0.0;
  Eigen::VectorXd gradient;
  int iterations = 0;
  bool converged = false;
};

/// Maximizes f with BFGS on finite-difference gradients and a backtracking
/// Armijo line search. Steps are capped at `max_step` in the max norm.
inline BfgsResult bfgs_maximize(const Objective& f, Eigen::VectorXd x, BfgsOptions opts = {}) {
  const Eigen::Index m = x.size();
  BfgsResult r;
  double fx = f(x);
  if (!std::isfinite(fx)) throw NumericError("optimizer: objective is not finite at the start");
  Eigen::VectorXd g = central_gradient(f, x, opts.gradient_step);
  Eigen::MatrixXd inv_h = Eigen::MatrixXd::Identity(m, m);
  bool scaled = false;
  int it = 0;
  for (; it < opts.max_iterations; ++it) {
    if (g.cwiseAbs().maxCoeff() < opts.gradient_tolerance) {
      r.converged = true;
      break;
    }
    Eigen::VectorXd dir = inv_h * g;
    if (dir.dot(g) <= 0.0) {
      inv_h.setIdentity();
      dir = g;
    }
    const double big = dir.cwiseAbs().maxCoeff();
    if (big > opts.max_step) dir *= opts.max_step / big;
    double t = 1.0;
    double f_new = -std::numeric_limits<double>::infinity();
    Eigen::VectorXd x_new;
    const double slope = g.dot(dir);
    for (int ls = 0; ls < 40; ++ls, t *= 0.5) {
      x_new = x + t * dir;
      f_new = f(x_new);
      if (std::isfinite(f_new) && f_new >= fx + 1e-4 * t * slope) break;
    }
    if (!std::isfinite(f_new) || f_new < fx) {
      // Line search failed: gradient noise floor reached.
      break;
    }
    const Eigen::VectorXd g_new = central_gradient(f, x_new, opts.gradient_step);
    const Eigen::VectorXd s = x_new - x;
    // Maximization: curvature pair uses the negated gradient change.
    const Eigen::VectorXd y = g - g_new;
    const double sy = s.dot(y);
    if (sy > 1e-12) {
      if (!scaled) {
        inv_h *= sy / y.squaredNorm();
        scaled = true;
      }
      const double rho = 1.0 / sy;
      const Eigen::MatrixXd eye = Eigen::MatrixXd::Identity(m, m);
      inv_h = (eye - rho * s * y.transpose()) * inv_h * (eye - rho * y * s.transpose()) +
              rho * s * s.transpose();
    }
    const bool tiny = std::abs(f_new - fx) < 1e-12 * (1.0 + std::abs(fx)) &&
                      s.cwiseAbs().maxCoeff() < 1e-9;
    x = x_new;
    fx = f_new;
    g = g_new;
    if (tiny) {
      r.converged = true;
      ++it;
      break;
    }
  }
  r.x = std::move(x);
  r.value = fx;
  r.gradient = std::move(g);
  r.iterations = it;
  if (!r.converged && r.gradient.cwiseAbs().maxCoeff() < 100 * opts.gradient_tolerance) r.converged = true;
  return r;
}

}  // namespace mmpart
