#pragma once

// Deviance-based model criteria from posterior draws of the Poisson means.

#include <Eigen/Dense>

#include <cmath>
#include <limits>
#include <vector>

#include "mmpart/errors.hpp"
#include "mmpart/stats.hpp"

namespace mmpart {

/// Both deviance conventions are kept. The conventional deviance is
/// -2 log p(O | C); the unscaled variant averages -log p for D-bar and pairs
/// it with D(C-bar) = -2 log p(O | C-bar).
struct Criteria {
  double mean_deviance = 0.0;           // mean over draws of -2 log p(O | C^s)
  double deviance_at_mean = 0.0;        // -2 log p(O | C-bar)
  double p_d = 0.0;                     // mean_deviance - deviance_at_mean
  double dic = 0.0;                     // 2 mean_deviance - deviance_at_mean
  double mean_deviance_unscaled = 0.0;  // mean over draws of -log p(O | C^s)
  double p_d_unscaled = 0.0;            // mean_deviance_unscaled - deviance_at_mean
  double dic_unscaled = 0.0;            // 2 mean_deviance_unscaled - deviance_at_mean
  double waic = std::numeric_limits<double>::quiet_NaN();
  double p_waic = std::numeric_limits<double>::quiet_NaN();
  std::size_t samples = 0;
};

/// mu_draws is S x cells (Poisson means), observed has one entry per cell.
/// WAIC needs S >= 2 and is NaN otherwise.
inline Criteria deviance_criteria(const Eigen::MatrixXd& mu_draws, const Eigen::VectorXd& observed) {
  const Eigen::Index S = mu_draws.rows();
  const Eigen::Index cells = mu_draws.cols();
  if (S < 1) throw DataError("criteria: no draws");
  if (observed.size() != cells) throw DataError("criteria: observed length differs from draw width");
  if (!(mu_draws.array() > 0.0).all() || !mu_draws.allFinite()) {
    throw NumericError("criteria: Poisson means must be positive and finite");
  }
  Criteria c;
  c.samples = static_cast<std::size_t>(S);
  std::vector<double> log_p(static_cast<std::size_t>(S));
  Eigen::VectorXd total_log_p = Eigen::VectorXd::Zero(S);
  double lppd = 0.0;
  double var_sum = 0.0;
  double at_mean = 0.0;
  for (Eigen::Index k = 0; k < cells; ++k) {
    const double o = observed(k);
    for (Eigen::Index s = 0; s < S; ++s) {
      const double lp = stats::log_poisson_pmf(o, mu_draws(s, k));
      log_p[static_cast<std::size_t>(s)] = lp;
      total_log_p(s) += lp;
    }
    at_mean += stats::log_poisson_pmf(o, mu_draws.col(k).mean());
    if (S >= 2) {
      lppd += stats::log_sum_exp(log_p) - std::log(static_cast<double>(S));
      var_sum += stats::variance(log_p);
    }
  }
  const double mean_log_p = total_log_p.mean();
  c.mean_deviance = -2.0 * mean_log_p;
  c.deviance_at_mean = -2.0 * at_mean;
  c.p_d = c.mean_deviance - c.deviance_at_mean;
  c.dic = 2.0 * c.mean_deviance - c.deviance_at_mean;
  c.mean_deviance_unscaled = -mean_log_p;
  c.p_d_unscaled = c.mean_deviance_unscaled - c.deviance_at_mean;
  c.dic_unscaled = 2.0 * c.mean_deviance_unscaled - c.deviance_at_mean;
  if (S >= 2) {
    c.p_waic = var_sum;
    c.waic = -2.0 * lppd + 2.0 * var_sum;
  }
  return c;
}

/// Criteria from log-risk draws (S x cells, column j*I+i) and a count panel
/// flattened the same way.
inline Criteria deviance_criteria_log_risk(const Eigen::MatrixXd& log_risk_draws,
                                           const Eigen::MatrixXd& observed,
                                           const Eigen::MatrixXd& expected) {
  const Eigen::Map<const Eigen::VectorXd> o(observed.data(), observed.size());
  const Eigen::Map<const Eigen::VectorXd> e(expected.data(), expected.size());
  if (log_risk_draws.cols() != o.size()) throw DataError("criteria: draw width differs from panel size");
  Eigen::MatrixXd mu = log_risk_draws.array().exp();
  mu.array().rowwise() *= e.transpose().array();
  return deviance_criteria(mu, o);
}

}  // namespace mmpart
