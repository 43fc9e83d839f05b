#pragma once

// Fitting one multivariate M-model on one (sub)domain.
//
//   1. maximize the Laplace hyper-posterior with BFGS from theta = 0;
//   2. Gaussian approximation of the hyper-posterior from a finite-difference
//      Hessian at the mode;
//   3. S hyperparameter draws, each followed by one latent draw from the
//      constrained Gaussian approximation at that hyperparameter, shifted
//      from the mode towards the mean by a third-order correction;
//   4. CPO, risk summaries and exceedance probabilities from the draws.
//
// Areas are processed internally in label order so that the output does not
// depend on how the caller indexed them.

#include <Eigen/Dense>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "mmpart/counts.hpp"
#include "mmpart/errors.hpp"
#include "mmpart/graph.hpp"
#include "mmpart/laplace.hpp"
#include "mmpart/mmodel.hpp"
#include "mmpart/optimize.hpp"
#include "mmpart/stats.hpp"

namespace mmpart {

struct FitConfig {
  int samples = 1000;
  int max_newton_iterations = 50;
  double newton_tolerance = 1e-8;
  double optimizer_tolerance = 1e-4;
  int optimizer_max_iterations = 200;
  double gradient_step = 1e-4;
  double hessian_step = 1e-3;
  double wishart_dof = -1.0;  // negative: J + 2
  bool mean_correction = true;
  std::uint64_t seed = 1;
};

/// Posterior summary of one relative risk R_ij.
struct RiskSummary {
  double mean = 0.0;
  double sd = 0.0;
  double median = 0.0;
  double q025 = 0.0;
  double q975 = 0.0;
  double exceedance = 0.0;  // P(R > 1 | O)
};

struct SubmodelFit {
  std::vector<std::string> labels;         // area labels, caller's order
  std::vector<std::size_t> global_index;   // back-map to the full domain
  std::vector<std::string> disease_names;
  std::size_t n_components = 1;

  Eigen::VectorXd hyper_mode;
  Eigen::MatrixXd hyper_cov;
  double log_posterior_mode = 0.0;
  LatentState latent_mode;
  SparseMatrix latent_precision;           // caller's area order, vec index j*I+i

  Eigen::MatrixXd hyper_draws;     // S x J(J+1)/2
  Eigen::MatrixXd alpha_draws;     // S x J
  Eigen::MatrixXd log_risk_draws;  // S x (I*J), column j*I+i

  Eigen::MatrixXd cpo;             // I x J
  std::vector<RiskSummary> risks;  // I*J, index j*I+i

  std::vector<std::string> warnings;
  double seconds = 0.0;

  std::size_t n_areas() const { return labels.size(); }
  std::size_t n_diseases() const { return disease_names.size(); }
  std::size_t n_samples() const { return static_cast<std::size_t>(log_risk_draws.rows()); }
};

/// Harmonic-mean CPO from per-draw log predictive densities of the observed
/// counts. log_pred is S x (I*J); the result is I x J and lies in (0, 1].
/// Optional log_weights (length S) make it a self-normalized weighted mean.
inline Eigen::MatrixXd harmonic_cpo(const Eigen::MatrixXd& log_pred, Eigen::Index n, Eigen::Index J,
                                    const Eigen::VectorXd& log_weights = Eigen::VectorXd()) {
  const Eigen::Index S = log_pred.rows();
  if (S < 1) throw DataError("cpo: no draws");
  const bool weighted = log_weights.size() == S;
  const double log_total = weighted ? stats::log_sum_exp(std::vector<double>(log_weights.data(), log_weights.data() + S))
                                    : std::log(static_cast<double>(S));
  Eigen::MatrixXd out(n, J);
  std::vector<double> neg(static_cast<std::size_t>(S));
  for (Eigen::Index j = 0; j < J; ++j) {
    for (Eigen::Index i = 0; i < n; ++i) {
      for (Eigen::Index s = 0; s < S; ++s)
        neg[static_cast<std::size_t>(s)] = -log_pred(s, j * n + i) + (weighted ? log_weights(s) : 0.0);
      const double log_cpo = -(stats::log_sum_exp(neg) - log_total);
      if (!std::isfinite(log_cpo)) {
        throw NumericError("cpo: all draws give zero likelihood for area " + std::to_string(i) +
                           ", disease " + std::to_string(j));
      }
      out(i, j) = std::min(1.0, std::exp(log_cpo));
      if (!(out(i, j) > 0.0)) out(i, j) = std::numeric_limits<double>::min();
    }
  }
  return out;
}

/// Harmonic-mean CPO from posterior draws of the Poisson means mu = E R.
/// log_risk_draws is S x (I*J); the result is I x J and lies in (0, 1].
inline Eigen::MatrixXd cpo(const Eigen::MatrixXd& log_risk_draws, const CountPanel& data) {
  const auto n = static_cast<Eigen::Index>(data.n_areas());
  const auto J = static_cast<Eigen::Index>(data.n_diseases());
  Eigen::MatrixXd log_pred(log_risk_draws.rows(), n * J);
  for (Eigen::Index j = 0; j < J; ++j)
    for (Eigen::Index i = 0; i < n; ++i)
      for (Eigen::Index s = 0; s < log_risk_draws.rows(); ++s)
        log_pred(s, j * n + i) = stats::log_poisson_pmf(
            data.observed(i, j), data.expected(i, j) * std::exp(log_risk_draws(s, j * n + i)));
  return harmonic_cpo(log_pred, n, J);
}

/// Summaries of R = exp(log risk) for one cell from its draws.
inline RiskSummary summarize_risk(std::span<const double> risk_draws) {
  const stats::Summary s = stats::summarize(risk_draws);
  RiskSummary r{s.mean, s.sd, s.median, s.q025, s.q975, 0.0};
  std::size_t above = 0;
  for (double x : risk_draws) above += x > 1.0 ? 1 : 0;
  r.exceedance = static_cast<double>(above) / static_cast<double>(risk_draws.size());
  return r;
}

/// Per-cell risk summaries from an S x cells matrix of log-risk draws.
inline std::vector<RiskSummary> risk_summaries(const Eigen::MatrixXd& log_risk_draws) {
  std::vector<RiskSummary> out;
  out.reserve(static_cast<std::size_t>(log_risk_draws.cols()));
  std::vector<double> r(static_cast<std::size_t>(log_risk_draws.rows()));
  for (Eigen::Index c = 0; c < log_risk_draws.cols(); ++c) {
    for (Eigen::Index s = 0; s < log_risk_draws.rows(); ++s) {
      r[static_cast<std::size_t>(s)] = std::exp(log_risk_draws(s, c));
    }
    out.push_back(summarize_risk(r));
  }
  return out;
}

/// psi = (rho_12, rho_13, ..., rho_{J-1,J}, sigma2_1, ..., sigma2_J) per draw.
inline Eigen::MatrixXd psi_draws(const Eigen::MatrixXd& hyper_draws, std::size_t n_diseases,
                                 double dof = -1.0) {
  const auto J = static_cast<Eigen::Index>(n_diseases);
  Eigen::MatrixXd out(hyper_draws.rows(), static_cast<Eigen::Index>(n_hyper(n_diseases)));
  for (Eigen::Index s = 0; s < hyper_draws.rows(); ++s) {
    const auto c = bartlett_cov(HyperState(hyper_draws.row(s).transpose(), n_diseases, dof));
    Eigen::Index k = 0;
    for (Eigen::Index a = 0; a < J; ++a)
      for (Eigen::Index b = a + 1; b < J; ++b) out(s, k++) = c.rho(a, b);
    for (Eigen::Index a = 0; a < J; ++a) out(s, k++) = c.sigma2(a);
  }
  return out;
}

inline std::vector<std::string> psi_names(std::size_t n_diseases) {
  std::vector<std::string> out;
  for (std::size_t a = 0; a < n_diseases; ++a)
    for (std::size_t b = a + 1; b < n_diseases; ++b)
      out.push_back("rho_" + std::to_string(a + 1) + std::to_string(b + 1));
  for (std::size_t a = 0; a < n_diseases; ++a) out.push_back("sigma2_" + std::to_string(a + 1));
  return out;
}

namespace detail {

// Importance log weights truncated at mean * sqrt(S); non-finite weights
// (hyper draws where the latent solve failed) are dropped.
inline Eigen::VectorXd truncated_log_weights(Eigen::VectorXd lw, std::vector<std::string>& warnings) {
  const Eigen::Index S = lw.size();
  double top = -std::numeric_limits<double>::infinity();
  for (Eigen::Index s = 0; s < S; ++s)
    if (std::isfinite(lw(s))) top = std::max(top, lw(s));
  if (!std::isfinite(top)) return Eigen::VectorXd();
  for (Eigen::Index s = 0; s < S; ++s) lw(s) = std::isfinite(lw(s)) ? lw(s) - top : -std::numeric_limits<double>::infinity();
  const double cap = std::log(lw.array().exp().mean() * std::sqrt(static_cast<double>(S)));
  lw = lw.cwiseMin(cap);
  const Eigen::ArrayXd w = lw.array().exp();
  const double ess = w.sum() * w.sum() / w.square().sum();
  if (ess < 0.1 * static_cast<double>(S)) {
    warnings.push_back("CPO importance weights are degenerate (effective sample size " +
                       std::to_string(static_cast<long>(ess)) + ")");
  }
  return lw;
}

// Positive-definite inverse of the negative Hessian, regularized if needed.
inline Eigen::MatrixXd hyper_covariance(const Eigen::MatrixXd& hess, std::vector<std::string>& warnings) {
  Eigen::MatrixXd neg = -0.5 * (hess + hess.transpose());
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(neg);
  const double min_ev = eig.eigenvalues().minCoeff();
  if (!(min_ev > 0.0)) {
    const double shift = std::abs(min_ev) + 1e-3 * std::max(1.0, eig.eigenvalues().maxCoeff());
    neg.diagonal().array() += shift;
    warnings.push_back("hyperparameter Hessian not negative definite; added " +
                       std::to_string(shift) + " to the diagonal");
  }
  Eigen::MatrixXd cov = neg.inverse();
  return 0.5 * (cov + cov.transpose());
}

inline std::vector<std::size_t> label_order(const std::vector<std::string>& labels) {
  std::vector<std::size_t> order(labels.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return labels[a] < labels[b]; });
  return order;
}

}  // namespace detail

inline SubmodelFit fit_submodel(const CountPanel& data, const AreaGraph& g, const FitConfig& cfg) {
  const auto t0 = std::chrono::steady_clock::now();
  data.validate();
  if (data.n_areas() != g.n_areas()) throw DataError("fit: panel and graph disagree on areas");
  if (cfg.samples < 1) throw ConfigError("fit: samples must be >= 1");
  const std::size_t J = data.n_diseases();
  const auto n = static_cast<Eigen::Index>(data.n_areas());
  const auto Jx = static_cast<Eigen::Index>(J);
  const double dof = cfg.wishart_dof < 0.0 ? static_cast<double>(J) + 2.0 : cfg.wishart_dof;

  // Canonical (label-sorted) problem.
  const auto order = detail::label_order(g.labels());
  std::vector<std::size_t> position(order.size());
  for (std::size_t k = 0; k < order.size(); ++k) position[order[k]] = k;
  std::vector<std::string> canon_labels;
  for (std::size_t k : order) canon_labels.push_back(g.labels()[k]);
  std::vector<std::pair<std::size_t, std::size_t>> canon_edges;
  for (auto [a, b] : g.edges()) canon_edges.emplace_back(position[a], position[b]);
  const AreaGraph cg(canon_labels, canon_edges);
  CountPanel cdata = data.rows(order);

  LaplaceEngine engine(cdata, cg, {cfg.max_newton_iterations, cfg.newton_tolerance, cfg.mean_correction});
  const std::size_t m = n_hyper(J);

  const Objective objective = [&](const Eigen::VectorXd& t) {
    return engine.log_posterior(HyperState(t, J, dof));
  };
  BfgsOptions bopts;
  bopts.gradient_tolerance = cfg.optimizer_tolerance;
  bopts.max_iterations = cfg.optimizer_max_iterations;
  bopts.gradient_step = cfg.gradient_step;

  SubmodelFit fit;
  const BfgsResult opt = bfgs_maximize(objective, Eigen::VectorXd::Zero(static_cast<Eigen::Index>(m)), bopts);
  if (!opt.converged) {
    fit.warnings.push_back("hyperparameter optimizer stopped before reaching the gradient tolerance");
  }
  fit.hyper_mode = opt.x;
  const Eigen::MatrixXd hess = central_hessian(objective, opt.x, cfg.hessian_step);
  fit.hyper_cov = detail::hyper_covariance(hess, fit.warnings);
  fit.log_posterior_mode = engine.log_posterior(HyperState(opt.x, J, dof));
  const Eigen::VectorXd eta_mode = engine.current().eta;
  const LatentState mode_state = engine.current().state;
  const SparseMatrix canon_precision = engine.current_precision();

  // Joint draws.
  std::mt19937_64 rng(cfg.seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  const auto S = static_cast<Eigen::Index>(cfg.samples);
  Eigen::LLT<Eigen::MatrixXd> hc(fit.hyper_cov);
  const Eigen::MatrixXd hyper_chol = hc.matrixL();
  fit.hyper_draws.resize(S, static_cast<Eigen::Index>(m));
  Eigen::VectorXd log_proposal(S);  // Gaussian log density up to a constant
  for (Eigen::Index s = 0; s < S; ++s) {
    Eigen::VectorXd z(static_cast<Eigen::Index>(m));
    for (Eigen::Index k = 0; k < z.size(); ++k) z(k) = normal(rng);
    fit.hyper_draws.row(s) = (opt.x + hyper_chol * z).transpose();
    log_proposal(s) = -0.5 * z.squaredNorm();
  }
  Eigen::MatrixXd canon_draws(S, n * Jx);
  // CPO uses the leave-one-out predictive given each hyper draw, integrated
  // over the latent field; plain harmonic means over Gaussian latent draws
  // are dominated by their upper tail, where the Poisson likelihood vanishes.
  // The Gaussian hyper approximation misses the skew of the hyper posterior,
  // which matters for these small predictive densities, so the CPO average is
  // importance-weighted against the Laplace hyper posterior (weights
  // truncated at mean * sqrt(S)).
  Eigen::MatrixXd canon_pred(S, n * Jx);
  Eigen::VectorXd log_weight(S);
  fit.alpha_draws.resize(S, Jx);
  for (Eigen::Index s = 0; s < S; ++s) {
    const HyperState h(fit.hyper_draws.row(s).transpose(), J, dof);
    log_weight(s) = engine.log_posterior(h, &eta_mode) - log_proposal(s);
    const Eigen::VectorXd var = engine.marginal_variances();
    const Eigen::VectorXd shift = cfg.mean_correction ? engine.mean_shift(var) : Eigen::VectorXd();
    const Eigen::VectorXd eta = engine.draw(rng, shift);
    canon_draws.row(s) = eta.transpose();
    canon_pred.row(s) = engine.log_loo_predictive(var).transpose();
    for (Eigen::Index j = 0; j < Jx; ++j) fit.alpha_draws(s, j) = eta.segment(j * n, n).mean();
  }

  // Back to the caller's area order.
  fit.labels = g.labels();
  fit.global_index = data.global_index;
  fit.disease_names = data.disease_names;
  fit.n_components = engine.n_components();
  fit.log_risk_draws.resize(S, n * Jx);
  Eigen::MatrixXd log_pred(S, n * Jx);
  fit.latent_mode.alpha = mode_state.alpha;
  fit.latent_mode.theta.resize(n, Jx);
  for (Eigen::Index j = 0; j < Jx; ++j) {
    for (Eigen::Index i = 0; i < n; ++i) {
      const auto ci = static_cast<Eigen::Index>(position[static_cast<std::size_t>(i)]);
      fit.log_risk_draws.col(j * n + i) = canon_draws.col(j * n + ci);
      log_pred.col(j * n + i) = canon_pred.col(j * n + ci);
      fit.latent_mode.theta(i, j) = mode_state.theta(ci, j);
    }
  }
  {
    Eigen::VectorXi perm(n * Jx);  // canonical index -> caller index
    for (Eigen::Index j = 0; j < Jx; ++j)
      for (Eigen::Index i = 0; i < n; ++i)
        perm(j * n + static_cast<Eigen::Index>(position[static_cast<std::size_t>(i)])) = static_cast<int>(j * n + i);
    Eigen::PermutationMatrix<Eigen::Dynamic, Eigen::Dynamic, int> p(perm);
    fit.latent_precision = canon_precision.twistedBy(p);
  }
  fit.cpo = harmonic_cpo(log_pred, n, Jx, detail::truncated_log_weights(log_weight, fit.warnings));
  fit.risks = risk_summaries(fit.log_risk_draws);
  if (fit.n_components > 1) {
    fit.warnings.push_back("graph has " + std::to_string(fit.n_components) +
                           " connected components; one sum-to-zero constraint per component and disease");
  }
  fit.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return fit;
}

}  // namespace mmpart
