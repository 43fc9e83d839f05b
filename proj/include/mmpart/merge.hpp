#pragma once

// Combining subdomain fits into full-domain results.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "mmpart/counts.hpp"
#include "mmpart/criteria.hpp"
#include "mmpart/errors.hpp"
#include "mmpart/fit.hpp"
#include "mmpart/graph.hpp"
#include "mmpart/random.hpp"
#include "mmpart/stats.hpp"

namespace mmpart {

enum class MergeStrategy { original, mixture };

inline MergeStrategy parse_strategy(const std::string& s) {
  if (s == "original") return MergeStrategy::original;
  if (s == "mixture") return MergeStrategy::mixture;
  throw ConfigError("unknown merge strategy '" + s + "' (expected original or mixture)");
}

inline std::string to_string(MergeStrategy s) { return s == MergeStrategy::original ? "original" : "mixture"; }

/// Full-domain risk draws (S x I*J, column j*I+i) and their summaries.
struct MergedRisks {
  Eigen::MatrixXd log_risk_draws;
  std::vector<RiskSummary> risks;
  std::vector<std::size_t> sources;  // per area: number of fits covering it
};

namespace detail {

inline Eigen::Index common_samples(const std::vector<SubmodelFit>& fits) {
  if (fits.empty()) throw DataError("merge: no fits");
  Eigen::Index s = fits.front().log_risk_draws.rows();
  for (const auto& f : fits) s = std::min(s, f.log_risk_draws.rows());
  if (s < 1) throw DataError("merge: fits carry no draws");
  return s;
}

// For each global area, (fit, local index) pairs of every fit containing it.
inline std::vector<std::vector<std::pair<std::size_t, std::size_t>>> coverage(
    const std::vector<SubmodelFit>& fits, std::size_t n_areas) {
  std::vector<std::vector<std::pair<std::size_t, std::size_t>>> out(n_areas);
  for (std::size_t d = 0; d < fits.size(); ++d) {
    for (std::size_t i = 0; i < fits[d].global_index.size(); ++i) {
      const std::size_t g = fits[d].global_index[i];
      if (g >= n_areas) throw DataError("merge: fit refers to an area outside the domain");
      out[g].emplace_back(d, i);
    }
  }
  return out;
}

inline std::size_t n_diseases_of(const std::vector<SubmodelFit>& fits) {
  const std::size_t J = fits.front().n_diseases();
  for (const auto& f : fits)
    if (f.n_diseases() != J) throw DataError("merge: fits disagree on the number of diseases");
  return J;
}

}  // namespace detail

/// Each area takes the estimate of its home subdomain.
inline MergedRisks merge_risks_original(const std::vector<SubmodelFit>& fits, const PartitionPlan& plan) {
  if (fits.size() != plan.n_subdomains) throw DataError("merge: one fit per subdomain expected");
  const std::size_t n = plan.home.size();
  const std::size_t J = detail::n_diseases_of(fits);
  const Eigen::Index S = detail::common_samples(fits);
  const auto cover = detail::coverage(fits, n);
  MergedRisks out;
  out.log_risk_draws.resize(S, static_cast<Eigen::Index>(n * J));
  out.risks.resize(n * J);
  out.sources.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t d = plan.home[i];
    out.sources[i] = cover[i].size();
    const auto it = std::find_if(cover[i].begin(), cover[i].end(), [&](const auto& p) { return p.first == d; });
    if (it == cover[i].end()) {
      throw DataError("merge: area " + std::to_string(i) + " missing from its home subdomain fit");
    }
    const SubmodelFit& f = fits[d];
    const std::size_t local = it->second;
    for (std::size_t j = 0; j < J; ++j) {
      const auto src = static_cast<Eigen::Index>(j * f.n_areas() + local);
      out.log_risk_draws.col(static_cast<Eigen::Index>(j * n + i)) = f.log_risk_draws.col(src).head(S);
      out.risks[j * n + i] = f.risks[static_cast<std::size_t>(src)];
    }
  }
  return out;
}

/// CPO-weighted mixture over every fit containing the area. Each merged
/// draw s picks a component with probability CPO_k / sum CPO and copies
/// that component's draw s. The choice stream depends only on `seed` and
/// the cell index.
inline MergedRisks merge_risks_mixture(const std::vector<SubmodelFit>& fits, const PartitionPlan& plan,
                                       std::uint64_t seed) {
  if (fits.size() != plan.n_subdomains) throw DataError("merge: one fit per subdomain expected");
  const std::size_t n = plan.home.size();
  const std::size_t J = detail::n_diseases_of(fits);
  const Eigen::Index S = detail::common_samples(fits);
  const auto cover = detail::coverage(fits, n);
  MergedRisks out;
  out.log_risk_draws.resize(S, static_cast<Eigen::Index>(n * J));
  out.risks.resize(n * J);
  out.sources.resize(n);
  std::vector<double> w;
  std::vector<double> r(static_cast<std::size_t>(S));
  for (std::size_t i = 0; i < n; ++i) {
    if (cover[i].empty()) throw DataError("merge: area " + std::to_string(i) + " is not covered by any fit");
    out.sources[i] = cover[i].size();
    for (std::size_t j = 0; j < J; ++j) {
      const std::size_t cell = j * n + i;
      const auto dst = static_cast<Eigen::Index>(cell);
      if (cover[i].size() == 1) {
        const auto [d, local] = cover[i].front();
        const auto src = static_cast<Eigen::Index>(j * fits[d].n_areas() + local);
        out.log_risk_draws.col(dst) = fits[d].log_risk_draws.col(src).head(S);
        out.risks[cell] = fits[d].risks[static_cast<std::size_t>(src)];
        continue;
      }
      w.clear();
      for (const auto& [d, local] : cover[i]) w.push_back(fits[d].cpo(static_cast<Eigen::Index>(local), static_cast<Eigen::Index>(j)));
      double total = 0.0;
      for (double x : w) total += x;
      if (!(total > 0.0)) {
        throw NumericError("merge: all CPO values are zero for area " + std::to_string(i) + ", disease " +
                           std::to_string(j));
      }
      std::mt19937_64 rng(derive_seed(seed, cell));
      std::discrete_distribution<std::size_t> pick(w.begin(), w.end());
      for (Eigen::Index s = 0; s < S; ++s) {
        const auto [d, local] = cover[i][pick(rng)];
        const auto src = static_cast<Eigen::Index>(j * fits[d].n_areas() + local);
        out.log_risk_draws(s, dst) = fits[d].log_risk_draws(s, src);
        r[static_cast<std::size_t>(s)] = std::exp(out.log_risk_draws(s, dst));
      }
      out.risks[cell] = summarize_risk(r);
    }
  }
  return out;
}

/// Normalized mixture weights CPO_k / sum_k CPO_k.
inline std::vector<double> mixture_weights(const std::vector<double>& cpos) {
  double total = 0.0;
  for (double c : cpos) total += c;
  if (!(total > 0.0)) throw NumericError("mixture weights: all CPO values are zero");
  std::vector<double> w;
  for (double c : cpos) w.push_back(c / total);
  return w;
}

/// w_d = (1/v_d) / sum(1/v).
inline Eigen::VectorXd cmc_weights(const Eigen::VectorXd& variances) {
  Eigen::VectorXd w = variances.cwiseInverse();
  return w / w.sum();
}

/// Consensus Monte Carlo: draws is D x S, one row per subdomain. Weights are
/// proportional to the inverse marginal variances. A subdomain with zero
/// variance makes the combination degenerate; its draws are returned as is.
inline Eigen::VectorXd cmc_combine(const Eigen::MatrixXd& draws, const Eigen::VectorXd& variances,
                                   std::vector<std::string>* warnings = nullptr) {
  const Eigen::Index D = draws.rows();
  if (D < 1 || draws.cols() < 1) throw DataError("cmc: no draws");
  if (variances.size() != D) throw DataError("cmc: one variance per subdomain expected");
  for (Eigen::Index d = 0; d < D; ++d) {
    if (!(variances(d) >= 0.0) || !std::isfinite(variances(d))) throw NumericError("cmc: invalid variance");
    if (variances(d) == 0.0) {
      if (warnings) {
        warnings->push_back("cmc: subdomain " + std::to_string(d + 1) +
                            " has zero posterior variance; its draws are used verbatim");
      }
      return draws.row(d).transpose();
    }
  }
  if (D == 1) return draws.row(0).transpose();
  const Eigen::VectorXd w = cmc_weights(variances);
  return draws.transpose() * w;
}

struct ParameterSummary {
  std::string name;
  stats::Summary summary;
};

/// Global parameters: psi = (rho, sigma2) then the intercepts alpha_j.
struct GlobalParameters {
  std::vector<std::string> names;
  Eigen::MatrixXd draws;  // S x names.size()
  std::vector<stats::Summary> summaries;
};

inline std::vector<std::string> parameter_names(std::size_t n_diseases) {
  auto names = psi_names(n_diseases);
  for (std::size_t j = 0; j < n_diseases; ++j) names.push_back("alpha_" + std::to_string(j + 1));
  return names;
}

/// Per-fit parameter draws in parameter_names order.
inline Eigen::MatrixXd parameter_draws(const SubmodelFit& f) {
  const Eigen::MatrixXd psi = psi_draws(f.hyper_draws, f.n_diseases());
  Eigen::MatrixXd out(psi.rows(), psi.cols() + f.alpha_draws.cols());
  out << psi, f.alpha_draws;
  return out;
}

inline std::vector<stats::Summary> column_summaries(const Eigen::MatrixXd& draws) {
  std::vector<stats::Summary> out;
  std::vector<double> col(static_cast<std::size_t>(draws.rows()));
  for (Eigen::Index k = 0; k < draws.cols(); ++k) {
    Eigen::Map<Eigen::VectorXd>(col.data(), draws.rows()) = draws.col(k);
    out.push_back(stats::summarize(col));
  }
  return out;
}

inline GlobalParameters merge_global(const std::vector<SubmodelFit>& fits, std::vector<std::string>* warnings = nullptr) {
  const std::size_t J = detail::n_diseases_of(fits);
  const Eigen::Index S = detail::common_samples(fits);
  GlobalParameters g;
  g.names = parameter_names(J);
  std::vector<Eigen::MatrixXd> per_fit;
  for (const auto& f : fits) per_fit.push_back(parameter_draws(f));
  const auto D = static_cast<Eigen::Index>(fits.size());
  const auto m = static_cast<Eigen::Index>(g.names.size());
  g.draws.resize(S, m);
  std::vector<double> col(static_cast<std::size_t>(S));
  for (Eigen::Index k = 0; k < m; ++k) {
    Eigen::MatrixXd stacked(D, S);
    Eigen::VectorXd var(D);
    for (Eigen::Index d = 0; d < D; ++d) {
      stacked.row(d) = per_fit[static_cast<std::size_t>(d)].col(k).head(S).transpose();
      Eigen::Map<Eigen::VectorXd>(col.data(), S) = stacked.row(d).transpose();
      var(d) = S > 1 ? stats::variance(col) : 0.0;
    }
    g.draws.col(k) = cmc_combine(stacked, var, warnings);
  }
  g.summaries = column_summaries(g.draws);
  return g;
}

/// Parameter summaries of every subdomain fit, in parameter_names order.
inline std::vector<std::vector<stats::Summary>> local_parameters(const std::vector<SubmodelFit>& fits) {
  std::vector<std::vector<stats::Summary>> out;
  for (const auto& f : fits) out.push_back(column_summaries(parameter_draws(f)));
  return out;
}

struct MergedResult {
  MergeStrategy strategy = MergeStrategy::original;
  MergedRisks risks;
  GlobalParameters global;
  std::vector<std::vector<stats::Summary>> local;
  Criteria criteria;
  std::vector<std::string> warnings;
};

/// Full merge. `data` is the full-domain panel in graph order.
inline MergedResult merge_fits(const std::vector<SubmodelFit>& fits, const PartitionPlan& plan,
                               const CountPanel& data, MergeStrategy strategy, std::uint64_t seed) {
  if (data.n_areas() != plan.home.size()) throw DataError("merge: panel and partition disagree on areas");
  MergedResult out;
  out.strategy = strategy;
  out.risks = strategy == MergeStrategy::original ? merge_risks_original(fits, plan)
                                                  : merge_risks_mixture(fits, plan, seed);
  out.global = merge_global(fits, &out.warnings);
  out.local = local_parameters(fits);
  out.criteria = deviance_criteria_log_risk(out.risks.log_risk_draws, data.observed, data.expected);
  return out;
}

}  // namespace mmpart
