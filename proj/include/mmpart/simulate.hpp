#pragma once

// Synthetic multivariate count data (global and per-subdomain generating
// models) and accuracy scoring of risk and parameter estimates.

#include <Eigen/Dense>

#include <array>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "mmpart/counts.hpp"
#include "mmpart/errors.hpp"
#include "mmpart/graph.hpp"
#include "mmpart/mmodel.hpp"
#include "mmpart/random.hpp"

namespace mmpart {

inline constexpr std::size_t kMaxDenseSimulationAreas = 5000;

/// vec(Theta) ~ N(0, cov (x) Q^+) restricted to the non-null eigenspace of Q,
/// so every (disease, component) column sums to zero. Returns I x J.
template <class Rng>
Eigen::MatrixXd sample_theta(const BetweenDiseaseCov& cov, const StructureMatrix& q, Rng& rng) {
  const Eigen::Index n = q.q.rows();
  if (static_cast<std::size_t>(n) > kMaxDenseSimulationAreas) {
    throw DataError("sample_theta: graph has " + std::to_string(n) +
                    " areas; dense simulation is limited to " + std::to_string(kMaxDenseSimulationAreas));
  }
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig{Eigen::MatrixXd(q.q)};
  if (eig.info() != Eigen::Success) throw NumericError("sample_theta: eigendecomposition failed");
  // The smallest n_components eigenvalues are the null space.
  const Eigen::Index skip = static_cast<Eigen::Index>(q.n_components);
  const Eigen::Index rank = n - skip;
  Eigen::LLT<Eigen::MatrixXd> llt(cov.cov);
  if (llt.info() != Eigen::Success) throw NumericError("sample_theta: covariance not SPD");
  const Eigen::MatrixXd chol = llt.matrixL();
  const auto J = cov.cov.rows();
  std::normal_distribution<double> normal(0.0, 1.0);
  Eigen::MatrixXd z(rank, J);
  for (Eigen::Index j = 0; j < J; ++j)
    for (Eigen::Index k = 0; k < rank; ++k) z(k, j) = normal(rng);
  const Eigen::VectorXd scale = eig.eigenvalues().tail(rank).cwiseSqrt().cwiseInverse();
  Eigen::MatrixXd theta = eig.eigenvectors().rightCols(rank) * (scale.asDiagonal() * z) * chol.transpose();
  return theta;
}

template <class Rng>
Eigen::MatrixXd sample_counts(const Eigen::MatrixXd& log_risk, const Eigen::MatrixXd& expected, Rng& rng) {
  Eigen::MatrixXd out(log_risk.rows(), log_risk.cols());
  for (Eigen::Index j = 0; j < out.cols(); ++j) {
    for (Eigen::Index i = 0; i < out.rows(); ++i) {
      std::poisson_distribution<long long> pois(expected(i, j) * std::exp(log_risk(i, j)));
      out(i, j) = static_cast<double>(pois(rng));
    }
  }
  return out;
}

/// Correlations (rho_12, rho_13, rho_23) of the fifteen-region table used
/// as per-subdomain truths; subdomain d uses row d mod 15.
inline constexpr std::array<std::array<double, 3>, 15> kScenario2Correlations{{
    {0.76, 0.52, 0.47},  // Andalucia
    {0.58, 0.30, 0.37},  // Aragon
    {0.71, 0.34, 0.51},  // Asturias
    {0.37, 0.14, 0.69},  // Cantabria
    {0.60, 0.71, 0.38},  // Castilla - La Mancha
    {0.60, 0.12, 0.56},  // Castilla y Leon
    {0.54, 0.34, 0.48},  // Cataluna
    {0.72, 0.81, 0.79},  // Comunidad Valenciana
    {0.30, 0.27, 0.24},  // Extremadura
    {0.61, 0.36, 0.17},  // Galicia
    {0.65, 0.26, 0.11},  // La Rioja
    {0.66, 0.52, 0.12},  // Madrid
    {0.80, 0.42, 0.49},  // Murcia
    {0.73, 0.44, 0.65},  // Navarra
    {0.73, 0.65, 0.47},  // Pais Vasco
}};

/// Reads the tab-separated correlation table shipped in data/.
inline std::vector<std::array<double, 3>> read_correlation_table(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open correlation table " + path);
  std::vector<std::array<double, 3>> out;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty() || line[0] == '#') continue;
    std::stringstream ss(line);
    std::string name;
    std::array<double, 3> r{};
    if (!std::getline(ss, name, '\t') || !(ss >> r[0] >> r[1] >> r[2])) {
      throw DataError("bad correlation table line: " + line);
    }
    out.push_back(r);
  }
  return out;
}

struct ScenarioSpec {
  AreaGraph graph;
  std::vector<BetweenDiseaseCov> truths;  // one (scenario 1) or one per subdomain
  std::vector<std::size_t> home;          // scenario 2 only
  Eigen::VectorXd alpha;
  Eigen::MatrixXd expected;
  std::size_t replicates = 1;
  std::uint64_t seed = 1;
  int scenario = 1;

  std::size_t n_diseases() const { return static_cast<std::size_t>(alpha.size()); }

  void validate() const {
    if (truths.empty()) throw DataError("scenario: no covariance given");
    if (scenario == 2 && home.size() != graph.n_areas()) throw DataError("scenario 2 needs a partition");
    if (replicates < 1) throw DataError("scenario: replicates must be >= 1");
    if (static_cast<std::size_t>(expected.rows()) != graph.n_areas() ||
        expected.cols() != alpha.size()) {
      throw DataError("scenario: expected-count matrix has the wrong shape");
    }
    if ((expected.array() <= 0.0).any()) throw DataError("scenario: expected counts must be positive");
    for (const auto& t : truths) {
      Eigen::LLT<Eigen::MatrixXd> llt(t.cov);
      if (llt.info() != Eigen::Success) throw DataError("scenario: covariance not SPD");
    }
  }
};

/// Expected counts: disease-specific mean level times an area factor drawn
/// uniformly from [0.5, 1.5] with a fixed generator.
inline Eigen::MatrixXd default_expected(std::size_t n_areas, const Eigen::VectorXd& level,
                                        std::uint64_t seed = 2023) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.5, 1.5);
  Eigen::MatrixXd e(static_cast<Eigen::Index>(n_areas), level.size());
  for (Eigen::Index i = 0; i < e.rows(); ++i) {
    const double f = u(rng);
    for (Eigen::Index j = 0; j < e.cols(); ++j) e(i, j) = level(j) * f;
  }
  return e;
}

inline Eigen::VectorXd default_alpha() { return Eigen::Vector3d(-0.20, -0.10, 0.10); }
inline Eigen::VectorXd default_expected_level() { return Eigen::Vector3d(60.0, 40.0, 30.0); }

inline BetweenDiseaseCov correlation_cov(const Eigen::Vector3d& sigma2, const std::array<double, 3>& r) {
  Eigen::Matrix3d rho;
  rho << 1.0, r[0], r[1], r[0], 1.0, r[2], r[1], r[2], 1.0;
  return BetweenDiseaseCov::from_sigma_rho(sigma2, rho);
}

inline ScenarioSpec scenario1_preset(const AreaGraph& g, std::size_t replicates = 50,
                                     std::uint64_t seed = 1) {
  ScenarioSpec s;
  s.graph = g;
  s.scenario = 1;
  s.truths.push_back(correlation_cov(Eigen::Vector3d(0.25, 0.16, 0.09), {0.7, 0.5, 0.1}));
  s.alpha = default_alpha();
  s.expected = default_expected(g.n_areas(), default_expected_level());
  s.replicates = replicates;
  s.seed = seed;
  return s;
}

inline ScenarioSpec scenario2_preset(const AreaGraph& g, const std::vector<std::size_t>& home,
                                     std::size_t replicates = 50, std::uint64_t seed = 1) {
  if (home.size() != g.n_areas()) throw DataError("scenario 2 preset needs a partition covering the graph");
  ScenarioSpec s;
  s.graph = g;
  s.scenario = 2;
  s.home = home;
  std::size_t d_count = 0;
  for (std::size_t h : home) d_count = std::max(d_count, h + 1);
  for (std::size_t d = 0; d < d_count; ++d) {
    s.truths.push_back(correlation_cov(Eigen::Vector3d(0.5, 0.4, 0.3),
                                       kScenario2Correlations[d % kScenario2Correlations.size()]));
  }
  s.alpha = default_alpha();
  s.expected = default_expected(g.n_areas(), default_expected_level());
  s.replicates = replicates;
  s.seed = seed;
  return s;
}

/// One simulated data set with its true log-risks.
struct Replicate {
  Eigen::MatrixXd theta;     // I x J
  Eigen::MatrixXd log_risk;  // alpha_j + theta_ij
  Eigen::MatrixXd observed;
};

/// Replicate r of a scenario. Theta is drawn (and centred) first, alpha is
/// added afterwards.
inline Replicate simulate_replicate(const ScenarioSpec& spec, std::size_t r) {
  spec.validate();
  std::mt19937_64 rng(derive_seed(spec.seed, r));
  const auto n = static_cast<Eigen::Index>(spec.graph.n_areas());
  const auto J = spec.alpha.size();
  Replicate rep;
  if (spec.scenario == 1) {
    rep.theta = sample_theta(spec.truths.front(), structure_matrix(spec.graph), rng);
  } else {
    rep.theta = Eigen::MatrixXd::Zero(n, J);
    for (std::size_t d = 0; d < spec.truths.size(); ++d) {
      std::vector<std::size_t> members;
      for (std::size_t i = 0; i < spec.home.size(); ++i)
        if (spec.home[i] == d) members.push_back(i);
      if (members.empty()) continue;
      const Subgraph sub = subgraph(spec.graph, members);
      const Eigen::MatrixXd t = sample_theta(spec.truths[d], structure_matrix(sub.graph), rng);
      for (std::size_t k = 0; k < members.size(); ++k)
        rep.theta.row(static_cast<Eigen::Index>(members[k])) = t.row(static_cast<Eigen::Index>(k));
    }
  }
  rep.log_risk = rep.theta.rowwise() + spec.alpha.transpose();
  rep.observed = sample_counts(rep.log_risk, spec.expected, rng);
  return rep;
}

inline CountPanel replicate_panel(const ScenarioSpec& spec, const Replicate& rep) {
  std::vector<std::string> names;
  for (Eigen::Index j = 0; j < spec.alpha.size(); ++j) names.push_back("d" + std::to_string(j + 1));
  return make_panel(rep.observed, spec.expected, names);
}

// ---- scoring --------------------------------------------------------------

/// Risk estimate of one replicate: posterior medians and 95% limits, I x J.
struct RiskEstimate {
  Eigen::MatrixXd median;
  Eigen::MatrixXd lower;
  Eigen::MatrixXd upper;
};

/// Parameter estimate of one replicate.
struct ParameterEstimate {
  double mean = 0.0;
  double sd = 0.0;
  double lower = 0.0;
  double upper = 0.0;
};

struct ParameterRecovery {
  std::string name;
  double truth = 0.0;
  double mean = 0.0;      // average posterior mean
  double sd = 0.0;        // average posterior sd
  double sim_sd = 0.0;    // sd of posterior means across replicates
  double coverage = 0.0;  // fraction of 95% intervals containing the truth
};

struct AccuracyReport {
  Eigen::MatrixXd marb;    // I x J
  Eigen::MatrixXd mrrmse;  // I x J
  double mean_marb = 0.0;
  double mean_mrrmse = 0.0;
  double coverage = 0.0;   // risks inside their 95% interval, over cells and replicates
  std::vector<ParameterRecovery> parameters;
};

/// MARB_ij = |mean_r (Rhat - R)/R|, MRRMSE_ij = sqrt(mean_r ((Rhat - R)/R)^2).
inline AccuracyReport score(const std::vector<RiskEstimate>& estimates,
                            const std::vector<Eigen::MatrixXd>& true_risks) {
  if (estimates.empty() || estimates.size() != true_risks.size()) {
    throw DataError("score: need one estimate per replicate truth");
  }
  const auto n = true_risks.front().rows();
  const auto J = true_risks.front().cols();
  AccuracyReport rep;
  Eigen::MatrixXd sum = Eigen::MatrixXd::Zero(n, J);
  Eigen::MatrixXd sq = Eigen::MatrixXd::Zero(n, J);
  double covered = 0.0;
  for (std::size_t r = 0; r < estimates.size(); ++r) {
    const auto& est = estimates[r];
    const auto& truth = true_risks[r];
    if (truth.rows() != n || truth.cols() != J || est.median.rows() != n || est.median.cols() != J ||
        est.lower.rows() != n || est.upper.rows() != n) {
      throw DataError("score: dimension mismatch in replicate " + std::to_string(r));
    }
    const Eigen::ArrayXXd rel = (est.median.array() - truth.array()) / truth.array();
    sum.array() += rel;
    sq.array() += rel.square();
    covered += ((est.lower.array() <= truth.array()) && (truth.array() <= est.upper.array())).cast<double>().sum();
  }
  const double R = static_cast<double>(estimates.size());
  rep.marb = (sum / R).cwiseAbs();
  rep.mrrmse = (sq / R).cwiseSqrt();
  rep.mean_marb = rep.marb.mean();
  rep.mean_mrrmse = rep.mrrmse.mean();
  rep.coverage = covered / (R * static_cast<double>(n * J));
  return rep;
}

inline ParameterRecovery score_parameter(const std::string& name, double truth,
                                         const std::vector<ParameterEstimate>& est) {
  if (est.empty()) throw DataError("score_parameter: no replicates");
  ParameterRecovery p;
  p.name = name;
  p.truth = truth;
  std::vector<double> means;
  double sd_sum = 0.0;
  double covered = 0.0;
  for (const auto& e : est) {
    means.push_back(e.mean);
    sd_sum += e.sd;
    covered += (e.lower <= truth && truth <= e.upper) ? 1.0 : 0.0;
  }
  const double R = static_cast<double>(est.size());
  p.mean = stats::mean(means);
  p.sd = sd_sum / R;
  p.sim_sd = std::sqrt(stats::variance(means));
  p.coverage = covered / R;
  return p;
}

}  // namespace mmpart
