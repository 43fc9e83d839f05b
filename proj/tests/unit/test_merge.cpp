#include <gtest/gtest.h>

#include <boost/math/distributions/normal.hpp>

#include <random>

#include "mmpart/kde.hpp"
#include "mmpart/merge.hpp"

using namespace mmpart;

namespace {

AreaGraph path_graph(std::size_t n) {
  std::vector<std::string> labels;
  std::vector<std::pair<std::size_t, std::size_t>> edges;
  for (std::size_t i = 0; i < n; ++i) labels.push_back("a" + std::to_string(i));
  for (std::size_t i = 0; i + 1 < n; ++i) edges.emplace_back(i, i + 1);
  return AreaGraph(labels, edges);
}

// A fit over the given global areas with caller-supplied draws (S x n*J).
SubmodelFit make_fit(const std::vector<std::size_t>& global, std::size_t J, const Eigen::MatrixXd& draws,
                     double cpo_value = 0.5) {
  SubmodelFit f;
  for (std::size_t g : global) f.labels.push_back("a" + std::to_string(g));
  f.global_index = global;
  for (std::size_t j = 0; j < J; ++j) f.disease_names.push_back("d" + std::to_string(j));
  f.log_risk_draws = draws;
  f.cpo = Eigen::MatrixXd::Constant(static_cast<Eigen::Index>(global.size()), static_cast<Eigen::Index>(J), cpo_value);
  f.risks = risk_summaries(draws);
  f.hyper_draws = Eigen::MatrixXd::Zero(draws.rows(), static_cast<Eigen::Index>(J * (J + 1) / 2));
  f.alpha_draws = Eigen::MatrixXd::Zero(draws.rows(), static_cast<Eigen::Index>(J));
  return f;
}

Eigen::MatrixXd gaussian_draws(Eigen::Index S, Eigen::Index cols, double mean, double sd, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> nd(mean, sd);
  Eigen::MatrixXd m(S, cols);
  for (Eigen::Index k = 0; k < m.size(); ++k) m.data()[k] = nd(rng);
  return m;
}

}  // namespace

TEST(MergeStrategy, Parse) {
  EXPECT_EQ(parse_strategy("original"), MergeStrategy::original);
  EXPECT_EQ(parse_strategy("mixture"), MergeStrategy::mixture);
  EXPECT_THROW(parse_strategy("average"), ConfigError);
  EXPECT_EQ(to_string(MergeStrategy::mixture), "mixture");
}

TEST(MergeOriginal, DisjointPlanConcatenates) {
  const auto g = path_graph(6);
  const auto plan = expand_partition(g, {0, 0, 0, 1, 1, 1}, 0);
  const Eigen::MatrixXd a = gaussian_draws(50, 6, 0.1, 0.2, 1);
  const Eigen::MatrixXd b = gaussian_draws(50, 6, -0.1, 0.2, 2);
  const auto merged = merge_risks_original({make_fit({0, 1, 2}, 2, a), make_fit({3, 4, 5}, 2, b)}, plan);
  ASSERT_EQ(merged.log_risk_draws.cols(), 12);
  for (Eigen::Index j = 0; j < 2; ++j) {
    for (Eigen::Index i = 0; i < 3; ++i) {
      EXPECT_EQ(merged.log_risk_draws.col(j * 6 + i), a.col(j * 3 + i));
      EXPECT_EQ(merged.log_risk_draws.col(j * 6 + 3 + i), b.col(j * 3 + i));
    }
  }
  EXPECT_EQ(merged.risks.size(), 12u);
  for (std::size_t s : merged.sources) EXPECT_EQ(s, 1u);
}

TEST(MergeOriginal, OverlapUsesHomeSubdomain) {
  const auto g = path_graph(6);
  const auto plan = expand_partition(g, {0, 0, 0, 1, 1, 1}, 1);
  const Eigen::MatrixXd a = gaussian_draws(40, 4, 0.0, 1.0, 3);
  const Eigen::MatrixXd b = gaussian_draws(40, 4, 5.0, 1.0, 4);
  const auto merged = merge_risks_original({make_fit({0, 1, 2, 3}, 1, a), make_fit({2, 3, 4, 5}, 1, b)}, plan);
  // Area 2 lives in subdomain 0 (local 2); area 3 in subdomain 1 (local 1).
  EXPECT_EQ(merged.log_risk_draws.col(2), a.col(2));
  EXPECT_EQ(merged.log_risk_draws.col(3), b.col(1));
  EXPECT_EQ(merged.sources[2], 2u);
  EXPECT_EQ(merged.sources[0], 1u);
}

TEST(MergeOriginal, SingleSubdomainPassesThrough) {
  const auto g = path_graph(4);
  const auto plan = expand_partition(g, {0, 0, 0, 0}, 0);
  const Eigen::MatrixXd a = gaussian_draws(30, 8, 0.0, 1.0, 5);
  const auto fit = make_fit({0, 1, 2, 3}, 2, a);
  const auto merged = merge_risks_original({fit}, plan);
  EXPECT_EQ(merged.log_risk_draws, a);
  for (std::size_t k = 0; k < 8; ++k) EXPECT_EQ(merged.risks[k].median, fit.risks[k].median);
}

TEST(MergeOriginal, MissingHomeAreaIsAnError) {
  const auto g = path_graph(4);
  const auto plan = expand_partition(g, {0, 0, 1, 1}, 0);
  const Eigen::MatrixXd d = gaussian_draws(10, 2, 0.0, 1.0, 6);
  EXPECT_THROW(merge_risks_original({make_fit({0, 1}, 1, d), make_fit({1, 3}, 1, d)}, plan), DataError);
  EXPECT_THROW(merge_risks_original({make_fit({0, 1}, 1, d)}, plan), DataError);
}

TEST(MergeOriginal, TruncatesToCommonSampleCount) {
  const auto g = path_graph(2);
  const auto plan = expand_partition(g, {0, 1}, 0);
  const auto merged = merge_risks_original(
      {make_fit({0}, 1, gaussian_draws(30, 1, 0, 1, 7)), make_fit({1}, 1, gaussian_draws(20, 1, 0, 1, 8))}, plan);
  EXPECT_EQ(merged.log_risk_draws.rows(), 20);
}

TEST(MixtureWeights, Examples) {
  const auto w = mixture_weights({0.2, 0.3});
  EXPECT_NEAR(w[0], 0.4, 1e-15);
  EXPECT_NEAR(w[1], 0.6, 1e-15);
  EXPECT_EQ(mixture_weights({0.7}), std::vector<double>{1.0});
  EXPECT_THROW(mixture_weights({0.0, 0.0}), NumericError);
}

TEST(MergeMixture, SingleCoverageMatchesOriginal) {
  const auto g = path_graph(6);
  const auto plan = expand_partition(g, {0, 0, 0, 1, 1, 1}, 0);
  const std::vector<SubmodelFit> fits{make_fit({0, 1, 2}, 2, gaussian_draws(50, 6, 0, 1, 9)),
                                      make_fit({3, 4, 5}, 2, gaussian_draws(50, 6, 0, 1, 10))};
  const auto a = merge_risks_original(fits, plan);
  const auto b = merge_risks_mixture(fits, plan, 17);
  EXPECT_EQ(a.log_risk_draws, b.log_risk_draws);
  for (std::size_t k = 0; k < a.risks.size(); ++k) EXPECT_EQ(a.risks[k].mean, b.risks[k].mean);
}

TEST(MergeMixture, ChoosesComponentsByCpo) {
  const auto g = path_graph(2);
  const auto plan = expand_partition(g, {0, 1}, 1);
  const Eigen::Index S = 20000;
  const auto merged = merge_risks_mixture({make_fit({0, 1}, 1, Eigen::MatrixXd::Zero(S, 2), 0.2),
                                           make_fit({0, 1}, 1, Eigen::MatrixXd::Ones(S, 2), 0.3)},
                                          plan, 5);
  for (Eigen::Index c = 0; c < 2; ++c) {
    const double frac = merged.log_risk_draws.col(c).mean();
    EXPECT_NEAR(frac, 0.6, 4.0 * std::sqrt(0.24 / static_cast<double>(S)));
  }
}

TEST(MergeMixture, EqualCposMatchPooledResample) {
  const auto g = path_graph(3);
  const auto plan = expand_partition(g, {0, 0, 1}, 2);
  const Eigen::Index S = 20000;
  const Eigen::MatrixXd a = gaussian_draws(S, 3, 0.0, 0.3, 11);
  const Eigen::MatrixXd b = gaussian_draws(S, 3, 0.4, 0.2, 12);
  const auto merged = merge_risks_mixture({make_fit({0, 1, 2}, 1, a), make_fit({0, 1, 2}, 1, b)}, plan, 23);
  for (Eigen::Index c = 0; c < 3; ++c) {
    std::vector<double> pooled;
    for (Eigen::Index s = 0; s < S; ++s) {
      pooled.push_back(std::exp(a(s, c)));
      pooled.push_back(std::exp(b(s, c)));
    }
    const auto ref = stats::summarize(pooled);
    const auto& got = merged.risks[static_cast<std::size_t>(c)];
    const double mc_sd = ref.sd / std::sqrt(static_cast<double>(S));
    EXPECT_NEAR(got.mean, ref.mean, 2.0 * mc_sd * std::sqrt(2.0));
    EXPECT_NEAR(got.median, ref.median, 4.0 * mc_sd);
    EXPECT_NEAR(got.sd, ref.sd, 0.02 * ref.sd);
  }
}

TEST(MergeMixture, IdenticalComponentsGiveComponentSummaries) {
  const auto g = path_graph(2);
  const auto plan = expand_partition(g, {0, 1}, 1);
  const Eigen::Index S = 20000;
  const Eigen::MatrixXd a = gaussian_draws(S, 2, 0.2, 0.25, 13);
  const Eigen::MatrixXd b = gaussian_draws(S, 2, 0.2, 0.25, 14);
  const auto merged = merge_risks_mixture({make_fit({0, 1}, 1, a, 0.1), make_fit({0, 1}, 1, b, 0.7)}, plan, 3);
  const auto comp = risk_summaries(a);
  for (std::size_t c = 0; c < 2; ++c) {
    const double mc_sd = comp[c].sd / std::sqrt(static_cast<double>(S));
    EXPECT_NEAR(merged.risks[c].mean, comp[c].mean, 4.0 * mc_sd);
    EXPECT_NEAR(merged.risks[c].median, comp[c].median, 6.0 * mc_sd);
  }
}

TEST(MergeMixture, ZeroCposAreAnError) {
  const auto g = path_graph(2);
  const auto plan = expand_partition(g, {0, 1}, 1);
  const Eigen::MatrixXd d = gaussian_draws(10, 2, 0, 1, 15);
  EXPECT_THROW(merge_risks_mixture({make_fit({0, 1}, 1, d, 0.0), make_fit({0, 1}, 1, d, 0.0)}, plan, 1),
               NumericError);
}

TEST(MergeMixture, DependsOnlyOnSeed) {
  const auto g = path_graph(4);
  const auto plan = expand_partition(g, {0, 0, 1, 1}, 1);
  const std::vector<SubmodelFit> fits{make_fit({0, 1, 2}, 2, gaussian_draws(100, 6, 0, 1, 16), 0.3),
                                      make_fit({1, 2, 3}, 2, gaussian_draws(100, 6, 1, 1, 17), 0.4)};
  const auto a = merge_risks_mixture(fits, plan, 99);
  const auto b = merge_risks_mixture(fits, plan, 99);
  const auto c = merge_risks_mixture(fits, plan, 100);
  EXPECT_EQ(a.log_risk_draws, b.log_risk_draws);
  EXPECT_NE(a.log_risk_draws, c.log_risk_draws);
}

TEST(Cmc, SingleSubdomainIsIdentity) {
  const Eigen::MatrixXd d = gaussian_draws(1, 50, 0, 1, 18);
  EXPECT_EQ(cmc_combine(d, Eigen::VectorXd::Constant(1, 0.3)), Eigen::VectorXd(d.row(0).transpose()));
}

TEST(Cmc, EqualVariancesAverage) {
  const Eigen::MatrixXd d = gaussian_draws(2, 50, 0, 1, 19);
  const Eigen::VectorXd got = cmc_combine(d, Eigen::Vector2d(0.4, 0.4));
  for (Eigen::Index s = 0; s < 50; ++s) EXPECT_NEAR(got(s), 0.5 * (d(0, s) + d(1, s)), 1e-15);
  EXPECT_EQ(cmc_weights(Eigen::Vector2d(0.4, 0.4)), Eigen::Vector2d(0.5, 0.5));
}

TEST(Cmc, InverseVarianceWeights) {
  const Eigen::VectorXd w = cmc_weights(Eigen::Vector2d(1.0, 3.0));
  EXPECT_NEAR(w(0), 0.75, 1e-15);
  EXPECT_NEAR(w(1), 0.25, 1e-15);
  std::mt19937_64 rng(20);
  std::uniform_real_distribution<double> u(0.01, 5.0);
  for (int rep = 0; rep < 50; ++rep) {
    Eigen::VectorXd v(1 + rep % 6);
    for (Eigen::Index k = 0; k < v.size(); ++k) v(k) = u(rng);
    const Eigen::VectorXd ww = cmc_weights(v);
    EXPECT_NEAR(ww.sum(), 1.0, 1e-14);
    EXPECT_TRUE((ww.array() > 0.0).all());
  }
}

TEST(Cmc, ZeroVarianceUsesThatSubdomainWithWarning) {
  const Eigen::MatrixXd d = gaussian_draws(3, 20, 0, 1, 21);
  std::vector<std::string> warnings;
  const Eigen::VectorXd got = cmc_combine(d, Eigen::Vector3d(0.5, 0.0, 0.2), &warnings);
  EXPECT_EQ(got, Eigen::VectorXd(d.row(1).transpose()));
  ASSERT_EQ(warnings.size(), 1u);
  EXPECT_THROW(cmc_combine(d, Eigen::Vector3d(0.5, -1.0, 0.2)), NumericError);
  EXPECT_THROW(cmc_combine(d, Eigen::Vector2d(0.5, 0.2)), DataError);
}

TEST(Cmc, CorrelationsStayInRange) {
  std::mt19937_64 rng(22);
  std::uniform_real_distribution<double> u(-1.0, 1.0), v(0.001, 2.0);
  for (int rep = 0; rep < 100; ++rep) {
    const Eigen::Index D = 2 + rep % 5;
    Eigen::MatrixXd d(D, 40);
    for (Eigen::Index k = 0; k < d.size(); ++k) d.data()[k] = u(rng);
    if (rep % 10 == 0) d.row(0).setConstant(1.0);
    Eigen::VectorXd var(D);
    for (Eigen::Index k = 0; k < D; ++k) var(k) = v(rng);
    const Eigen::VectorXd got = cmc_combine(d, var);
    EXPECT_LE(got.maxCoeff(), 1.0);
    EXPECT_GE(got.minCoeff(), -1.0);
    for (Eigen::Index s = 0; s < got.size(); ++s) {
      EXPECT_LE(got(s), d.col(s).maxCoeff() + 1e-15);
      EXPECT_GE(got(s), d.col(s).minCoeff() - 1e-15);
    }
  }
}

TEST(MergeGlobal, SingleFitPassesParametersThrough) {
  auto fit = make_fit({0, 1}, 2, gaussian_draws(30, 4, 0, 1, 23));
  fit.hyper_draws = gaussian_draws(30, 3, 0, 0.3, 24);
  fit.alpha_draws = gaussian_draws(30, 2, 0, 0.1, 25);
  const auto g = merge_global({fit});
  EXPECT_EQ(g.names, (std::vector<std::string>{psi_names(2)[0], psi_names(2)[1], psi_names(2)[2], "alpha_1", "alpha_2"}));
  EXPECT_EQ(g.draws, parameter_draws(fit));
  for (Eigen::Index s = 0; s < 30; ++s) {
    const double rho = g.draws(s, 0);
    EXPECT_LE(std::abs(rho), 1.0);
  }
}

TEST(Criteria, SingleDrawSingleCell) {
  Eigen::MatrixXd mu(1, 1);
  mu << 2.0;
  const auto c = deviance_criteria(mu, Eigen::VectorXd::Constant(1, 2.0));
  const double log_p = std::log(2.0 * std::exp(-2.0));
  EXPECT_NEAR(c.dic, -2.0 * log_p, 1e-14);
  EXPECT_NEAR(c.mean_deviance, -2.0 * log_p, 1e-14);
  EXPECT_NEAR(c.p_d, 0.0, 1e-14);
  EXPECT_NEAR(c.mean_deviance_unscaled, -log_p, 1e-14);
  EXPECT_NEAR(c.dic_unscaled, 2.0 * -log_p + 2.0 * log_p, 1e-14);
  EXPECT_TRUE(std::isnan(c.waic));
}

TEST(Criteria, ConstantDrawsHaveNoWaicPenalty) {
  const Eigen::MatrixXd mu = Eigen::MatrixXd::Constant(25, 3, 4.0);
  const Eigen::Vector3d o(2, 4, 7);
  const auto c = deviance_criteria(mu, o);
  EXPECT_EQ(c.p_waic, 0.0);
  double lp = 0.0;
  for (int k = 0; k < 3; ++k) lp += stats::log_poisson_pmf(o(k), 4.0);
  EXPECT_NEAR(c.waic, -2.0 * lp, 1e-12);
  EXPECT_NEAR(c.dic, -2.0 * lp, 1e-12);
}

TEST(Criteria, TwoDrawsByHand) {
  Eigen::MatrixXd mu(2, 1);
  mu << 1.0, 3.0;
  const auto c = deviance_criteria(mu, Eigen::VectorXd::Constant(1, 2.0));
  const double l1 = std::log(0.5 * std::exp(-1.0)), l3 = std::log(4.5 * std::exp(-3.0));
  const double l2 = std::log(2.0 * std::exp(-2.0));
  EXPECT_NEAR(c.mean_deviance, -(l1 + l3), 1e-12);
  EXPECT_NEAR(c.deviance_at_mean, -2.0 * l2, 1e-12);
  EXPECT_NEAR(c.dic, -2.0 * (l1 + l3) + 2.0 * l2, 1e-12);
  const double lppd = std::log(0.5 * (std::exp(l1) + std::exp(l3)));
  const double var = 0.5 * (l1 - l3) * (l1 - l3);  // S-1 variance of two values
  EXPECT_NEAR(c.p_waic, var, 1e-12);
  EXPECT_NEAR(c.waic, -2.0 * lppd + 2.0 * var, 1e-12);
}

TEST(Criteria, RejectsNonPositiveMeans) {
  Eigen::MatrixXd mu(2, 1);
  mu << 1.0, 0.0;
  EXPECT_THROW(deviance_criteria(mu, Eigen::VectorXd::Constant(1, 1.0)), NumericError);
  mu(1) = -1.0;
  EXPECT_THROW(deviance_criteria(mu, Eigen::VectorXd::Constant(1, 1.0)), NumericError);
  EXPECT_THROW(deviance_criteria(Eigen::MatrixXd::Ones(2, 2), Eigen::VectorXd::Ones(3)), DataError);
}

TEST(Criteria, LogRiskFormMatchesMeans) {
  const Eigen::MatrixXd lr = gaussian_draws(40, 6, 0.0, 0.3, 26);
  Eigen::MatrixXd o(3, 2), e(3, 2);
  o << 3, 5, 0, 8, 2, 1;
  e << 2.5, 4.0, 1.0, 6.0, 3.0, 1.5;
  Eigen::MatrixXd mu = lr.array().exp();
  for (Eigen::Index k = 0; k < 6; ++k) mu.col(k) *= e.data()[k];
  const auto a = deviance_criteria_log_risk(lr, o, e);
  const auto b = deviance_criteria(mu, Eigen::Map<const Eigen::VectorXd>(o.data(), 6));
  EXPECT_EQ(a.dic, b.dic);
  EXPECT_EQ(a.waic, b.waic);
}

TEST(MergeFits, SingleSubdomainCriteriaEqualDirect) {
  const auto g = path_graph(5);
  Eigen::MatrixXd o(5, 2), e = Eigen::MatrixXd::Constant(5, 2, 6.0);
  o << 4, 7, 6, 5, 9, 8, 3, 6, 7, 4;
  const auto data = make_panel(o, e);
  FitConfig cfg;
  cfg.samples = 200;
  cfg.seed = 8;
  const auto fit = fit_submodel(data, g, cfg);
  const auto plan = expand_partition(g, std::vector<std::size_t>(5, 0), 0);
  for (auto strategy : {MergeStrategy::original, MergeStrategy::mixture}) {
    const auto merged = merge_fits({fit}, plan, data, strategy, 1);
    const auto direct = deviance_criteria_log_risk(fit.log_risk_draws, data.observed, data.expected);
    EXPECT_EQ(merged.criteria.dic, direct.dic);
    EXPECT_EQ(merged.criteria.waic, direct.waic);
    EXPECT_EQ(merged.criteria.p_d, direct.p_d);
    EXPECT_EQ(merged.criteria.mean_deviance, direct.mean_deviance);
    EXPECT_EQ(merged.risks.log_risk_draws, fit.log_risk_draws);
    EXPECT_EQ(merged.global.draws, parameter_draws(fit));
  }
}

TEST(Kde, IntegratesToOneAndTracksTheDensity) {
  std::mt19937_64 rng(27);
  std::normal_distribution<double> nd(0.3, 0.2);
  std::vector<double> d(20000);
  for (double& x : d) x = nd(rng);
  const auto curve = gaussian_kde(d);
  EXPECT_NEAR(trapezoid(curve), 1.0, 1e-12);
  boost::math::normal ref(0.3, 0.2);
  for (std::size_t k = 0; k < curve.x.size(); k += 16) {
    EXPECT_NEAR(curve.density[k], boost::math::pdf(ref, curve.x[k]), 0.06);
  }
  std::vector<double> sorted = d;
  std::sort(sorted.begin(), sorted.end());
  const double sd = std::sqrt(stats::variance(d));
  const double iqr = stats::quantile_sorted(sorted, 0.75) - stats::quantile_sorted(sorted, 0.25);
  EXPECT_NEAR(curve.bandwidth, 0.9 * std::min(sd, iqr / 1.34) * std::pow(20000.0, -0.2), 1e-15);
}

TEST(Kde, DegenerateInputs) {
  const std::vector<double> one{0.5};
  EXPECT_NEAR(trapezoid(gaussian_kde(one)), 1.0, 1e-12);
  const std::vector<double> same(10, 0.2);
  EXPECT_NEAR(trapezoid(gaussian_kde(same)), 1.0, 1e-12);
  EXPECT_THROW(gaussian_kde(std::vector<double>{}), DataError);
}
