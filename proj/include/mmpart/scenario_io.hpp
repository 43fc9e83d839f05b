#pragma once

// Files for simulated data sets and scoring of finished runs against them.

#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "mmpart/errors.hpp"
#include "mmpart/pipeline.hpp"
#include "mmpart/report.hpp"
#include "mmpart/simulate.hpp"

namespace mmpart {

/// Writes edges.tsv, partition.tsv, counts.csv, truth.csv and
/// truth_params.csv for one replicate. `home` may be empty (no partition).
inline void write_scenario(const fs::path& dir, const ScenarioSpec& spec, const Replicate& rep,
                           const std::vector<std::size_t>& home) {
  using detail::num;
  fs::create_directories(dir);
  const auto& g = spec.graph;
  const auto n = static_cast<Eigen::Index>(g.n_areas());
  const auto J = spec.alpha.size();
  {
    auto out = detail::open_out(dir / "edges.tsv");
    write_edge_list(out, g);
  }
  if (!home.empty()) {
    auto out = detail::open_out(dir / "partition.tsv");
    for (std::size_t i = 0; i < g.n_areas(); ++i) out << g.labels()[i] << '\t' << "s" << home[i] + 1 << '\n';
  }
  {
    auto out = detail::open_out(dir / "counts.csv");
    out << "area,disease,observed,expected\n";
    for (Eigen::Index j = 0; j < J; ++j)
      for (Eigen::Index i = 0; i < n; ++i)
        out << g.labels()[static_cast<std::size_t>(i)] << ",d" << j + 1 << ',' << num(rep.observed(i, j)) << ','
            << num(spec.expected(i, j)) << '\n';
  }
  {
    auto out = detail::open_out(dir / "truth.csv");
    out << "area,disease,risk\n";
    for (Eigen::Index j = 0; j < J; ++j)
      for (Eigen::Index i = 0; i < n; ++i)
        out << g.labels()[static_cast<std::size_t>(i)] << ",d" << j + 1 << ',' << num(std::exp(rep.log_risk(i, j)))
            << '\n';
  }
  {
    auto out = detail::open_out(dir / "truth_params.csv");
    out << "subdomain,parameter,value\n";
    const auto names = psi_names(static_cast<std::size_t>(J));
    for (std::size_t d = 0; d < spec.truths.size(); ++d) {
      const auto& t = spec.truths[d];
      std::vector<double> v;
      for (Eigen::Index a = 0; a < J; ++a)
        for (Eigen::Index b = a + 1; b < J; ++b) v.push_back(t.rho(a, b));
      for (Eigen::Index a = 0; a < J; ++a) v.push_back(t.sigma2(a));
      const std::string sub = spec.scenario == 1 ? std::string("all") : "s" + std::to_string(d + 1);
      for (std::size_t k = 0; k < names.size(); ++k) out << sub << ',' << names[k] << ',' << num(v[k]) << '\n';
      if (spec.scenario == 1) break;
    }
    for (Eigen::Index j = 0; j < J; ++j) out << "all,alpha_" << j + 1 << ',' << num(spec.alpha(j)) << '\n';
  }
}

/// Risk medians and 95% limits of a run, aligned to the truth's cells.
inline std::pair<RiskEstimate, Eigen::MatrixXd> align_run(const Table& truth, const Table& risks) {
  std::map<std::string, Eigen::Index> area, disease;
  for (const auto& row : truth.rows) {
    area.emplace(row[truth.column("area")], static_cast<Eigen::Index>(area.size()));
    disease.emplace(row[truth.column("disease")], static_cast<Eigen::Index>(disease.size()));
  }
  const auto n = static_cast<Eigen::Index>(area.size());
  const auto J = static_cast<Eigen::Index>(disease.size());
  Eigen::MatrixXd t = Eigen::MatrixXd::Constant(n, J, std::nan(""));
  for (const auto& row : truth.rows) {
    t(area[row[truth.column("area")]], disease[row[truth.column("disease")]]) =
        detail::parse_number(row[truth.column("risk")], "risk");
  }
  RiskEstimate est{Eigen::MatrixXd::Constant(n, J, std::nan("")), Eigen::MatrixXd::Constant(n, J, std::nan("")),
                   Eigen::MatrixXd::Constant(n, J, std::nan(""))};
  for (const auto& row : risks.rows) {
    const auto a = area.find(row[risks.column("area")]);
    const auto d = disease.find(row[risks.column("disease")]);
    if (a == area.end() || d == disease.end()) throw DataError("score: run has a cell missing from the truth");
    est.median(a->second, d->second) = detail::parse_number(row[risks.column("median")], "median");
    est.lower(a->second, d->second) = detail::parse_number(row[risks.column("q025")], "q025");
    est.upper(a->second, d->second) = detail::parse_number(row[risks.column("q975")], "q975");
  }
  if (!t.allFinite() || !est.median.allFinite()) throw DataError("score: truth and run cover different cells");
  return {est, t};
}

/// Scores (truth.csv, run directory) pairs, one per replicate.
inline AccuracyReport score_runs(const std::vector<std::pair<fs::path, fs::path>>& pairs) {
  std::vector<RiskEstimate> est;
  std::vector<Eigen::MatrixXd> truth;
  for (const auto& [t, run] : pairs) {
    auto [e, tr] = align_run(read_table(t), read_table(run / "risks.csv"));
    est.push_back(std::move(e));
    truth.push_back(std::move(tr));
  }
  return score(est, truth);
}

inline void write_accuracy(const fs::path& path, const AccuracyReport& r) {
  using detail::num;
  auto out = detail::open_out(path);
  out << "MARB,MRRMSE,EC\n" << num(r.mean_marb) << ',' << num(r.mean_mrrmse) << ',' << num(r.coverage) << '\n';
}

}  // namespace mmpart
