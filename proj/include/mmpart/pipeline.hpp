#pragma once

// End-to-end pipeline: configuration, ingestion, parallel subdomain fits
// with resumable blobs, merging and output tables.

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>
#include <nlohmann/json.hpp>

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <exception>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "mmpart/counts.hpp"
#include "mmpart/errors.hpp"
#include "mmpart/fit.hpp"
#include "mmpart/graph.hpp"
#include "mmpart/merge.hpp"
#include "mmpart/random.hpp"
#include "mmpart/serialize.hpp"

namespace mmpart {

namespace fs = std::filesystem;

inline constexpr const char* kWorkersEnv = "MMPART_WORKERS";

struct PipelineConfig {
  fs::path edges;
  fs::path counts;
  fs::path partition;  // empty: one subdomain covering everything
  fs::path output;
  std::size_t order = 0;
  MergeStrategy strategy = MergeStrategy::original;
  FitConfig fit;
  std::size_t workers = 1;
  std::uint64_t seed = 1;

  void validate() const {
    if (edges.empty()) throw ConfigError("config: data.edges is required");
    if (counts.empty()) throw ConfigError("config: data.counts is required");
    if (output.empty()) throw ConfigError("config: execution.output is required");
    if (workers < 1) throw ConfigError("config: workers must be >= 1");
    if (fit.samples < 1) throw ConfigError("config: samples must be >= 1");
    if (fit.max_newton_iterations < 1) throw ConfigError("config: max_newton_iterations must be >= 1");
    if (fit.optimizer_max_iterations < 1) throw ConfigError("config: optimizer_max_iterations must be >= 1");
    for (double v : {fit.newton_tolerance, fit.optimizer_tolerance, fit.gradient_step, fit.hessian_step}) {
      if (!(v > 0.0)) throw ConfigError("config: tolerances and steps must be positive");
    }
  }
};

namespace detail {

template <class T>
T parse_config_value(const std::string& key, const std::string& raw) {
  std::istringstream in(raw);
  T v{};
  in >> v;
  if (!in || !(in >> std::ws).eof()) throw ConfigError("config: bad value '" + raw + "' for " + key);
  return v;
}

// Non-negative integer; rejects signs so "-1" does not wrap.
inline std::uint64_t parse_count(const std::string& key, const std::string& raw) {
  if (raw.empty() || raw.find_first_not_of("0123456789") != std::string::npos) {
    throw ConfigError("config: " + key + " must be a non-negative integer, got '" + raw + "'");
  }
  return parse_config_value<std::uint64_t>(key, raw);
}

inline bool parse_flag(const std::string& key, const std::string& raw) {
  if (raw == "true" || raw == "1" || raw == "yes" || raw == "on") return true;
  if (raw == "false" || raw == "0" || raw == "no" || raw == "off") return false;
  throw ConfigError("config: " + key + " must be true or false, got '" + raw + "'");
}

}  // namespace detail

/// Reads an INI-style config with [data], [model] and [execution] sections.
/// Relative paths are resolved against the config file's directory.
inline PipelineConfig read_config(std::istream& in, const fs::path& base = {}) {
  boost::property_tree::ptree tree;
  try {
    boost::property_tree::ini_parser::read_ini(in, tree);
  } catch (const boost::property_tree::ini_parser_error& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  PipelineConfig c;
  auto path_of = [&](const std::string& raw) {
    fs::path p(raw);
    return p.is_relative() && !base.empty() ? base / p : p;
  };
  using Setter = std::function<void(const std::string&)>;
  const std::map<std::string, std::map<std::string, Setter>> known{
      {"data",
       {{"edges", [&](const std::string& v) { c.edges = path_of(v); }},
        {"counts", [&](const std::string& v) { c.counts = path_of(v); }},
        {"partition", [&](const std::string& v) { c.partition = v.empty() ? fs::path() : path_of(v); }}}},
      {"model",
       {{"order", [&](const std::string& v) { c.order = detail::parse_count("model.order", v); }},
        {"strategy", [&](const std::string& v) { c.strategy = parse_strategy(v); }},
        {"samples", [&](const std::string& v) { c.fit.samples = static_cast<int>(detail::parse_count("model.samples", v)); }},
        {"max_newton_iterations",
         [&](const std::string& v) { c.fit.max_newton_iterations = static_cast<int>(detail::parse_count("model.max_newton_iterations", v)); }},
        {"newton_tolerance", [&](const std::string& v) { c.fit.newton_tolerance = detail::parse_config_value<double>("model.newton_tolerance", v); }},
        {"optimizer_tolerance",
         [&](const std::string& v) { c.fit.optimizer_tolerance = detail::parse_config_value<double>("model.optimizer_tolerance", v); }},
        {"optimizer_max_iterations",
         [&](const std::string& v) { c.fit.optimizer_max_iterations = static_cast<int>(detail::parse_count("model.optimizer_max_iterations", v)); }},
        {"gradient_step", [&](const std::string& v) { c.fit.gradient_step = detail::parse_config_value<double>("model.gradient_step", v); }},
        {"hessian_step", [&](const std::string& v) { c.fit.hessian_step = detail::parse_config_value<double>("model.hessian_step", v); }},
        {"wishart_dof", [&](const std::string& v) { c.fit.wishart_dof = detail::parse_config_value<double>("model.wishart_dof", v); }},
        {"mean_correction", [&](const std::string& v) { c.fit.mean_correction = detail::parse_flag("model.mean_correction", v); }}}},
      {"execution",
       {{"workers", [&](const std::string& v) { c.workers = detail::parse_count("execution.workers", v); }},
        {"seed", [&](const std::string& v) { c.seed = detail::parse_count("execution.seed", v); }},
        {"output", [&](const std::string& v) { c.output = path_of(v); }}}}};
  for (const auto& [section, body] : tree) {
    auto s = known.find(section);
    if (s == known.end()) throw ConfigError("config: unknown section [" + section + "]");
    if (!body.data().empty()) throw ConfigError("config: key '" + section + "' outside a section");
    for (const auto& [key, node] : body) {
      auto k = s->second.find(key);
      if (k == s->second.end()) throw ConfigError("config: unknown key " + section + "." + key);
      k->second(detail::trim(node.data()));
    }
  }
  return c;
}

inline PipelineConfig read_config(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file " + path.string());
  return read_config(in, path.parent_path());
}

/// Applies the worker-count environment override, if set.
inline void apply_environment(PipelineConfig& c) {
  if (const char* w = std::getenv(kWorkersEnv); w && *w) {
    c.workers = detail::parse_count(kWorkersEnv, w);
    if (c.workers < 1) throw ConfigError(std::string(kWorkersEnv) + " must be >= 1");
  }
}

/// Graph, full-domain panel and partition plan.
struct PipelineInputs {
  AreaGraph graph;
  CountPanel panel;
  PartitionPlan plan;
};

namespace detail {

inline std::vector<std::string> count_file_areas(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open counts file " + path.string());
  std::string line;
  if (!std::getline(in, line)) throw DataError("counts file is empty");
  const auto header = split_csv(line);
  const auto it = std::find(header.begin(), header.end(), "area");
  if (it == header.end()) throw DataError("counts file lacks column 'area'");
  const auto col = static_cast<std::size_t>(it - header.begin());
  std::vector<std::string> out;
  while (std::getline(in, line)) {
    if (trim(line).empty()) continue;
    const auto cells = split_csv(line);
    if (cells.size() > col) out.push_back(cells[col]);
  }
  return out;
}

inline void check_label(const std::string& l) {
  if (l.empty() || l.find_first_of(",\"\t\n\r") != std::string::npos) {
    throw DataError("area label '" + l + "' is empty or contains a separator character");
  }
}

}  // namespace detail

/// Areas are the union of edge-list and counts-file labels, sorted.
inline PipelineInputs load_inputs(const PipelineConfig& c, bool single_domain) {
  PipelineInputs in;
  const auto edges = read_edge_list(c.edges.string());
  std::set<std::string> labels;
  for (const auto& [a, b] : edges) {
    labels.insert(a);
    labels.insert(b);
  }
  for (auto& a : detail::count_file_areas(c.counts)) labels.insert(std::move(a));
  for (const auto& l : labels) detail::check_label(l);
  in.graph = build_graph(edges, std::vector<std::string>(labels.begin(), labels.end()));
  in.panel = ingest_counts(c.counts.string(), in.graph);
  if (single_domain || c.partition.empty()) {
    in.plan = expand_partition(in.graph, std::vector<std::size_t>(in.graph.n_areas(), 0), 0);
    in.plan.subdomain_ids = {"all"};
  } else {
    const PartitionFile pf = read_partition(c.partition.string(), in.graph);
    in.plan = expand_partition(in.graph, pf.home, c.order);
    in.plan.subdomain_ids = pf.subdomain_ids;
  }
  return in;
}

/// Runs job(0..n-1) on a fixed pool of `workers` threads. Every job runs
/// even if another fails; the failure with the lowest index is rethrown.
inline void run_pool(std::size_t n, std::size_t workers, const std::function<void(std::size_t)>& job) {
  std::vector<std::exception_ptr> errors(n);
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t k = next++; k < n; k = next++) {
      try {
        job(k);
      } catch (...) {
        errors[k] = std::current_exception();
      }
    }
  };
  const std::size_t threads = std::max<std::size_t>(1, std::min(workers, n));
  if (threads == 1) {
    worker();
  } else {
    std::vector<std::jthread> pool;
    for (std::size_t t = 0; t < threads; ++t) pool.emplace_back(worker);
  }
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

namespace detail {

// Rethrows the current exception with a stage prefix, keeping its category.
[[noreturn]] inline void rethrow_tagged(const std::string& stage) {
  try {
    throw;
  } catch (const ConfigError& e) {
    throw ConfigError("[" + stage + "] " + e.what());
  } catch (const NumericError& e) {
    throw NumericError("[" + stage + "] " + e.what());
  } catch (const DataError& e) {
    throw DataError("[" + stage + "] " + e.what());
  } catch (const std::exception& e) {
    throw std::runtime_error("[" + stage + "] " + e.what());
  }
}

}  // namespace detail

inline fs::path blob_path(const fs::path& output, std::size_t d) {
  return output / "fits" / ("subdomain_" + std::to_string(d + 1) + ".bin");
}

/// Fit configuration of subdomain d: the root seed is split by index so the
/// draws do not depend on scheduling.
inline FitConfig subdomain_config(const PipelineConfig& c, std::size_t d) {
  FitConfig f = c.fit;
  f.seed = derive_seed(c.seed, d);
  return f;
}

struct FitStage {
  std::vector<SubmodelFit> fits;
  std::vector<bool> resumed;
  double seconds = 0.0;
};

/// Fits every subdomain, reusing matching blobs in output/fits. `after_fit`
/// is called (from worker threads) once a fresh blob is on disk.
inline FitStage run_fits(const PipelineConfig& c, const PipelineInputs& in,
                         const std::function<void(std::size_t)>& after_fit = {}) {
  const auto t0 = std::chrono::steady_clock::now();
  fs::create_directories(c.output / "fits");
  const std::size_t D = in.plan.n_subdomains;
  FitStage st;
  st.fits.resize(D);
  std::vector<char> resumed(D, 0);
  run_pool(D, c.workers, [&](std::size_t d) {
    try {
      const Subgraph sub = subgraph(in.graph, in.plan.expanded[d]);
      const CountPanel data = in.panel.rows(sub.to_parent);
      const FitConfig fc = subdomain_config(c, d);
      const std::uint64_t fp = fit_fingerprint(data, sub.graph, fc);
      const fs::path blob = blob_path(c.output, d);
      if (load_fit_file(blob, st.fits[d], fp)) {
        resumed[d] = 1;
        return;
      }
      st.fits[d] = fit_submodel(data, sub.graph, fc);
      save_fit_file(blob, st.fits[d], fp);
      if (after_fit) after_fit(d);
    } catch (...) {
      detail::rethrow_tagged("fit subdomain " + in.plan.subdomain_ids[d]);
    }
  });
  st.resumed.assign(resumed.begin(), resumed.end());
  st.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return st;
}

/// Loads every blob of a finished fit stage (no refitting).
inline std::vector<SubmodelFit> load_fits(const PipelineConfig& c, const PipelineInputs& in) {
  std::vector<SubmodelFit> fits;
  for (std::size_t d = 0; d < in.plan.n_subdomains; ++d) {
    const fs::path blob = blob_path(c.output, d);
    if (!fs::exists(blob)) throw DataError("[merge] missing fit blob " + blob.string() + "; run the fit stage first");
    const Subgraph sub = subgraph(in.graph, in.plan.expanded[d]);
    const CountPanel data = in.panel.rows(sub.to_parent);
    SubmodelFit f;
    if (!load_fit_file(blob, f, fit_fingerprint(data, sub.graph, subdomain_config(c, d)))) {
      throw DataError("[merge] blob " + blob.string() + " does not match the current inputs and config");
    }
    fits.push_back(std::move(f));
  }
  return fits;
}

inline std::uint64_t merge_seed(std::uint64_t root) { return derive_seed(root, 0xffffffffULL); }

// ---- output tables ---------------------------------------------------------

namespace detail {

inline std::string num(double v) {
  if (std::isnan(v)) return "NA";
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.10g", v);
  return buf;
}

inline std::ofstream open_out(const fs::path& p) {
  std::ofstream out(p, std::ios::trunc);
  if (!out) throw DataError("cannot write " + p.string());
  return out;
}

inline void summary_cells(std::ostream& out, const stats::Summary& s) {
  out << num(s.mean) << ',' << num(s.sd) << ',' << num(s.median) << ',' << num(s.q025) << ',' << num(s.q975);
}

}  // namespace detail

inline const std::vector<std::string>& output_tables() {
  static const std::vector<std::string> names{"risks.csv",    "global_params.csv", "local_params.csv",
                                               "criteria.csv", "global_draws.csv",  "partition.csv"};
  return names;
}

/// Writes the CSV tables of a merged result into `dir`.
inline void write_outputs(const fs::path& dir, const PipelineInputs& in, const MergedResult& m) {
  using detail::num;
  fs::create_directories(dir);
  const auto& g = in.graph;
  const std::size_t n = g.n_areas();
  const std::size_t J = in.panel.n_diseases();
  {
    auto out = detail::open_out(dir / "risks.csv");
    out << "area,disease,observed,expected,mean,sd,median,q025,q975,exceedance,sources\n";
    for (std::size_t j = 0; j < J; ++j) {
      for (std::size_t i = 0; i < n; ++i) {
        const auto& r = m.risks.risks[j * n + i];
        out << g.labels()[i] << ',' << in.panel.disease_names[j] << ','
            << num(in.panel.observed(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j))) << ','
            << num(in.panel.expected(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j))) << ','
            << num(r.mean) << ',' << num(r.sd) << ',' << num(r.median) << ',' << num(r.q025) << ','
            << num(r.q975) << ',' << num(r.exceedance) << ',' << m.risks.sources[i] << '\n';
      }
    }
  }
  {
    auto out = detail::open_out(dir / "global_params.csv");
    out << "parameter,mean,sd,median,q025,q975\n";
    for (std::size_t k = 0; k < m.global.names.size(); ++k) {
      out << m.global.names[k] << ',';
      detail::summary_cells(out, m.global.summaries[k]);
      out << '\n';
    }
  }
  {
    auto out = detail::open_out(dir / "local_params.csv");
    out << "subdomain,n_home,n_areas,parameter,mean,sd,median,q025,q975\n";
    for (std::size_t d = 0; d < m.local.size(); ++d) {
      const auto n_home = static_cast<std::size_t>(std::count(in.plan.home.begin(), in.plan.home.end(), d));
      for (std::size_t k = 0; k < m.global.names.size(); ++k) {
        out << in.plan.subdomain_ids[d] << ',' << n_home << ',' << in.plan.expanded[d].size() << ','
            << m.global.names[k] << ',';
        detail::summary_cells(out, m.local[d][k]);
        out << '\n';
      }
    }
  }
  {
    const Criteria& c = m.criteria;
    auto out = detail::open_out(dir / "criteria.csv");
    out << "strategy,mean_deviance,deviance_at_mean,p_d,dic,mean_deviance_unscaled,p_d_unscaled,dic_unscaled,waic,p_waic\n";
    out << to_string(m.strategy) << ',' << num(c.mean_deviance) << ',' << num(c.deviance_at_mean) << ','
        << num(c.p_d) << ',' << num(c.dic) << ',' << num(c.mean_deviance_unscaled) << ',' << num(c.p_d_unscaled)
        << ',' << num(c.dic_unscaled) << ',' << num(c.waic) << ',' << num(c.p_waic) << '\n';
  }
  {
    auto out = detail::open_out(dir / "global_draws.csv");
    out << "draw";
    for (const auto& name : m.global.names) out << ',' << name;
    out << '\n';
    for (Eigen::Index s = 0; s < m.global.draws.rows(); ++s) {
      out << s + 1;
      for (Eigen::Index k = 0; k < m.global.draws.cols(); ++k) out << ',' << num(m.global.draws(s, k));
      out << '\n';
    }
  }
  {
    auto out = detail::open_out(dir / "partition.csv");
    out << "area,subdomain\n";
    for (std::size_t i = 0; i < n; ++i) out << g.labels()[i] << ',' << in.plan.subdomain_ids[in.plan.home[i]] << '\n';
  }
}

struct RunReport {
  double run_seconds = 0.0;
  double merge_seconds = 0.0;
  double total_seconds = 0.0;
  Criteria criteria;
  std::vector<std::string> outputs;
  std::vector<std::string> warnings;
  std::size_t n_subdomains = 0;
  std::size_t resumed = 0;
};

inline void write_run_report(const fs::path& dir, const PipelineConfig& c, const PipelineInputs& in,
                             const FitStage* st, const std::vector<SubmodelFit>& fits, const RunReport& r) {
  nlohmann::json j;
  j["timings"] = {{"run", r.run_seconds}, {"merge", r.merge_seconds}, {"total", r.total_seconds}};
  j["strategy"] = to_string(c.strategy);
  j["order"] = in.plan.order;
  j["n_subdomains"] = in.plan.n_subdomains;
  j["n_areas"] = in.graph.n_areas();
  j["diseases"] = in.panel.disease_names;
  j["workers"] = c.workers;
  j["seed"] = c.seed;
  j["samples"] = c.fit.samples;
  j["criteria"] = {{"mean_deviance", r.criteria.mean_deviance}, {"deviance_at_mean", r.criteria.deviance_at_mean},
                   {"p_d", r.criteria.p_d},         {"dic", r.criteria.dic},
                   {"dic_unscaled", r.criteria.dic_unscaled}, {"waic", std::isnan(r.criteria.waic) ? nlohmann::json() : nlohmann::json(r.criteria.waic)}};
  nlohmann::json subs = nlohmann::json::array();
  for (std::size_t d = 0; d < fits.size(); ++d) {
    subs.push_back({{"subdomain", in.plan.subdomain_ids[d]},
                    {"n_areas", fits[d].n_areas()},
                    {"components", fits[d].n_components},
                    {"fit_seconds", fits[d].seconds},
                    {"resumed", st ? static_cast<bool>(st->resumed[d]) : true},
                    {"warnings", fits[d].warnings}});
  }
  j["subdomains"] = subs;
  j["warnings"] = r.warnings;
  j["outputs"] = r.outputs;
  auto out = detail::open_out(dir / "run_report.json");
  out << j.dump(2) << '\n';
}

/// Merges `fits` and writes every output table and the run report.
inline RunReport finish_run(const PipelineConfig& c, const PipelineInputs& in, const std::vector<SubmodelFit>& fits,
                            const FitStage* st, std::chrono::steady_clock::time_point t_start) {
  RunReport r;
  r.n_subdomains = fits.size();
  r.run_seconds = st ? st->seconds : 0.0;
  if (st) r.resumed = static_cast<std::size_t>(std::count(st->resumed.begin(), st->resumed.end(), true));
  const auto t0 = std::chrono::steady_clock::now();
  MergedResult m;
  try {
    m = merge_fits(fits, in.plan, in.panel, c.strategy, merge_seed(c.seed));
    write_outputs(c.output, in, m);
  } catch (...) {
    detail::rethrow_tagged("merge");
  }
  r.merge_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  r.criteria = m.criteria;
  r.warnings = m.warnings;
  for (std::size_t d = 0; d < fits.size(); ++d)
    for (const auto& w : fits[d].warnings) r.warnings.push_back("subdomain " + in.plan.subdomain_ids[d] + ": " + w);
  r.outputs = output_tables();
  r.outputs.push_back("run_report.json");
  r.total_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t_start).count();
  write_run_report(c.output, c, in, st, fits, r);
  return r;
}

/// Full pipeline. With `single_domain` the partition file is ignored and the
/// whole graph is one subdomain (the global model).
inline RunReport run_pipeline(const PipelineConfig& c, bool single_domain = false,
                              const std::function<void(std::size_t)>& after_fit = {}) {
  const auto t_start = std::chrono::steady_clock::now();
  c.validate();
  PipelineInputs in;
  try {
    in = load_inputs(c, single_domain);
  } catch (...) {
    detail::rethrow_tagged("ingest");
  }
  const FitStage st = run_fits(c, in, after_fit);
  return finish_run(c, in, st.fits, &st, t_start);
}

/// Re-merges existing blobs (possibly with a different strategy).
inline RunReport merge_run(const PipelineConfig& c, bool single_domain = false) {
  const auto t_start = std::chrono::steady_clock::now();
  c.validate();
  PipelineInputs in;
  try {
    in = load_inputs(c, single_domain);
  } catch (...) {
    detail::rethrow_tagged("ingest");
  }
  const auto fits = load_fits(c, in);
  return finish_run(c, in, fits, nullptr, t_start);
}

}  // namespace mmpart
