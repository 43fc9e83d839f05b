// Command-line front end: fit-global, fit-partition, merge, simulate, score, report.

#include <CLI11.hpp>

#include <iostream>
#include <string>
#include <vector>

#include "mmpart/pipeline.hpp"
#include "mmpart/report.hpp"
#include "mmpart/scenario_io.hpp"
#include "mmpart/simulate.hpp"

namespace {

using namespace mmpart;

constexpr int kExitOk = 0;
constexpr int kExitConfig = 2;
constexpr int kExitNumeric = 3;

struct RunOptions {
  std::string config;
  std::string output;
  std::string strategy;
  std::size_t workers = 0;
  bool global = false;
};

PipelineConfig load(const RunOptions& o) {
  PipelineConfig c = read_config(o.config);
  apply_environment(c);
  if (!o.output.empty()) c.output = o.output;
  if (!o.strategy.empty()) c.strategy = parse_strategy(o.strategy);
  if (o.workers > 0) c.workers = o.workers;
  return c;
}

void print_report(const RunReport& r, const PipelineConfig& c) {
  std::cout << "subdomains " << r.n_subdomains << " (resumed " << r.resumed << ")\n"
            << "time run " << r.run_seconds << " s, merge " << r.merge_seconds << " s, total " << r.total_seconds
            << " s\n"
            << "DIC " << r.criteria.dic << ", WAIC " << r.criteria.waic << '\n'
            << "outputs in " << c.output.string() << '\n';
  for (const auto& w : r.warnings) std::cerr << "warning: " << w << '\n';
}

void add_run_options(CLI::App* cmd, RunOptions& o, bool with_strategy) {
  cmd->add_option("-c,--config", o.config, "pipeline config file")->required()->check(CLI::ExistingFile);
  cmd->add_option("-o,--output", o.output, "output directory (overrides the config)");
  cmd->add_option("-w,--workers", o.workers, "worker threads (overrides config and environment)");
  if (with_strategy) cmd->add_option("-s,--strategy", o.strategy, "merge strategy: original or mixture");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Partitioned multivariate disease mapping"};
  app.require_subcommand(1);

  RunOptions global_opts, part_opts, merge_opts;
  auto* fit_global = app.add_subcommand("fit-global", "fit one model on the whole domain");
  add_run_options(fit_global, global_opts, false);
  auto* fit_part = app.add_subcommand("fit-partition", "fit the partitioned model and merge");
  add_run_options(fit_part, part_opts, true);
  auto* merge = app.add_subcommand("merge", "re-merge existing subdomain fits without refitting");
  add_run_options(merge, merge_opts, true);
  merge->add_flag("--global", merge_opts.global, "the run directory holds a global fit");

  std::size_t sim_rows = 20, sim_cols = 20, sim_br = 2, sim_bc = 2, sim_rep = 0;
  int sim_scenario = 1;
  std::uint64_t sim_seed = 1;
  std::string sim_out;
  auto* simulate = app.add_subcommand("simulate", "write a simulated lattice data set");
  simulate->add_option("--scenario", sim_scenario, "1 (shared covariance) or 2 (per-block covariances)")
      ->check(CLI::IsMember({1, 2}));
  simulate->add_option("--rows", sim_rows, "lattice rows")->check(CLI::PositiveNumber);
  simulate->add_option("--cols", sim_cols, "lattice columns")->check(CLI::PositiveNumber);
  simulate->add_option("--block-rows", sim_br, "blocks along the rows")->check(CLI::PositiveNumber);
  simulate->add_option("--block-cols", sim_bc, "blocks along the columns")->check(CLI::PositiveNumber);
  simulate->add_option("--replicate", sim_rep, "replicate index");
  simulate->add_option("--seed", sim_seed, "root seed");
  simulate->add_option("-o,--output", sim_out, "output directory")->required();

  std::vector<std::string> score_truth, score_runs_dirs;
  std::string score_out;
  auto* score_cmd = app.add_subcommand("score", "MARB, MRRMSE and coverage of runs against simulated truths");
  score_cmd->add_option("--truth", score_truth, "truth.csv, one per replicate")->required();
  score_cmd->add_option("--run", score_runs_dirs, "run directory, one per replicate")->required();
  score_cmd->add_option("-o,--output", score_out, "write the scores to this CSV");

  std::vector<std::string> report_runs, report_names;
  std::string report_out;
  auto* report = app.add_subcommand("report", "plot-ready tables and a summary from finished runs");
  report->add_option("--run", report_runs, "run directory (repeatable)")->required();
  report->add_option("--name", report_names, "model name per run (defaults to the directory name)");
  report->add_option("-o,--output", report_out, "report directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitConfig;
  }

  try {
    if (*fit_global) {
      const auto c = load(global_opts);
      print_report(run_pipeline(c, true), c);
    } else if (*fit_part) {
      const auto c = load(part_opts);
      print_report(run_pipeline(c, false), c);
    } else if (*merge) {
      const auto c = load(merge_opts);
      print_report(merge_run(c, merge_opts.global), c);
    } else if (*simulate) {
      const AreaGraph g = lattice_graph(sim_rows, sim_cols);
      const auto home = block_partition(sim_rows, sim_cols, sim_br, sim_bc);
      const ScenarioSpec spec = sim_scenario == 1 ? scenario1_preset(g, sim_rep + 1, sim_seed)
                                                  : scenario2_preset(g, home, sim_rep + 1, sim_seed);
      write_scenario(sim_out, spec, simulate_replicate(spec, sim_rep), home);
      std::cout << "wrote " << sim_out << '\n';
    } else if (*score_cmd) {
      if (score_truth.size() != score_runs_dirs.size()) throw ConfigError("score: give one --run per --truth");
      std::vector<std::pair<fs::path, fs::path>> pairs;
      for (std::size_t k = 0; k < score_truth.size(); ++k) pairs.emplace_back(score_truth[k], score_runs_dirs[k]);
      const AccuracyReport r = score_runs(pairs);
      std::cout << "MARB " << r.mean_marb << "\nMRRMSE " << r.mean_mrrmse << "\nEC " << r.coverage << '\n';
      if (!score_out.empty()) write_accuracy(score_out, r);
    } else if (*report) {
      if (!report_names.empty() && report_names.size() != report_runs.size()) {
        throw ConfigError("report: give one --name per --run");
      }
      std::vector<RunDirectory> runs;
      for (std::size_t k = 0; k < report_runs.size(); ++k) {
        runs.push_back(read_run(report_runs[k], report_names.empty() ? std::string() : report_names[k]));
      }
      write_report(runs, report_out);
      std::cout << "wrote " << report_out << '\n';
    }
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const DataError& e) {
    std::cerr << "input error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const NumericError& e) {
    std::cerr << "numeric failure: " << e.what() << '\n';
    return kExitNumeric;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return kExitOk;
}
