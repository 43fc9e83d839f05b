#include <gtest/gtest.h>

#include <sys/wait.h>

#include <cstdlib>
#include <fstream>
#include <set>
#include <sstream>
#include <tuple>

#include "mmpart/pipeline.hpp"
#include "mmpart/report.hpp"
#include "mmpart/scenario_io.hpp"

using namespace mmpart;

namespace {

fs::path fresh_dir(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("mmpart_test_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

// A 4x4 lattice with three diseases split into four 2x2 blocks.
fs::path write_domain(const std::string& name) {
  const fs::path dir = fresh_dir(name);
  const AreaGraph g = lattice_graph(4, 4);
  const auto home = block_partition(4, 4, 2, 2);
  const auto spec = scenario1_preset(g, 1, 5);
  write_scenario(dir, spec, simulate_replicate(spec, 0), home);
  return dir;
}

void write_config(const fs::path& path, const std::string& extra_model = "", const std::string& partition = "partition.tsv") {
  std::ofstream out(path);
  out << "[data]\nedges = edges.tsv\ncounts = counts.csv\npartition = " << partition << "\n"
      << "[model]\norder = 1\nsamples = 150\n" << extra_model << "[execution]\nworkers = 1\nseed = 7\noutput = run\n";
}

PipelineConfig config_in(const fs::path& dir, const std::string& extra_model = "") {
  write_config(dir / "config.ini", extra_model);
  return read_config(dir / "config.ini");
}

int run_cli(const std::string& args) {
  const std::string cmd = std::string(MMPART_CLI) + " " + args + " > /dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

void expect_same_tables(const fs::path& a, const fs::path& b) {
  for (const auto& t : output_tables()) {
    ASSERT_TRUE(fs::exists(a / t)) << t;
    EXPECT_EQ(slurp(a / t), slurp(b / t)) << t;
  }
}

}  // namespace

TEST(Config, ParsesAllSections) {
  std::istringstream in(
      "[data]\nedges = e.tsv\ncounts = /abs/c.csv\npartition = p.tsv\n"
      "[model]\norder = 2\nstrategy = mixture\nsamples = 300\nmax_newton_iterations = 40\n"
      "newton_tolerance = 1e-9\noptimizer_tolerance = 1e-5\noptimizer_max_iterations = 90\n"
      "gradient_step = 2e-4\nhessian_step = 2e-3\nwishart_dof = 6\nmean_correction = false\n"
      "[execution]\nworkers = 3\nseed = 99\noutput = out\n");
  const auto c = read_config(in, "/base");
  EXPECT_EQ(c.edges, fs::path("/base/e.tsv"));
  EXPECT_EQ(c.counts, fs::path("/abs/c.csv"));
  EXPECT_EQ(c.partition, fs::path("/base/p.tsv"));
  EXPECT_EQ(c.output, fs::path("/base/out"));
  EXPECT_EQ(c.order, 2u);
  EXPECT_EQ(c.strategy, MergeStrategy::mixture);
  EXPECT_EQ(c.fit.samples, 300);
  EXPECT_EQ(c.fit.max_newton_iterations, 40);
  EXPECT_EQ(c.fit.newton_tolerance, 1e-9);
  EXPECT_EQ(c.fit.optimizer_tolerance, 1e-5);
  EXPECT_EQ(c.fit.optimizer_max_iterations, 90);
  EXPECT_EQ(c.fit.gradient_step, 2e-4);
  EXPECT_EQ(c.fit.hessian_step, 2e-3);
  EXPECT_EQ(c.fit.wishart_dof, 6.0);
  EXPECT_FALSE(c.fit.mean_correction);
  EXPECT_EQ(c.workers, 3u);
  EXPECT_EQ(c.seed, 99u);
  EXPECT_NO_THROW(c.validate());
}

TEST(Config, RejectsBadInput) {
  const auto bad = [](const std::string& text) {
    std::istringstream in(text);
    return read_config(in);
  };
  EXPECT_THROW(bad("[data]\nedgez = x\n"), ConfigError);
  EXPECT_THROW(bad("[other]\nx = 1\n"), ConfigError);
  EXPECT_THROW(bad("[model]\norder = -1\n"), ConfigError);
  EXPECT_THROW(bad("[model]\nsamples = many\n"), ConfigError);
  EXPECT_THROW(bad("[model]\nstrategy = average\n"), ConfigError);
  EXPECT_THROW(bad("[model]\nmean_correction = maybe\n"), ConfigError);
  EXPECT_THROW(bad("[model]\nnewton_tolerance = 1e-8x\n"), ConfigError);
  EXPECT_THROW(bad("[data\n"), ConfigError);
  EXPECT_THROW(bad("[execution]\nworkers = 0\n").validate(), ConfigError);
  EXPECT_THROW(bad("[data]\ncounts = c\n[execution]\noutput = o\n").validate(), ConfigError);
  EXPECT_THROW(read_config(fs::path("/nonexistent/config.ini")), ConfigError);
}

TEST(Config, WorkerEnvironmentOverride) {
  PipelineConfig c;
  c.workers = 1;
  ::setenv(kWorkersEnv, "3", 1);
  apply_environment(c);
  EXPECT_EQ(c.workers, 3u);
  ::setenv(kWorkersEnv, "0", 1);
  EXPECT_THROW(apply_environment(c), ConfigError);
  ::setenv(kWorkersEnv, "-2", 1);
  EXPECT_THROW(apply_environment(c), ConfigError);
  ::unsetenv(kWorkersEnv);
  c.workers = 2;
  apply_environment(c);
  EXPECT_EQ(c.workers, 2u);
}

TEST(Ingest, SingleAgeGroupStandardization) {
  const auto g = build_graph({}, {"A"});
  std::istringstream in("area,disease,observed,age_group,population\nA,lung,10,all,1000\n");
  const auto p = ingest_counts(in, g);
  EXPECT_DOUBLE_EQ(p.expected(0, 0), 10.0);
}

TEST(Ingest, TwoAreaStandardization) {
  const auto g = build_graph({{"A", "B"}}, {"A", "B"});
  std::istringstream in("area,disease,observed,population\nA,d,2,100\nB,d,0,100\n");
  const auto p = ingest_counts(in, g);
  EXPECT_DOUBLE_EQ(p.expected(0, 0), 1.0);
  EXPECT_DOUBLE_EQ(p.expected(1, 0), 1.0);
  EXPECT_EQ(p.observed(0, 0), 2.0);
  EXPECT_EQ(p.observed(1, 0), 0.0);
}

TEST(Ingest, AgeGroupsByHand) {
  const auto g = build_graph({{"A", "B"}}, {"A", "B"});
  // Rates: young 1/200 (1 case over 200), old 9/300.
  std::istringstream in(
      "area,disease,observed,age_group,population\n"
      "B,d,1,young,50\nA,d,0,young,150\nA,d,4,old,100\nB,d,5,old,200\n");
  const auto p = ingest_counts(in, g);
  EXPECT_NEAR(p.expected(0, 0), 150.0 / 200.0 + 100.0 * 9.0 / 300.0, 1e-12);
  EXPECT_NEAR(p.expected(1, 0), 50.0 / 200.0 + 200.0 * 9.0 / 300.0, 1e-12);
  EXPECT_EQ(p.observed(0, 0), 4.0);
  EXPECT_EQ(p.observed(1, 0), 6.0);
}

TEST(Ingest, ExpectedPassesThroughInGraphOrder) {
  const auto g = build_graph({{"A", "B"}}, {"A", "B"});
  std::istringstream in("disease,area,observed,expected\nx,B,3,2.5\ny,A,1,0.7\nx,A,4,1.25\ny,B,0,3\n");
  const auto p = ingest_counts(in, g);
  EXPECT_EQ(p.disease_names, (std::vector<std::string>{"x", "y"}));
  EXPECT_EQ(p.expected(0, 0), 1.25);
  EXPECT_EQ(p.expected(1, 0), 2.5);
  EXPECT_EQ(p.expected(0, 1), 0.7);
  EXPECT_EQ(p.expected(1, 1), 3.0);
  EXPECT_EQ(p.observed(1, 0), 3.0);
}

TEST(Ingest, Errors) {
  const auto g = build_graph({{"A", "B"}}, {"A", "B"});
  const auto load = [&](const std::string& text) {
    std::istringstream in(text);
    return ingest_counts(in, g);
  };
  EXPECT_THROW(load("area,disease,observed,expected\nA,d,1,1\n"), DataError);            // B missing
  EXPECT_THROW(load("area,disease,observed,expected\nA,d,-1,1\nB,d,1,1\n"), DataError);   // negative
  EXPECT_THROW(load("area,disease,observed,expected\nA,d,1,1\nC,d,1,1\n"), DataError);    // unknown area
  EXPECT_THROW(load("area,disease,observed,population\nA,d,1,0\nB,d,0,0\n"), DataError);  // zero population
  EXPECT_THROW(load("area,disease,observed\nA,d,1\nB,d,1\n"), DataError);                 // no E, no n
  EXPECT_THROW(load("area,observed,expected\nA,1,1\n"), DataError);
  EXPECT_THROW(load(""), DataError);
}

TEST(Pipeline, SingleSubdomainMatchesFitGlobalThroughCli) {
  const fs::path dir = write_domain("degenerate");
  {
    std::ofstream part(dir / "one.tsv");
    const AreaGraph g = lattice_graph(4, 4);
    for (const auto& l : g.labels()) part << l << "\tall\n";
  }
  write_config(dir / "global.ini", "", "");
  write_config(dir / "single.ini", "", "one.tsv");
  {
    // order 0 for the degenerate partition
    std::string text = slurp(dir / "single.ini");
    text.replace(text.find("order = 1"), 9, "order = 0");
    std::ofstream(dir / "single.ini") << text;
  }
  ASSERT_EQ(run_cli("fit-global -c " + (dir / "global.ini").string() + " -o " + (dir / "g").string()), 0);
  ASSERT_EQ(run_cli("fit-partition -c " + (dir / "single.ini").string() + " -o " + (dir / "p").string()), 0);
  expect_same_tables(dir / "g", dir / "p");
}

TEST(Pipeline, DeterministicAcrossRunsAndWorkerCounts) {
  const fs::path dir = write_domain("workers");
  PipelineConfig c = config_in(dir);
  c.output = dir / "w1";
  run_pipeline(c);
  c.output = dir / "w1_again";
  run_pipeline(c);
  c.output = dir / "w3";
  c.workers = 3;
  run_pipeline(c);
  expect_same_tables(dir / "w1", dir / "w1_again");
  expect_same_tables(dir / "w1", dir / "w3");
}

TEST(Pipeline, ResumesAfterInterruptionAndDamage) {
  const fs::path dir = write_domain("resume");
  PipelineConfig c = config_in(dir);
  c.output = dir / "reference";
  const auto ref = run_pipeline(c);
  EXPECT_EQ(ref.resumed, 0u);

  // Killed after the second fit reached disk.
  c.output = dir / "interrupted";
  std::size_t done = 0;
  EXPECT_THROW(run_pipeline(c, false, [&](std::size_t) {
                 if (++done == 2) throw std::runtime_error("killed");
               }),
               std::runtime_error);
  const auto resumed = run_pipeline(c);
  EXPECT_GE(resumed.resumed, 1u);
  expect_same_tables(dir / "reference", dir / "interrupted");

  // A deleted blob and a corrupted blob are refitted; the rest are reused.
  fs::remove(blob_path(c.output, 1));
  {
    std::fstream f(blob_path(c.output, 2), std::ios::in | std::ios::out | std::ios::binary);
    f.seekp(0);
    f.write("\xff\xff\xff\xff\xff\xff\xff\xff", 8);
  }
  std::size_t refits = 0;
  const auto again = run_pipeline(c, false, [&](std::size_t) { ++refits; });
  EXPECT_EQ(refits, 2u);
  EXPECT_EQ(again.resumed, 2u);
  expect_same_tables(dir / "reference", dir / "interrupted");
}

TEST(Pipeline, ConfigChangeInvalidatesBlobs) {
  const fs::path dir = write_domain("fingerprint");
  PipelineConfig c = config_in(dir);
  run_pipeline(c);
  c.fit.samples = 120;
  std::size_t refits = 0;
  run_pipeline(c, false, [&](std::size_t) { ++refits; });
  EXPECT_EQ(refits, 4u);
}

TEST(Pipeline, MergeReusesFitsWithAnotherStrategy) {
  const fs::path dir = write_domain("remerge");
  PipelineConfig c = config_in(dir);
  run_pipeline(c);
  const std::string blob = slurp(blob_path(c.output, 0));
  c.strategy = MergeStrategy::mixture;
  const auto r = merge_run(c);
  EXPECT_EQ(r.run_seconds, 0.0);
  EXPECT_EQ(slurp(blob_path(c.output, 0)), blob);
  const Table crit = read_table(c.output / "criteria.csv");
  EXPECT_EQ(crit.rows.at(0).at(crit.column("strategy")), "mixture");
  fs::remove(blob_path(c.output, 3));
  EXPECT_THROW(merge_run(c), DataError);
}

TEST(Pipeline, SingleDomainCriteriaEqualDirectFit) {
  const fs::path dir = write_domain("criteria");
  PipelineConfig c = config_in(dir);
  const auto report = run_pipeline(c, true);
  const PipelineInputs in = load_inputs(c, true);
  const auto fit = fit_submodel(in.panel, in.graph, subdomain_config(c, 0));
  const auto direct = deviance_criteria_log_risk(fit.log_risk_draws, in.panel.observed, in.panel.expected);
  EXPECT_EQ(report.criteria.dic, direct.dic);
  EXPECT_EQ(report.criteria.waic, direct.waic);
  EXPECT_EQ(report.criteria.p_d, direct.p_d);
  EXPECT_EQ(report.criteria.mean_deviance, direct.mean_deviance);
  EXPECT_GE(report.total_seconds, report.run_seconds + report.merge_seconds - 1e-6);
}

TEST(Pipeline, StageTaggedErrors) {
  const fs::path dir = write_domain("errors");
  PipelineConfig c = config_in(dir);
  c.counts = dir / "missing.csv";
  try {
    run_pipeline(c);
    FAIL() << "expected a DataError";
  } catch (const DataError& e) {
    EXPECT_NE(std::string(e.what()).find("[ingest]"), std::string::npos) << e.what();
  }
}

TEST(Cli, ExitCodes) {
  const fs::path dir = write_domain("cli");
  write_config(dir / "ok.ini");
  EXPECT_EQ(run_cli("fit-partition -c " + (dir / "ok.ini").string()), 0);
  EXPECT_EQ(run_cli("merge -s mixture -c " + (dir / "ok.ini").string()), 0);
  EXPECT_EQ(run_cli("frobnicate"), 2);
  EXPECT_EQ(run_cli("fit-global -c " + (dir / "absent.ini").string()), 2);
  std::ofstream(dir / "bad.ini") << "[model]\nsamples = lots\n";
  EXPECT_EQ(run_cli("fit-global -c " + (dir / "bad.ini").string()), 2);
  write_config(dir / "stiff.ini", "max_newton_iterations = 1\nnewton_tolerance = 1e-300\n");
  EXPECT_EQ(run_cli("fit-global -c " + (dir / "stiff.ini").string() + " -o " + (dir / "stiff").string()), 3);
  EXPECT_EQ(run_cli("report --run " + (dir / "nothing").string() + " -o " + (dir / "rep").string()), 2);
}

TEST(Cli, SimulateAndScore) {
  const fs::path dir = fresh_dir("simscore");
  ASSERT_EQ(run_cli("simulate --rows 4 --cols 4 --block-rows 2 --block-cols 2 --seed 3 -o " + (dir / "data").string()), 0);
  for (const char* f : {"edges.tsv", "partition.tsv", "counts.csv", "truth.csv", "truth_params.csv"})
    EXPECT_TRUE(fs::exists(dir / "data" / f)) << f;
  std::ofstream(dir / "data" / "config.ini")
      << "[data]\nedges = edges.tsv\ncounts = counts.csv\n[model]\nsamples = 100\n[execution]\noutput = run\n";
  ASSERT_EQ(run_cli("fit-global -c " + (dir / "data" / "config.ini").string()), 0);
  ASSERT_EQ(run_cli("score --truth " + (dir / "data" / "truth.csv").string() + " --run " +
                    (dir / "data" / "run").string() + " -o " + (dir / "scores.csv").string()),
            0);
  const Table t = read_table(dir / "scores.csv");
  EXPECT_FALSE(t.rows.empty());
  EXPECT_EQ(run_cli("score --truth a.csv --truth b.csv --run " + (dir / "data" / "run").string()), 2);
}

TEST(Report, TablesFollowTheirContracts) {
  const fs::path dir = write_domain("report");
  PipelineConfig c = config_in(dir);
  c.output = dir / "global";
  run_pipeline(c, true);
  c.output = dir / "k1";
  run_pipeline(c);
  c.strategy = MergeStrategy::mixture;
  const fs::path mixture = dir / "k1_mixture";
  fs::create_directories(mixture);
  fs::copy(dir / "k1" / "fits", mixture / "fits");
  c.output = mixture;
  merge_run(c);

  const std::vector<RunDirectory> runs{read_run(dir / "global"), read_run(dir / "k1"), read_run(mixture, "mix")};
  EXPECT_EQ(runs[0].name, "global");
  EXPECT_EQ(runs[2].name, "mix");
  write_report(runs, dir / "report");
  for (const auto& f : report_tables()) EXPECT_TRUE(fs::exists(dir / "report" / f)) << f;

  const std::size_t cells = 16 * 3;
  const Table disp = read_table(dir / "report" / "dispersion.csv");
  EXPECT_EQ(disp.rows.size(), cells * 3);  // three pairs of runs
  std::set<std::tuple<std::string, std::string, std::string, std::string>> keys;
  for (const auto& r : disp.rows) keys.emplace(r[0], r[1], r[2], r[3]);
  EXPECT_EQ(keys.size(), disp.rows.size());

  const Table dens = read_table(dir / "report" / "correlation_density.csv");
  std::map<std::pair<std::string, std::string>, std::vector<std::pair<double, double>>> curves;
  for (const auto& r : dens.rows) curves[{r[0], r[1]}].emplace_back(std::stod(r[2]), std::stod(r[3]));
  EXPECT_EQ(curves.size(), 9u);  // three correlations per run
  for (const auto& [key, pts] : curves) {
    double area = 0.0;
    for (std::size_t k = 1; k < pts.size(); ++k)
      area += 0.5 * (pts[k].first - pts[k - 1].first) * (pts[k].second + pts[k - 1].second);
    EXPECT_NEAR(area, 1.0, 1e-3) << key.first << " " << key.second;
  }

  const Table map = read_table(dir / "report" / "risk_map.csv");
  EXPECT_EQ(map.rows.size(), cells * 3);
  for (const auto& r : map.rows) {
    const double e = std::stod(r[map.column("exceedance")]);
    EXPECT_GE(e, 0.0);
    EXPECT_LE(e, 1.0);
  }

  const Table local = read_table(dir / "report" / "local_correlation.csv");
  EXPECT_EQ(local.rows.size(), 3u * (16 * 3));  // global run: 1 subdomain; k1 runs: every area once
  EXPECT_FALSE(slurp(dir / "report" / "summary.txt").empty());

  fs::remove(dir / "k1" / "criteria.csv");
  EXPECT_THROW(read_run(dir / "k1"), DataError);
}
