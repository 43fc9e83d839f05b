#pragma once

// Plot-ready tables and a text summary from one or more finished runs.

#include <nlohmann/json.hpp>

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "mmpart/errors.hpp"
#include "mmpart/kde.hpp"
#include "mmpart/pipeline.hpp"

namespace mmpart {

/// A CSV table written by this library (no quoting, header first).
struct Table {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;

  std::size_t column(const std::string& name) const {
    const auto it = std::find(header.begin(), header.end(), name);
    if (it == header.end()) throw DataError("table lacks column '" + name + "'");
    return static_cast<std::size_t>(it - header.begin());
  }
};

inline Table read_table(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot read " + path.string());
  Table t;
  std::string line;
  if (!std::getline(in, line)) throw DataError("empty table " + path.string());
  t.header = detail::split_csv(line);
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    auto cells = detail::split_csv(line);
    if (cells.size() != t.header.size()) throw DataError("malformed row in " + path.string());
    t.rows.push_back(std::move(cells));
  }
  return t;
}

struct RunDirectory {
  std::string name;
  Table risks;
  Table global_params;
  Table local_params;
  Table criteria;
  Table global_draws;
  Table partition;
  nlohmann::json report;
};

inline RunDirectory read_run(const fs::path& dir, std::string name = {}) {
  std::vector<std::string> missing;
  for (const auto& f : output_tables())
    if (!fs::exists(dir / f)) missing.push_back(f);
  if (!fs::exists(dir / "run_report.json")) missing.push_back("run_report.json");
  if (!missing.empty()) {
    std::string list;
    for (const auto& m : missing) list += (list.empty() ? "" : ", ") + m;
    throw DataError("run directory " + dir.string() + " is incomplete (missing " + list + ")");
  }
  RunDirectory r;
  r.name = name.empty() ? fs::absolute(dir).lexically_normal().filename().string() : std::move(name);
  if (r.name.empty()) r.name = fs::absolute(dir).lexically_normal().parent_path().filename().string();
  r.risks = read_table(dir / "risks.csv");
  r.global_params = read_table(dir / "global_params.csv");
  r.local_params = read_table(dir / "local_params.csv");
  r.criteria = read_table(dir / "criteria.csv");
  r.global_draws = read_table(dir / "global_draws.csv");
  r.partition = read_table(dir / "partition.csv");
  std::ifstream in(dir / "run_report.json");
  try {
    r.report = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw DataError("run_report.json in " + dir.string() + " is unreadable: " + e.what());
  }
  return r;
}

inline const std::vector<std::string>& report_tables() {
  static const std::vector<std::string> names{"risk_map.csv", "dispersion.csv", "correlation_density.csv",
                                               "local_correlation.csv", "summary.txt"};
  return names;
}

/// Writes risk_map.csv, dispersion.csv (one row per area, disease and pair
/// of runs), correlation_density.csv, local_correlation.csv and summary.txt.
inline void write_report(const std::vector<RunDirectory>& runs, const fs::path& out_dir) {
  if (runs.empty()) throw DataError("report: no run directories given");
  fs::create_directories(out_dir);
  using detail::num;
  {
    auto out = detail::open_out(out_dir / "risk_map.csv");
    out << "model,area,disease,median,q025,q975,exceedance\n";
    for (const auto& r : runs) {
      const auto& t = r.risks;
      const std::size_t a = t.column("area"), d = t.column("disease"), med = t.column("median"),
                        lo = t.column("q025"), hi = t.column("q975"), ex = t.column("exceedance");
      for (const auto& row : t.rows) {
        out << r.name << ',' << row[a] << ',' << row[d] << ',' << row[med] << ',' << row[lo] << ',' << row[hi]
            << ',' << row[ex] << '\n';
      }
    }
  }
  {
    auto out = detail::open_out(out_dir / "dispersion.csv");
    out << "area,disease,model_a,model_b,median_a,median_b\n";
    for (std::size_t x = 0; x < runs.size(); ++x) {
      for (std::size_t y = x + 1; y < runs.size(); ++y) {
        const auto& ta = runs[x].risks;
        const auto& tb = runs[y].risks;
        std::map<std::pair<std::string, std::string>, std::string> b_median;
        for (const auto& row : tb.rows)
          b_median[{row[tb.column("area")], row[tb.column("disease")]}] = row[tb.column("median")];
        for (const auto& row : ta.rows) {
          const std::pair<std::string, std::string> key{row[ta.column("area")], row[ta.column("disease")]};
          const auto it = b_median.find(key);
          if (it == b_median.end()) {
            throw DataError("report: runs " + runs[x].name + " and " + runs[y].name + " cover different areas");
          }
          out << key.first << ',' << key.second << ',' << runs[x].name << ',' << runs[y].name << ','
              << row[ta.column("median")] << ',' << it->second << '\n';
        }
      }
    }
  }
  {
    auto out = detail::open_out(out_dir / "correlation_density.csv");
    out << "model,parameter,x,density\n";
    for (const auto& r : runs) {
      const auto& t = r.global_draws;
      for (std::size_t c = 1; c < t.header.size(); ++c) {
        if (t.header[c].rfind("rho_", 0) != 0) continue;
        std::vector<double> draws;
        for (const auto& row : t.rows) draws.push_back(detail::parse_number(row[c], "draw"));
        const DensityCurve curve = gaussian_kde(draws);
        for (std::size_t k = 0; k < curve.x.size(); ++k) {
          out << r.name << ',' << t.header[c] << ',' << num(curve.x[k]) << ',' << num(curve.density[k]) << '\n';
        }
      }
    }
  }
  {
    auto out = detail::open_out(out_dir / "local_correlation.csv");
    out << "model,area,subdomain,parameter,mean,q025,q975\n";
    for (const auto& r : runs) {
      const auto& lp = r.local_params;
      std::map<std::string, std::vector<const std::vector<std::string>*>> by_sub;
      for (const auto& row : lp.rows)
        if (row[lp.column("parameter")].rfind("rho_", 0) == 0) by_sub[row[lp.column("subdomain")]].push_back(&row);
      const auto& pt = r.partition;
      for (const auto& row : pt.rows) {
        const std::string& sub = row[pt.column("subdomain")];
        for (const auto* p : by_sub[sub]) {
          out << r.name << ',' << row[pt.column("area")] << ',' << sub << ',' << (*p)[lp.column("parameter")] << ','
              << (*p)[lp.column("mean")] << ',' << (*p)[lp.column("q025")] << ',' << (*p)[lp.column("q975")] << '\n';
        }
      }
    }
  }
  {
    auto out = detail::open_out(out_dir / "summary.txt");
    for (const auto& r : runs) {
      const auto& rep = r.report;
      out << "model " << r.name << ": " << rep.value("n_areas", 0) << " areas, "
          << rep.value("n_subdomains", 0) << " subdomain(s), order " << rep.value("order", 0) << ", strategy "
          << rep.value("strategy", std::string("?")) << '\n';
      if (rep.contains("timings")) {
        out << "  time (s): run " << num(rep["timings"].value("run", 0.0)) << ", merge "
            << num(rep["timings"].value("merge", 0.0)) << ", total " << num(rep["timings"].value("total", 0.0)) << '\n';
      }
      const auto& c = r.criteria;
      if (!c.rows.empty()) {
        out << "  DIC " << c.rows[0][c.column("dic")] << " (pD " << c.rows[0][c.column("p_d")] << "), WAIC "
            << c.rows[0][c.column("waic")] << '\n';
      }
      const auto& g = r.global_params;
      for (const auto& row : g.rows) {
        out << "  " << row[g.column("parameter")] << ": mean " << row[g.column("mean")] << ", sd " << row[g.column("sd")]
            << ", 95% [" << row[g.column("q025")] << ", " << row[g.column("q975")] << "]\n";
      }
      const auto& rk = r.risks;
      std::size_t high = 0;
      for (const auto& row : rk.rows)
        if (detail::parse_number(row[rk.column("exceedance")], "exceedance") > 0.9) ++high;
      out << "  cells with P(R > 1) > 0.9: " << high << " of " << rk.rows.size() << '\n';
      if (rep.contains("warnings") && !rep["warnings"].empty()) {
        out << "  warnings:\n";
        for (const auto& w : rep["warnings"]) out << "    " << w.get<std::string>() << '\n';
      }
    }
  }
}

}  // namespace mmpart
