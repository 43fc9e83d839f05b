#pragma once

// Observed / expected case panels and the counts CSV reader.

#include <Eigen/Dense>

#include <cmath>
#include <cstddef>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include "mmpart/errors.hpp"
#include "mmpart/graph.hpp"

namespace mmpart {

/// Observed counts O and expected counts E over I areas x J diseases.
struct CountPanel {
  Eigen::MatrixXd observed;  // non-negative integers
  Eigen::MatrixXd expected;  // strictly positive
  std::vector<std::string> disease_names;
  std::vector<std::size_t> global_index;  // area -> index in the parent graph

  std::size_t n_areas() const { return static_cast<std::size_t>(observed.rows()); }
  std::size_t n_diseases() const { return static_cast<std::size_t>(observed.cols()); }

  void validate() const {
    if (observed.rows() != expected.rows() || observed.cols() != expected.cols()) {
      throw DataError("observed and expected matrices differ in shape");
    }
    if (disease_names.size() != n_diseases()) throw DataError("disease name count mismatch");
    if (global_index.size() != n_areas()) throw DataError("area back-map size mismatch");
    for (Eigen::Index k = 0; k < observed.size(); ++k) {
      const double o = observed.data()[k];
      if (!(o >= 0.0) || o != std::floor(o)) {
        throw DataError("observed counts must be non-negative integers");
      }
      if (!(expected.data()[k] > 0.0) || !std::isfinite(expected.data()[k])) {
        throw DataError("expected counts must be positive and finite");
      }
    }
  }

  /// Rows `members` (local indices) as a new panel; global indices are kept.
  CountPanel rows(const std::vector<std::size_t>& members) const {
    CountPanel out;
    const auto n = static_cast<Eigen::Index>(members.size());
    out.observed.resize(n, observed.cols());
    out.expected.resize(n, expected.cols());
    for (Eigen::Index r = 0; r < n; ++r) {
      out.observed.row(r) = observed.row(static_cast<Eigen::Index>(members[static_cast<std::size_t>(r)]));
      out.expected.row(r) = expected.row(static_cast<Eigen::Index>(members[static_cast<std::size_t>(r)]));
      out.global_index.push_back(global_index[members[static_cast<std::size_t>(r)]]);
    }
    out.disease_names = disease_names;
    return out;
  }
};

inline CountPanel make_panel(Eigen::MatrixXd observed, Eigen::MatrixXd expected,
                             std::vector<std::string> diseases = {}) {
  CountPanel p;
  p.observed = std::move(observed);
  p.expected = std::move(expected);
  if (diseases.empty()) {
    for (Eigen::Index j = 0; j < p.observed.cols(); ++j) diseases.push_back("d" + std::to_string(j + 1));
  }
  p.disease_names = std::move(diseases);
  for (Eigen::Index i = 0; i < p.observed.rows(); ++i) p.global_index.push_back(static_cast<std::size_t>(i));
  p.validate();
  return p;
}

namespace detail {
inline std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> out;
  std::string cell;
  std::stringstream ss(line);
  while (std::getline(ss, cell, ',')) out.push_back(trim(cell));
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

inline double parse_number(const std::string& s, const char* what) {
  try {
    std::size_t used = 0;
    const double v = std::stod(s, &used);
    if (used != s.size()) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    throw DataError(std::string("cannot parse ") + what + " '" + s + "'");
  }
}
}  // namespace detail

/// Reads `area,disease,observed[,expected][,age_group,population]`.
///
/// With an `expected` column the values pass through (summed over repeated
/// rows). Otherwise E is built by indirect standardization: for disease j
/// and age group k the reference rate is m_jk = sum_i O_ijk / sum_i n_ijk and
/// E_ij = sum_k n_ijk m_jk. Rows are aligned to the graph's label order.
inline CountPanel ingest_counts(std::istream& in, const AreaGraph& g) {
  std::string line;
  if (!std::getline(in, line)) throw DataError("counts file is empty");
  const auto header = detail::split_csv(line);
  std::map<std::string, std::size_t> col;
  for (std::size_t c = 0; c < header.size(); ++c) col[header[c]] = c;
  for (const char* need : {"area", "disease", "observed"}) {
    if (!col.count(need)) throw DataError(std::string("counts file lacks column '") + need + "'");
  }
  const bool has_expected = col.count("expected") > 0;
  const bool has_population = col.count("population") > 0;
  if (!has_expected && !has_population) {
    throw DataError("counts file needs either an expected or a population column");
  }
  const bool has_age = col.count("age_group") > 0;

  std::unordered_map<std::string, std::size_t> area;
  for (std::size_t i = 0; i < g.n_areas(); ++i) area.emplace(g.labels()[i], i);

  std::vector<std::string> diseases;
  std::map<std::string, std::size_t> disease_idx;
  std::vector<std::string> ages;
  std::map<std::string, std::size_t> age_idx;
  struct Row { std::size_t i, j, k; double o, e, n; };
  std::vector<Row> rows;

  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (detail::trim(line).empty()) continue;
    const auto cells = detail::split_csv(line);
    if (cells.size() != header.size()) {
      throw DataError("counts line " + std::to_string(line_no) + ": wrong number of fields");
    }
    auto a = area.find(cells[col["area"]]);
    if (a == area.end()) throw DataError("counts: unknown area '" + cells[col["area"]] + "'");
    const std::string& dname = cells[col["disease"]];
    auto [dit, dnew] = disease_idx.emplace(dname, diseases.size());
    if (dnew) diseases.push_back(dname);
    std::size_t k = 0;
    if (has_age) {
      auto [ait, anew] = age_idx.emplace(cells[col["age_group"]], ages.size());
      if (anew) ages.push_back(cells[col["age_group"]]);
      k = ait->second;
    }
    Row r{a->second, dit->second, k, detail::parse_number(cells[col["observed"]], "observed"), 0.0, 0.0};
    if (r.o < 0.0 || r.o != std::floor(r.o)) {
      throw DataError("counts line " + std::to_string(line_no) + ": negative or fractional count");
    }
    if (has_expected) r.e = detail::parse_number(cells[col["expected"]], "expected");
    if (has_population) {
      r.n = detail::parse_number(cells[col["population"]], "population");
      if (r.n < 0.0) throw DataError("counts line " + std::to_string(line_no) + ": negative population");
    }
    rows.push_back(r);
  }
  if (diseases.empty()) throw DataError("counts file has no data rows");

  const auto n = static_cast<Eigen::Index>(g.n_areas());
  const auto J = static_cast<Eigen::Index>(diseases.size());
  CountPanel p;
  p.observed = Eigen::MatrixXd::Zero(n, J);
  p.expected = Eigen::MatrixXd::Zero(n, J);
  Eigen::MatrixXi seen = Eigen::MatrixXi::Zero(n, J);
  for (const auto& r : rows) {
    p.observed(static_cast<Eigen::Index>(r.i), static_cast<Eigen::Index>(r.j)) += r.o;
    seen(static_cast<Eigen::Index>(r.i), static_cast<Eigen::Index>(r.j)) = 1;
  }
  if (has_expected) {
    for (const auto& r : rows) p.expected(static_cast<Eigen::Index>(r.i), static_cast<Eigen::Index>(r.j)) += r.e;
  } else {
    const std::size_t K = std::max<std::size_t>(ages.size(), 1);
    Eigen::MatrixXd cases = Eigen::MatrixXd::Zero(J, static_cast<Eigen::Index>(K));
    Eigen::MatrixXd pop = Eigen::MatrixXd::Zero(J, static_cast<Eigen::Index>(K));
    for (const auto& r : rows) {
      cases(static_cast<Eigen::Index>(r.j), static_cast<Eigen::Index>(r.k)) += r.o;
      pop(static_cast<Eigen::Index>(r.j), static_cast<Eigen::Index>(r.k)) += r.n;
    }
    for (Eigen::Index j = 0; j < J; ++j) {
      if (pop.row(j).sum() <= 0.0) {
        throw DataError("zero total population for disease '" + diseases[static_cast<std::size_t>(j)] + "'");
      }
    }
    const Eigen::MatrixXd rate = (pop.array() > 0.0).select(cases.array() / pop.array(), 0.0);
    for (const auto& r : rows) {
      p.expected(static_cast<Eigen::Index>(r.i), static_cast<Eigen::Index>(r.j)) +=
          r.n * rate(static_cast<Eigen::Index>(r.j), static_cast<Eigen::Index>(r.k));
    }
  }
  for (Eigen::Index i = 0; i < n; ++i) {
    for (Eigen::Index j = 0; j < J; ++j) {
      if (!seen(i, j)) {
        throw DataError("counts: missing area '" + g.labels()[static_cast<std::size_t>(i)] +
                        "' for disease '" + diseases[static_cast<std::size_t>(j)] + "'");
      }
    }
  }
  p.disease_names = std::move(diseases);
  for (std::size_t i = 0; i < g.n_areas(); ++i) p.global_index.push_back(i);
  p.validate();
  return p;
}

inline CountPanel ingest_counts(const std::string& path, const AreaGraph& g) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open counts file " + path);
  return ingest_counts(in, g);
}

}  // namespace mmpart
