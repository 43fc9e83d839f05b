#pragma once

// Versioned binary blobs for subdomain fits, used to resume interrupted
// runs and to re-merge without refitting.

#include <Eigen/Dense>
#include <Eigen/Sparse>

#include <cereal/archives/binary.hpp>
#include <cereal/types/string.hpp>
#include <cereal/types/vector.hpp>

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "mmpart/errors.hpp"
#include "mmpart/fit.hpp"

namespace mmpart {

inline constexpr std::uint32_t kBlobVersion = 1;
inline constexpr std::uint32_t kBlobMagic = 0x4d4d5054;  // "MMPT"

/// 64-bit FNV-1a, used to fingerprint fit inputs.
class Fingerprint {
 public:
  void bytes(const void* p, std::size_t n) {
    const auto* c = static_cast<const unsigned char*>(p);
    for (std::size_t k = 0; k < n; ++k) {
      h_ ^= c[k];
      h_ *= 0x100000001b3ULL;
    }
  }
  template <class T>
  void value(const T& v) { bytes(&v, sizeof(T)); }
  void text(const std::string& s) {
    value(s.size());
    bytes(s.data(), s.size());
  }
  void matrix(const Eigen::MatrixXd& m) {
    value(m.rows());
    value(m.cols());
    bytes(m.data(), sizeof(double) * static_cast<std::size_t>(m.size()));
  }
  std::uint64_t digest() const { return h_; }

 private:
  std::uint64_t h_ = 0xcbf29ce484222325ULL;
};

/// Fingerprint of everything that determines a subdomain fit.
inline std::uint64_t fit_fingerprint(const CountPanel& data, const AreaGraph& g, const FitConfig& cfg) {
  Fingerprint f;
  f.value(kBlobVersion);
  f.matrix(data.observed);
  f.matrix(data.expected);
  for (const auto& d : data.disease_names) f.text(d);
  for (std::size_t i : data.global_index) f.value(i);
  for (const auto& l : g.labels()) f.text(l);
  for (auto [a, b] : g.edges()) {
    f.value(a);
    f.value(b);
  }
  f.value(cfg.samples);
  f.value(cfg.max_newton_iterations);
  f.value(cfg.newton_tolerance);
  f.value(cfg.optimizer_tolerance);
  f.value(cfg.optimizer_max_iterations);
  f.value(cfg.gradient_step);
  f.value(cfg.hessian_step);
  f.value(cfg.wishart_dof);
  f.value(cfg.mean_correction);
  f.value(cfg.seed);
  return f.digest();
}

namespace detail {

template <class Archive>
void save_matrix(Archive& ar, const Eigen::MatrixXd& m) {
  const std::int64_t r = m.rows();
  const std::int64_t c = m.cols();
  std::vector<double> v(m.data(), m.data() + m.size());
  ar(r, c, v);
}

template <class Archive>
void load_matrix(Archive& ar, Eigen::MatrixXd& m) {
  std::int64_t r = 0;
  std::int64_t c = 0;
  std::vector<double> v;
  ar(r, c, v);
  if (r < 0 || c < 0 || static_cast<std::size_t>(r * c) != v.size()) throw DataError("blob: corrupt matrix");
  m = Eigen::Map<Eigen::MatrixXd>(v.data(), r, c);
}

template <class Archive>
void save_vector(Archive& ar, const Eigen::VectorXd& x) {
  save_matrix(ar, Eigen::MatrixXd(x));
}

template <class Archive>
void load_vector(Archive& ar, Eigen::VectorXd& x) {
  Eigen::MatrixXd m;
  load_matrix(ar, m);
  if (m.cols() != 1 && m.size() != 0) throw DataError("blob: corrupt vector");
  x = m.size() ? Eigen::VectorXd(m.col(0)) : Eigen::VectorXd();
}

template <class Archive>
void save_sparse(Archive& ar, const SparseMatrix& s) {
  std::vector<std::int64_t> rows, cols;
  std::vector<double> vals;
  for (int k = 0; k < s.outerSize(); ++k) {
    for (SparseMatrix::InnerIterator it(s, k); it; ++it) {
      rows.push_back(it.row());
      cols.push_back(it.col());
      vals.push_back(it.value());
    }
  }
  const std::int64_t r = s.rows();
  const std::int64_t c = s.cols();
  ar(r, c, rows, cols, vals);
}

template <class Archive>
void load_sparse(Archive& ar, SparseMatrix& s) {
  std::int64_t r = 0, c = 0;
  std::vector<std::int64_t> rows, cols;
  std::vector<double> vals;
  ar(r, c, rows, cols, vals);
  if (rows.size() != vals.size() || cols.size() != vals.size()) throw DataError("blob: corrupt sparse matrix");
  std::vector<Eigen::Triplet<double>> t;
  for (std::size_t k = 0; k < vals.size(); ++k) {
    if (rows[k] < 0 || rows[k] >= r || cols[k] < 0 || cols[k] >= c) throw DataError("blob: corrupt sparse matrix");
    t.emplace_back(static_cast<int>(rows[k]), static_cast<int>(cols[k]), vals[k]);
  }
  s.resize(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c));
  s.setFromTriplets(t.begin(), t.end());
}

}  // namespace detail

inline void write_fit(std::ostream& out, const SubmodelFit& f, std::uint64_t fingerprint) {
  cereal::BinaryOutputArchive ar(out);
  ar(kBlobMagic, kBlobVersion, fingerprint);
  std::vector<std::uint64_t> gi(f.global_index.begin(), f.global_index.end());
  const std::uint64_t comps = f.n_components;
  ar(f.labels, gi, f.disease_names, comps);
  detail::save_vector(ar, f.hyper_mode);
  detail::save_matrix(ar, f.hyper_cov);
  ar(f.log_posterior_mode);
  detail::save_vector(ar, f.latent_mode.alpha);
  detail::save_matrix(ar, f.latent_mode.theta);
  detail::save_sparse(ar, f.latent_precision);
  detail::save_matrix(ar, f.hyper_draws);
  detail::save_matrix(ar, f.alpha_draws);
  detail::save_matrix(ar, f.log_risk_draws);
  detail::save_matrix(ar, f.cpo);
  std::vector<double> risks;
  for (const auto& r : f.risks) {
    risks.insert(risks.end(), {r.mean, r.sd, r.median, r.q025, r.q975, r.exceedance});
  }
  ar(risks, f.warnings, f.seconds);
}

/// Reads a blob. Returns false (leaving `f` untouched) when the blob was
/// written for different inputs; throws DataError on corrupt content.
inline bool read_fit(std::istream& in, SubmodelFit& f, std::uint64_t expected_fingerprint) {
  try {
    cereal::BinaryInputArchive ar(in);
    std::uint32_t magic = 0, version = 0;
    std::uint64_t fingerprint = 0;
    ar(magic, version, fingerprint);
    if (magic != kBlobMagic) throw DataError("blob: not a fit blob");
    if (version != kBlobVersion) return false;
    if (fingerprint != expected_fingerprint) return false;
    SubmodelFit g;
    std::vector<std::uint64_t> gi;
    std::uint64_t comps = 0;
    ar(g.labels, gi, g.disease_names, comps);
    g.global_index.assign(gi.begin(), gi.end());
    g.n_components = comps;
    detail::load_vector(ar, g.hyper_mode);
    detail::load_matrix(ar, g.hyper_cov);
    ar(g.log_posterior_mode);
    detail::load_vector(ar, g.latent_mode.alpha);
    detail::load_matrix(ar, g.latent_mode.theta);
    detail::load_sparse(ar, g.latent_precision);
    detail::load_matrix(ar, g.hyper_draws);
    detail::load_matrix(ar, g.alpha_draws);
    detail::load_matrix(ar, g.log_risk_draws);
    detail::load_matrix(ar, g.cpo);
    std::vector<double> risks;
    ar(risks, g.warnings, g.seconds);
    if (risks.size() % 6 != 0) throw DataError("blob: corrupt risk table");
    for (std::size_t k = 0; k < risks.size(); k += 6) {
      g.risks.push_back({risks[k], risks[k + 1], risks[k + 2], risks[k + 3], risks[k + 4], risks[k + 5]});
    }
    f = std::move(g);
    return true;
  } catch (const cereal::Exception& e) {
    throw DataError(std::string("blob: truncated or corrupt (") + e.what() + ")");
  }
}

/// Writes through a temporary file and renames it into place, so a killed
/// process never leaves a half-written blob under the final name.
inline void save_fit_file(const std::filesystem::path& path, const SubmodelFit& f, std::uint64_t fingerprint) {
  const std::filesystem::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw DataError("cannot write " + tmp.string());
    write_fit(out, f, fingerprint);
    out.flush();
    if (!out) throw DataError("failed writing " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

/// Loads a blob if it exists and matches; any unreadable blob counts as
/// missing so the fit is simply redone.
inline bool load_fit_file(const std::filesystem::path& path, SubmodelFit& f, std::uint64_t fingerprint) {
  if (!std::filesystem::exists(path)) return false;
  std::ifstream in(path, std::ios::binary);
  if (!in) return false;
  try {
    return read_fit(in, f, fingerprint);
  } catch (const std::exception&) {
    // Corrupt length prefixes can also surface as allocation failures.
    return false;
  }
}

/// Loads a blob without checking the fingerprint (post-hoc merging).
inline SubmodelFit load_fit_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot read " + path.string());
  cereal::BinaryInputArchive ar(in);
  std::uint32_t magic = 0, version = 0;
  std::uint64_t fingerprint = 0;
  try {
    ar(magic, version, fingerprint);
  } catch (const cereal::Exception&) {
    throw DataError("blob: truncated " + path.string());
  }
  if (magic != kBlobMagic || version != kBlobVersion) throw DataError("blob: unsupported " + path.string());
  in.seekg(0);
  SubmodelFit f;
  read_fit(in, f, fingerprint);
  return f;
}

}  // namespace mmpart
