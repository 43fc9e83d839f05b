#pragma once

// Between-disease covariance algebra for the M-model: Bartlett
// parameterization, its hyperprior, and the joint latent precision.

#include <Eigen/Cholesky>
#include <Eigen/Dense>
#include <Eigen/Sparse>

#include <cmath>
#include <cstddef>
#include <numbers>
#include <string>
#include <vector>

#include "mmpart/errors.hpp"
#include "mmpart/graph.hpp"
#include "mmpart/stats.hpp"

namespace mmpart {

inline std::size_t n_hyper(std::size_t j) { return j * (j + 1) / 2; }

/// Bartlett hyperparameters. theta[0..J) are log(c_j); the rest are the
/// strictly lower entries n_{jl} of A in row-major order (2,1),(3,1),(3,2),...
struct HyperState {
  Eigen::VectorXd theta;
  std::size_t n_diseases = 0;
  double dof = 0.0;

  HyperState() = default;
  HyperState(Eigen::VectorXd t, std::size_t j, double v = -1.0)
      : theta(std::move(t)), n_diseases(j), dof(v < 0.0 ? static_cast<double>(j) + 2.0 : v) {
    if (static_cast<std::size_t>(theta.size()) != n_hyper(j)) {
      throw DataError("hyperparameter vector has length " + std::to_string(theta.size()) +
                      ", expected " + std::to_string(n_hyper(j)));
    }
  }

  static HyperState zeros(std::size_t j) {
    return HyperState(Eigen::VectorXd::Zero(static_cast<Eigen::Index>(n_hyper(j))), j);
  }
};

/// Lower-triangular Bartlett factor A built from theta.
inline Eigen::MatrixXd bartlett_factor(const HyperState& h) {
  const auto j = static_cast<Eigen::Index>(h.n_diseases);
  Eigen::MatrixXd a = Eigen::MatrixXd::Zero(j, j);
  for (Eigen::Index k = 0; k < j; ++k) a(k, k) = std::exp(h.theta(k));
  Eigen::Index idx = j;
  for (Eigen::Index r = 1; r < j; ++r)
    for (Eigen::Index c = 0; c < r; ++c) a(r, c) = h.theta(idx++);
  return a;
}

/// Omega_b^{-1} and the derived variances and correlations.
struct BetweenDiseaseCov {
  Eigen::VectorXd sigma2;
  Eigen::MatrixXd rho;
  Eigen::MatrixXd cov;

  static BetweenDiseaseCov from_cov(Eigen::MatrixXd c) {
    BetweenDiseaseCov out;
    out.sigma2 = c.diagonal();
    const Eigen::VectorXd sd = out.sigma2.cwiseSqrt();
    out.rho = c.array() / (sd * sd.transpose()).array();
    out.rho.diagonal().setOnes();
    out.cov = std::move(c);
    return out;
  }

  /// Builds diag(sigma) R diag(sigma).
  static BetweenDiseaseCov from_sigma_rho(const Eigen::VectorXd& sigma2,
                                          const Eigen::MatrixXd& rho) {
    const Eigen::VectorXd sd = sigma2.cwiseSqrt();
    return from_cov(sd.asDiagonal() * rho * sd.asDiagonal());
  }
};

inline BetweenDiseaseCov bartlett_cov(const HyperState& h) {
  const Eigen::MatrixXd a = bartlett_factor(h);
  Eigen::MatrixXd c = a * a.transpose();
  if (!c.allFinite() || (c.diagonal().array() <= 0.0).any()) {
    throw NumericError("bartlett_cov: covariance is not finite");
  }
  return BetweenDiseaseCov::from_cov(std::move(c));
}

inline HyperState bartlett_invert(const BetweenDiseaseCov& target, double dof = -1.0) {
  const auto j = target.cov.rows();
  Eigen::LLT<Eigen::MatrixXd> llt(target.cov);
  if (llt.info() != Eigen::Success) {
    throw NumericError("bartlett_invert: covariance is not positive definite");
  }
  const Eigen::MatrixXd l = llt.matrixL();
  Eigen::VectorXd theta(static_cast<Eigen::Index>(n_hyper(static_cast<std::size_t>(j))));
  for (Eigen::Index k = 0; k < j; ++k) theta(k) = std::log(l(k, k));
  Eigen::Index idx = j;
  for (Eigen::Index r = 1; r < j; ++r)
    for (Eigen::Index c = 0; c < r; ++c) theta(idx++) = l(r, c);
  return HyperState(std::move(theta), static_cast<std::size_t>(j), dof);
}

/// Log density of theta under c_j^2 ~ chi2(dof - j + 1) and n_jl ~ N(0, 1),
/// including the Jacobian of theta_j = log c_j.
inline double log_prior_hyper(const HyperState& h) {
  const std::size_t j = h.n_diseases;
  double val = static_cast<double>(j) * std::numbers::ln2;
  for (std::size_t k = 0; k < j; ++k) {
    const double t = h.theta(static_cast<Eigen::Index>(k));
    const double df = h.dof - static_cast<double>(k + 1) + 1.0;
    const double lf = stats::log_chi2_pdf(std::exp(2.0 * t), df);
    if (lf == stats::kNegInf || std::isnan(t)) return stats::kNegInf;
    val += 2.0 * t + lf;
  }
  for (auto k = static_cast<Eigen::Index>(j); k < h.theta.size(); ++k) {
    val += stats::log_std_normal_pdf(h.theta(k));
  }
  return std::isnan(val) ? stats::kNegInf : val;
}

/// Gradient of log_prior_hyper with respect to theta.
inline Eigen::VectorXd log_prior_hyper_gradient(const HyperState& h) {
  const std::size_t j = h.n_diseases;
  Eigen::VectorXd g(h.theta.size());
  for (std::size_t k = 0; k < j; ++k) {
    const double t = h.theta(static_cast<Eigen::Index>(k));
    const double df = h.dof - static_cast<double>(k);
    // d/dt [2t + (df/2 - 1) 2t - exp(2t)/2]
    g(static_cast<Eigen::Index>(k)) = df - std::exp(2.0 * t);
  }
  for (auto k = static_cast<Eigen::Index>(j); k < h.theta.size(); ++k) g(k) = -h.theta(k);
  return g;
}

/// Prior precision of vec(Theta) = Omega_b (x) Q with one sum-to-zero row per
/// (disease, component). vec stacks disease columns: index = j * I + i.
struct JointPrecision {
  SparseMatrix precision;
  SparseMatrix constraints;
};

inline Eigen::MatrixXd precision_of(const Eigen::MatrixXd& cov) {
  Eigen::LLT<Eigen::MatrixXd> llt(cov);
  if (llt.info() != Eigen::Success) {
    throw NumericError("between-disease covariance is numerically singular");
  }
  Eigen::MatrixXd omega = llt.solve(Eigen::MatrixXd::Identity(cov.rows(), cov.cols()));
  if (!omega.allFinite()) throw NumericError("between-disease precision is not finite");
  return 0.5 * (omega + omega.transpose());
}

/// Sparse Kronecker product a (x) b keeping every structural entry of b in
/// every block, even where a has zeros, so the pattern depends only on b.
inline SparseMatrix kronecker(const Eigen::MatrixXd& a, const SparseMatrix& b) {
  const Eigen::Index n = b.rows();
  std::vector<Eigen::Triplet<double>> trip;
  trip.reserve(static_cast<std::size_t>(a.size() * b.nonZeros()));
  for (Eigen::Index bj = 0; bj < a.cols(); ++bj)
    for (Eigen::Index bi = 0; bi < a.rows(); ++bi)
      for (Eigen::Index k = 0; k < b.outerSize(); ++k)
        for (SparseMatrix::InnerIterator it(b, k); it; ++it)
          trip.emplace_back(bi * n + it.row(), bj * n + it.col(), a(bi, bj) * it.value());
  SparseMatrix out(a.rows() * n, a.cols() * n);
  out.setFromTriplets(trip.begin(), trip.end());
  out.makeCompressed();
  return out;
}

inline SparseMatrix sum_to_zero_constraints(const AreaGraph& g, std::size_t n_diseases) {
  const auto comps = connected_components(g);
  const auto n = static_cast<Eigen::Index>(g.n_areas());
  std::vector<Eigen::Triplet<double>> trip;
  Eigen::Index row = 0;
  for (std::size_t j = 0; j < n_diseases; ++j) {
    for (const auto& comp : comps) {
      for (std::size_t i : comp) {
        trip.emplace_back(row, static_cast<Eigen::Index>(j) * n + static_cast<Eigen::Index>(i), 1.0);
      }
      ++row;
    }
  }
  SparseMatrix out(row, n * static_cast<Eigen::Index>(n_diseases));
  out.setFromTriplets(trip.begin(), trip.end());
  return out;
}

inline JointPrecision assemble_precision(const BetweenDiseaseCov& cov, const StructureMatrix& q,
                                         const AreaGraph& g, std::size_t n_diseases) {
  if (static_cast<std::size_t>(cov.cov.rows()) != n_diseases) {
    throw DataError("assemble_precision: covariance dimension does not match J");
  }
  JointPrecision out;
  out.precision = kronecker(precision_of(cov.cov), q.q);
  out.constraints = sum_to_zero_constraints(g, n_diseases);
  return out;
}

}  // namespace mmpart
