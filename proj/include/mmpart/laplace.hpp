#pragma once

// Gaussian approximation of the latent field of one multivariate M-model.
//
// The engine works with the linear predictor eta = vec(alpha_j + theta_ij)
// instead of (alpha, theta). Under a flat prior on alpha and per-component
// sum-to-zero constraints on theta, eta has the intrinsic prior
// Omega_b (x) Q, restricted so that every connected component of a disease
// shares the same mean (that common mean is alpha_j). On a connected graph
// no constraint remains, the Hessian Omega_b (x) Q + diag(E exp(eta)) is
// sparse and positive definite, and the alpha/theta confounding never
// enters the linear algebra. alpha and theta are recovered afterwards as
// the per-disease mean of eta and the centred remainder.

#include <Eigen/Dense>
#include <Eigen/Sparse>
#include <Eigen/SparseCholesky>

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <cstddef>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "mmpart/counts.hpp"
#include "mmpart/errors.hpp"
#include "mmpart/graph.hpp"
#include "mmpart/mmodel.hpp"

namespace mmpart {

struct NewtonOptions {
  int max_iterations = 50;
  double gradient_tolerance = 1e-8;
  // Shift draws by the third-order mean correction (see draw()).
  bool mean_correction = true;
};

/// alpha (J) and theta (I x J) for one latent configuration.
struct LatentState {
  Eigen::VectorXd alpha;
  Eigen::MatrixXd theta;
};

struct LatentMode {
  Eigen::VectorXd eta;  // vec, index j * I + i
  LatentState state;
  int iterations = 0;
  double gradient_norm = 0.0;
};

class LaplaceEngine {
 public:
  using Solver = Eigen::SimplicialLDLT<SparseMatrix, Eigen::Lower, Eigen::AMDOrdering<int>>;

  LaplaceEngine(const CountPanel& data, const AreaGraph& g, NewtonOptions opts = {})
      : opts_(opts),
        n_(static_cast<Eigen::Index>(data.n_areas())),
        j_(static_cast<Eigen::Index>(data.n_diseases())),
        observed_(Eigen::Map<const Eigen::VectorXd>(data.observed.data(), data.observed.size())),
        expected_(Eigen::Map<const Eigen::VectorXd>(data.expected.data(), data.expected.size())) {
    if (data.n_areas() != g.n_areas()) throw DataError("panel and graph disagree on the number of areas");
    if (j_ < 1 || n_ < 1) throw DataError("empty panel");
    q_ = structure_matrix(g);
    components_ = connected_components(g);
    build_constraints();
    build_pattern();
    solver_.analyzePattern(hessian_);
    start_ = Eigen::VectorXd(n_ * j_);
    for (Eigen::Index j = 0; j < j_; ++j) {
      const double o = data.observed.col(j).sum();
      const double e = data.expected.col(j).sum();
      if (o <= 0.0) {
        throw NumericError("disease '" + data.disease_names[static_cast<std::size_t>(j)] +
                           "' has no observed cases; its intercept is not identified");
      }
      start_.segment(j * n_, n_).setConstant(std::log(o / e));
    }
    last_eta_ = start_;
  }

  Eigen::Index n_areas() const { return n_; }
  Eigen::Index n_diseases() const { return j_; }
  std::size_t n_components() const { return components_.size(); }
  const StructureMatrix& structure() const { return q_; }
  const Eigen::VectorXd& initial_eta() const { return start_; }

  /// Prior precision applied to a vec(eta) vector.
  Eigen::VectorXd prior_times(const Eigen::MatrixXd& omega, const Eigen::VectorXd& eta) const {
    const Eigen::Map<const Eigen::MatrixXd> e(eta.data(), n_, j_);
    const Eigen::MatrixXd qe = q_.q * e;
    Eigen::MatrixXd out = qe * omega;
    return Eigen::Map<Eigen::VectorXd>(out.data(), out.size());
  }

  /// Log joint of eta given hyperparameters, up to terms free of eta:
  /// sum(O eta - E exp(eta)) - eta' P eta / 2.
  double log_joint(const Eigen::VectorXd& eta, const Eigen::MatrixXd& omega) const {
    const Eigen::VectorXd pe = prior_times(omega, eta);
    return observed_.dot(eta) - expected_.dot(eta.array().exp().matrix()) - 0.5 * eta.dot(pe);
  }

  Eigen::VectorXd gradient(const Eigen::VectorXd& eta, const Eigen::MatrixXd& omega) const {
    return observed_ - expected_.cwiseProduct(eta.array().exp().matrix()) - prior_times(omega, eta);
  }

  /// Negative Hessian of the log joint: P + diag(E exp(eta)).
  SparseMatrix negative_hessian(const Eigen::VectorXd& eta, const Eigen::MatrixXd& omega) {
    fill_hessian(eta, omega);
    return hessian_;
  }

  /// Newton iterations from `start` (or the previous mode) to the mode of
  /// p(eta | hyper, y). Leaves the factorization at the mode in place.
  const LatentMode& mode(const HyperState& h, const Eigen::VectorXd* start = nullptr) {
    const Eigen::MatrixXd omega = precision_of(bartlett_cov(h).cov);
    return mode_with_precision(omega, start);
  }

  const LatentMode& mode_with_precision(const Eigen::MatrixXd& omega,
                                        const Eigen::VectorXd* start = nullptr) {
    omega_ = omega;
    Eigen::VectorXd eta = start ? *start : last_eta_;
    project(eta);
    double f = log_joint(eta, omega);
    int it = 0;
    double gnorm = 0.0;
    for (;; ++it) {
      const Eigen::VectorXd g = gradient(eta, omega);
      gnorm = projected_norm(g);
      if (gnorm < opts_.gradient_tolerance) break;
      if (it >= opts_.max_iterations) {
        throw NumericError("Newton iterations did not converge after " +
                           std::to_string(opts_.max_iterations) +
                           " steps (max |gradient| = " + std::to_string(gnorm) + ")");
      }
      factorize(eta, omega);
      Eigen::VectorXd step = solver_.solve(g);
      if (has_constraints()) step -= kriging_ * (b_ * (eta + step));
      // With a very stiff prior the gradient sits at P times rounding noise
      // and never reaches the tolerance; a negligible step means we are there.
      if (step.cwiseAbs().maxCoeff() < 1e-12 * (1.0 + eta.cwiseAbs().maxCoeff())) break;
      // Near the mode the change in f drops below its rounding error, so
      // the ascent test allows a slack proportional to |f|.
      const double slack = 1e-12 * (1.0 + std::abs(f));
      double t = 1.0;
      bool moved = false;
      for (int half = 0; half < 40; ++half, t *= 0.5) {
        Eigen::VectorXd trial = eta + t * step;
        if (trial.maxCoeff() > 700.0) continue;
        const double ft = log_joint(trial, omega);
        if (std::isfinite(ft) && ft >= f - slack) {
          eta = std::move(trial);
          f = ft;
          moved = true;
          break;
        }
      }
      if (!moved) {
        // No ascent along the Newton direction: rounding floor reached.
        break;
      }
    }
    if (eta.maxCoeff() > 700.0) throw NumericError("likelihood overflow in latent mode");
    factorize(eta, omega);
    last_eta_ = eta;
    current_.eta = eta;
    current_.state = split(eta);
    current_.iterations = it;
    current_.gradient_norm = gnorm;
    return current_;
  }

  /// Log of the Laplace approximation to p(hyper | y), up to a constant.
  double log_posterior(const HyperState& h, const Eigen::VectorXd* start = nullptr) {
    const double lp = log_prior_hyper(h);
    if (!std::isfinite(lp)) return stats::kNegInf;
    const Eigen::MatrixXd omega = precision_of(bartlett_cov(h).cov);
    const LatentMode& m = mode_with_precision(omega, start);
    // log det Omega_b = -log det(A A') = -2 sum theta_j
    double log_det_omega = 0.0;
    for (Eigen::Index k = 0; k < j_; ++k) log_det_omega -= 2.0 * h.theta(k);
    const double rank = static_cast<double>(n_) - static_cast<double>(components_.size());
    return log_joint(m.eta, omega) + 0.5 * rank * log_det_omega + lp - 0.5 * log_det_hessian() -
           0.5 * log_det_constraint_;
  }

  /// log det of P + diag(E exp(eta)) at the last factorized point.
  double log_det_hessian() const { return solver_.vectorD().array().log().sum(); }

  /// Diagonal of the conditional covariance (H^{-1}, corrected for the
  /// constraints) at the current factorization, by selected inversion.
  Eigen::VectorXd marginal_variances() const {
    const auto& l = solver_.matrixL().nestedExpression();
    const Eigen::VectorXd& d = solver_.vectorD();
    const Eigen::Index n = l.cols();
    const int* lp = l.outerIndexPtr();
    const int* li = l.innerIndexPtr();
    const double* lx = l.valuePtr();
    // Z = (L D L')^{-1} on the pattern of L, columns from last to first.
    std::vector<double> zx(static_cast<std::size_t>(lp[n]));
    Eigen::VectorXd zd(n);
    std::vector<long> pos(static_cast<std::size_t>(n), -1);
    std::vector<double> acc;
    for (Eigen::Index j = n - 1; j >= 0; --j) {
      const int b = lp[j], e = lp[j + 1];
      acc.assign(static_cast<std::size_t>(e - b), 0.0);
      for (int p = b; p < e; ++p) pos[static_cast<std::size_t>(li[p])] = p - b;
      for (int p = b; p < e; ++p) {
        const int k = li[p];
        const double lkj = lx[p];
        acc[static_cast<std::size_t>(p - b)] += lkj * zd(k);
        for (int q = lp[k]; q < lp[k + 1]; ++q) {
          const long r = pos[static_cast<std::size_t>(li[q])];
          if (r < 0) continue;
          // Z(r,k) couples rows r and k of column j in both directions.
          acc[static_cast<std::size_t>(r)] += lkj * zx[static_cast<std::size_t>(q)];
          acc[static_cast<std::size_t>(p - b)] += lx[b + r] * zx[static_cast<std::size_t>(q)];
        }
      }
      double diag = 1.0 / d(j);
      for (int p = b; p < e; ++p) {
        zx[static_cast<std::size_t>(p)] = -acc[static_cast<std::size_t>(p - b)];
        diag -= lx[p] * zx[static_cast<std::size_t>(p)];
      }
      zd(j) = diag;
      for (int p = b; p < e; ++p) pos[static_cast<std::size_t>(li[p])] = -1;
    }
    const auto& perm = solver_.permutationP().indices();
    Eigen::VectorXd out(n);
    for (Eigen::Index i = 0; i < n; ++i) out(i) = zd(perm(i));
    if (has_constraints()) out -= kriging_.cwiseProduct(hinv_bt_).rowwise().sum();
    return out;
  }

  /// First-order shift from the mode to the mean of p(eta | hyper, y). The
  /// Poisson log-likelihood has third derivative -E exp(eta) per cell; with
  /// Sigma the constrained covariance, mean - mode ~ Sigma (c o diag(Sigma)) / 2.
  Eigen::VectorXd mean_shift() const { return mean_shift(marginal_variances()); }

  Eigen::VectorXd mean_shift(const Eigen::VectorXd& var) const {
    const Eigen::VectorXd t =
        -0.5 * expected_.cwiseProduct(current_.eta.array().exp().matrix()).cwiseProduct(var);
    Eigen::VectorXd shift = solver_.solve(t);
    if (has_constraints()) shift -= kriging_ * (b_ * shift);
    return shift;
  }

  /// One draw from the constrained Gaussian approximation at the current
  /// mode, recentred by mean_shift() unless that is switched off.
  template <class Rng>
  Eigen::VectorXd draw(Rng& rng) const {
    Eigen::VectorXd x = draw_centred(rng);
    if (opts_.mean_correction) x += mean_shift();
    return x;
  }

  /// Same as draw() with a precomputed shift (empty for none).
  template <class Rng>
  Eigen::VectorXd draw(Rng& rng, const Eigen::VectorXd& shift) const {
    Eigen::VectorXd x = draw_centred(rng);
    if (shift.size() > 0) x += shift;
    return x;
  }

  /// log p(O_k | y without cell k, hyper) for every cell. Cell k's likelihood
  /// enters its Gaussian marginal N(mode_k, var_k) as a quadratic site
  /// expanded at the mode; dividing it out leaves the cavity, and the
  /// Poisson pmf is integrated against the cavity numerically. Cells whose
  /// cavity is improper fall back to log p(O_k | exp(mode_k)).
  Eigen::VectorXd log_loo_predictive(const Eigen::VectorXd& var) const {
    const Eigen::Index n = var.size();
    Eigen::VectorXd out(n);
    for (Eigen::Index k = 0; k < n; ++k) {
      const double o = observed_(k), e = expected_(k), mode = current_.eta(k);
      const double c = e * std::exp(mode);
      const double site_linear = o - c + c * mode;
      const double tau = 1.0 / var(k) - c;
      if (!(tau > 1e-10 / var(k))) {
        out(k) = poisson_log_pmf(o, e, mode);
        continue;
      }
      const double mu = (mode / var(k) - site_linear) / tau;
      out(k) = log_poisson_gaussian(o, e, mu, tau);
    }
    return out;
  }
  /// Splits eta into alpha (per-disease mean) and theta (sum-to-zero per component).
  LatentState split(const Eigen::VectorXd& eta) const {
    LatentState s;
    s.alpha.resize(j_);
    s.theta.resize(n_, j_);
    for (Eigen::Index j = 0; j < j_; ++j) {
      const auto col = eta.segment(j * n_, n_);
      s.alpha(j) = col.mean();
      for (const auto& comp : components_) {
        double m = 0.0;
        for (std::size_t i : comp) m += col(static_cast<Eigen::Index>(i));
        m /= static_cast<double>(comp.size());
        for (std::size_t i : comp) {
          s.theta(static_cast<Eigen::Index>(i), j) = col(static_cast<Eigen::Index>(i)) - m;
        }
      }
    }
    return s;
  }

  const LatentMode& current() const { return current_; }
  const SparseMatrix& current_precision() const { return hessian_; }

 private:
  bool has_constraints() const { return b_.rows() > 0; }

  template <class Rng>
  Eigen::VectorXd draw_centred(Rng& rng) const {
    std::normal_distribution<double> normal(0.0, 1.0);
    Eigen::VectorXd z(n_ * j_);
    for (Eigen::Index k = 0; k < z.size(); ++k) z(k) = normal(rng);
    z.array() /= solver_.vectorD().array().sqrt();
    const Eigen::VectorXd y = solver_.matrixU().solve(z);
    Eigen::VectorXd x = current_.eta + solver_.permutationPinv() * y;
    if (has_constraints()) x -= kriging_ * (b_ * x);
    return x;
  }

  static double poisson_log_pmf(double o, double e, double eta) {
    if (e <= 0.0) return o == 0.0 ? 0.0 : -std::numeric_limits<double>::infinity();
    return o * (std::log(e) + eta) - e * std::exp(eta) - std::lgamma(o + 1.0);
  }

  // log of the integral of Poisson(o | e exp(eta)) N(eta; mu, 1/tau) d eta.
  // The integrand is log-concave: find its peak by Newton, then use the
  // trapezoid rule over +-8 curvature widths, which is spectrally accurate
  // for a smooth bell-shaped integrand.
  static double log_poisson_gaussian(double o, double e, double mu, double tau) {
    if (e <= 0.0) return o == 0.0 ? 0.0 : -std::numeric_limits<double>::infinity();
    const auto h = [&](double x) {
      return poisson_log_pmf(o, e, x) - 0.5 * tau * (x - mu) * (x - mu) + 0.5 * std::log(tau / (2.0 * M_PI));
    };
    double x = o > 0.0 ? std::min(mu, std::log(o / e)) : mu;
    for (int it = 0; it < 100; ++it) {
      const double ex = e * std::exp(x);
      const double step = (o - ex - tau * (x - mu)) / (ex + tau);
      x += std::clamp(step, -1.0, 1.0);
      if (std::abs(step) < 1e-12 * (1.0 + std::abs(x))) break;
    }
    const double width = 1.0 / std::sqrt(e * std::exp(x) + tau);
    constexpr int kHalf = 24;
    const double dx = 8.0 * width / kHalf;
    std::array<double, 2 * kHalf + 1> v{};
    double top = -std::numeric_limits<double>::infinity();
    for (int q = -kHalf; q <= kHalf; ++q) {
      v[static_cast<std::size_t>(q + kHalf)] = h(x + q * dx);
      top = std::max(top, v[static_cast<std::size_t>(q + kHalf)]);
    }
    double sum = 0.0;
    for (double t : v) sum += std::exp(t - top);
    return top + std::log(sum * dx);
  }

  // Rows: mean over component c minus mean over component 0, per disease.
  void build_constraints() {
    const std::size_t c = components_.size();
    b_.resize(static_cast<Eigen::Index>((c - 1) * static_cast<std::size_t>(j_)), n_ * j_);
    if (c <= 1) return;
    std::vector<Eigen::Triplet<double>> trip;
    Eigen::Index row = 0;
    for (Eigen::Index j = 0; j < j_; ++j) {
      for (std::size_t k = 1; k < c; ++k, ++row) {
        for (std::size_t i : components_[k])
          trip.emplace_back(row, j * n_ + static_cast<Eigen::Index>(i), 1.0 / static_cast<double>(components_[k].size()));
        for (std::size_t i : components_[0])
          trip.emplace_back(row, j * n_ + static_cast<Eigen::Index>(i), -1.0 / static_cast<double>(components_[0].size()));
      }
    }
    b_.setFromTriplets(trip.begin(), trip.end());
    // Euclidean projector onto null(B) for gradient checks.
    const Eigen::MatrixXd bd(b_);
    bbt_inv_ = (bd * bd.transpose()).inverse();
  }

  void build_pattern() {
    const Eigen::MatrixXd ones = Eigen::MatrixXd::Ones(j_, j_);
    SparseMatrix q_with_diag = q_.q;
    // Isolated areas have no structural diagonal; the likelihood term needs one.
    for (Eigen::Index i = 0; i < n_; ++i) q_with_diag.coeffRef(i, i) += 0.0;
    q_with_diag.makeCompressed();
    hessian_ = kronecker(ones, q_with_diag);
    block_.resize(static_cast<std::size_t>(hessian_.nonZeros()));
    qvalue_.resize(static_cast<std::size_t>(hessian_.nonZeros()));
    diag_pos_.assign(static_cast<std::size_t>(n_ * j_), -1);
    for (Eigen::Index col = 0; col < hessian_.outerSize(); ++col) {
      for (SparseMatrix::InnerIterator it(hessian_, col); it; ++it) {
        const auto pos = static_cast<std::size_t>(&it.valueRef() - hessian_.valuePtr());
        block_[pos] = static_cast<int>((it.row() / n_) + (it.col() / n_) * j_);
        qvalue_[pos] = q_with_diag.coeff(it.row() % n_, it.col() % n_);
        if (it.row() == it.col()) diag_pos_[static_cast<std::size_t>(it.row())] = static_cast<long>(pos);
      }
    }
  }

  void fill_hessian(const Eigen::VectorXd& eta, const Eigen::MatrixXd& omega) {
    double* v = hessian_.valuePtr();
    for (std::size_t k = 0; k < block_.size(); ++k) v[k] = omega.data()[block_[k]] * qvalue_[k];
    for (Eigen::Index r = 0; r < n_ * j_; ++r) {
      v[diag_pos_[static_cast<std::size_t>(r)]] += expected_(r) * std::exp(eta(r));
    }
  }

  void factorize(const Eigen::VectorXd& eta, const Eigen::MatrixXd& omega) {
    fill_hessian(eta, omega);
    solver_.factorize(hessian_);
    if (solver_.info() != Eigen::Success || (solver_.vectorD().array() <= 0.0).any()) {
      throw NumericError("sparse Cholesky factorization of the latent precision failed");
    }
    log_det_constraint_ = 0.0;
    if (has_constraints()) {
      const Eigen::MatrixXd bt = Eigen::MatrixXd(b_.transpose());
      const Eigen::MatrixXd hinv_bt = solver_.solve(bt);
      const Eigen::MatrixXd s = b_ * hinv_bt;
      Eigen::LLT<Eigen::MatrixXd> llt(s);
      if (llt.info() != Eigen::Success) throw NumericError("constraint covariance is singular");
      kriging_ = llt.solve(hinv_bt.transpose()).transpose();
      hinv_bt_ = hinv_bt;
      log_det_constraint_ = 2.0 * Eigen::MatrixXd(llt.matrixL()).diagonal().array().log().sum();
    }
  }

  void project(Eigen::VectorXd& eta) const {
    if (!has_constraints()) return;
    const Eigen::VectorXd bx = b_ * eta;
    eta -= b_.transpose() * (bbt_inv_ * bx);
  }

  double projected_norm(Eigen::VectorXd g) const {
    project(g);
    return g.cwiseAbs().maxCoeff();
  }

  NewtonOptions opts_;
  Eigen::Index n_;
  Eigen::Index j_;
  Eigen::VectorXd observed_;
  Eigen::VectorXd expected_;
  StructureMatrix q_;
  std::vector<std::vector<std::size_t>> components_;
  SparseMatrix b_;
  Eigen::MatrixXd bbt_inv_;
  SparseMatrix hessian_;
  std::vector<int> block_;
  std::vector<double> qvalue_;
  std::vector<long> diag_pos_;
  Solver solver_;
  Eigen::MatrixXd kriging_;
  Eigen::MatrixXd hinv_bt_;
  double log_det_constraint_ = 0.0;
  Eigen::MatrixXd omega_;
  Eigen::VectorXd start_;
  Eigen::VectorXd last_eta_;
  LatentMode current_;
};

}  // namespace mmpart
