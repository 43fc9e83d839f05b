#pragma once

// Scalar densities and empirical summaries shared by the engine and the merge step.

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <span>
#include <vector>

namespace mmpart::stats {

inline constexpr double kNegInf = -std::numeric_limits<double>::infinity();

inline double log_poisson_pmf(double count, double mean) {
  if (mean <= 0.0) return count == 0.0 ? 0.0 : kNegInf;
  return count * std::log(mean) - mean - std::lgamma(count + 1.0);
}

/// Log density of a chi-square variate with `dof` degrees of freedom.
inline double log_chi2_pdf(double x, double dof) {
  if (!(x > 0.0) || std::isinf(x)) return kNegInf;
  const double half = 0.5 * dof;
  return (half - 1.0) * std::log(x) - 0.5 * x - half * std::numbers::ln2 -
         std::lgamma(half);
}

inline double log_std_normal_pdf(double x) {
  return -0.5 * x * x - 0.5 * std::log(2.0 * std::numbers::pi);
}

inline double log_sum_exp(std::span<const double> v) {
  double m = kNegInf;
  for (double x : v) m = std::max(m, x);
  if (!std::isfinite(m)) return m;
  double s = 0.0;
  for (double x : v) s += std::exp(x - m);
  return m + std::log(s);
}

inline double mean(std::span<const double> v) {
  double s = 0.0;
  for (double x : v) s += x;
  return s / static_cast<double>(v.size());
}

/// Sample variance with the n-1 denominator; 0 for fewer than two values.
/// Values are shifted by the first one, so constant input gives exactly 0.
inline double variance(std::span<const double> v) {
  if (v.size() < 2) return 0.0;
  const double shift = v[0];
  double m = 0.0;
  for (double x : v) m += x - shift;
  m /= static_cast<double>(v.size());
  double s = 0.0;
  for (double x : v) s += (x - shift - m) * (x - shift - m);
  return s / static_cast<double>(v.size() - 1);
}

/// Linear-interpolation quantile (R type 7) of already sorted values.
inline double quantile_sorted(std::span<const double> sorted, double p) {
  const std::size_t n = sorted.size();
  if (n == 1) return sorted[0];
  const double h = p * static_cast<double>(n - 1);
  const auto lo = static_cast<std::size_t>(std::floor(h));
  if (lo + 1 >= n) return sorted[n - 1];
  const double frac = h - static_cast<double>(lo);
  return sorted[lo] + frac * (sorted[lo + 1] - sorted[lo]);
}

/// Posterior summary of one scalar quantity from its draws.
struct Summary {
  double mean = 0.0;
  double sd = 0.0;
  double median = 0.0;
  double q025 = 0.0;
  double q975 = 0.0;
};

inline Summary summarize(std::span<const double> draws) {
  std::vector<double> s(draws.begin(), draws.end());
  std::sort(s.begin(), s.end());
  Summary out;
  out.mean = mean(s);
  out.sd = std::sqrt(variance(s));
  out.median = quantile_sorted(s, 0.5);
  out.q025 = quantile_sorted(s, 0.025);
  out.q975 = quantile_sorted(s, 0.975);
  return out;
}

}  // namespace mmpart::stats
