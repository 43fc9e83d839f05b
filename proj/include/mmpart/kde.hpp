#pragma once

// Gaussian kernel density estimate on a regular grid.

#include <algorithm>
#include <cmath>
#include <numbers>
#include <span>
#include <vector>

#include "mmpart/errors.hpp"
#include "mmpart/stats.hpp"

namespace mmpart {

struct DensityCurve {
  std::vector<double> x;
  std::vector<double> density;
  double bandwidth = 0.0;
};

/// Silverman's rule of thumb: 0.9 min(sd, IQR/1.34) n^(-1/5).
inline double silverman_bandwidth(std::span<const double> draws) {
  std::vector<double> sorted(draws.begin(), draws.end());
  std::sort(sorted.begin(), sorted.end());
  const double sd = sorted.size() > 1 ? std::sqrt(stats::variance(sorted)) : 0.0;
  const double iqr = stats::quantile_sorted(sorted, 0.75) - stats::quantile_sorted(sorted, 0.25);
  double spread = std::min(sd, iqr / 1.34);
  if (!(spread > 0.0)) spread = sd > 0.0 ? sd : (std::abs(sorted.front()) > 0.0 ? 0.1 * std::abs(sorted.front()) : 1.0);
  return 0.9 * spread * std::pow(static_cast<double>(sorted.size()), -0.2);
}

/// Density on `points` grid points spanning the data plus four bandwidths on
/// each side, rescaled so the trapezoid integral is exactly one.
inline DensityCurve gaussian_kde(std::span<const double> draws, std::size_t points = 512) {
  if (draws.empty()) throw DataError("kde: no draws");
  if (points < 2) throw DataError("kde: need at least two grid points");
  DensityCurve c;
  c.bandwidth = silverman_bandwidth(draws);
  const auto [lo_it, hi_it] = std::minmax_element(draws.begin(), draws.end());
  const double lo = *lo_it - 4.0 * c.bandwidth;
  const double hi = *hi_it + 4.0 * c.bandwidth;
  const double step = (hi - lo) / static_cast<double>(points - 1);
  const double norm = 1.0 / (static_cast<double>(draws.size()) * c.bandwidth * std::sqrt(2.0 * std::numbers::pi));
  c.x.resize(points);
  c.density.resize(points);
  for (std::size_t k = 0; k < points; ++k) {
    const double x = lo + step * static_cast<double>(k);
    double acc = 0.0;
    for (double d : draws) {
      const double u = (x - d) / c.bandwidth;
      acc += std::exp(-0.5 * u * u);
    }
    c.x[k] = x;
    c.density[k] = acc * norm;
  }
  double area = 0.0;
  for (std::size_t k = 1; k < points; ++k) area += 0.5 * step * (c.density[k] + c.density[k - 1]);
  if (area > 0.0) {
    for (double& v : c.density) v /= area;
  }
  return c;
}

inline double trapezoid(const DensityCurve& c) {
  double area = 0.0;
  for (std::size_t k = 1; k < c.x.size(); ++k) {
    area += 0.5 * (c.x[k] - c.x[k - 1]) * (c.density[k] + c.density[k - 1]);
  }
  return area;
}

}  // namespace mmpart
