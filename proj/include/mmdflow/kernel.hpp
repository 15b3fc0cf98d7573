#pragma once

// Exact O(N^2) evaluation of the MMD with the negative distance kernel
// K(x, y) = -|x - y|, the discrete flow functional and its gradient.
// All double sums run i-outer, j-inner in index order.

#include <algorithm>
#include <cmath>
#include <span>
#include <string>
#include <vector>

#include "mmdflow/parallel.hpp"
#include "mmdflow/points.hpp"

namespace mmdflow {

namespace detail {

inline void require_compatible(const Points& a, const Points& b, const char* op) {
  if (a.empty() || b.empty()) throw DimensionError(std::string(op) + ": empty sample set");
  if (a.dim() == 0) throw DimensionError(std::string(op) + ": zero-dimensional points");
  if (a.dim() != b.dim()) {
    throw DimensionError(std::string(op) + ": dimension mismatch (" + std::to_string(a.dim()) +
                         " vs " + std::to_string(b.dim()) + ")");
  }
}

/// sum_{i,j} |a_i - a_j| over all ordered pairs, evaluated as twice the i < j sum.
inline double self_distance_sum(const Points& a) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    for (std::size_t j = i + 1; j < a.size(); ++j) s += euclidean_distance(a.row(i), a.row(j));
  }
  return 2.0 * s;
}

inline double cross_distance_sum(const Points& a, const Points& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    for (std::size_t j = 0; j < b.size(); ++j) s += euclidean_distance(a.row(i), b.row(j));
  }
  return s;
}

// Orders the pair so that cross sums are evaluated identically for (a, b) and (b, a).
inline bool canonical_first(const Points& a, const Points& b) {
  if (a.size() != b.size()) return a.size() < b.size();
  const auto va = a.values();
  const auto vb = b.values();
  return !std::lexicographical_compare(vb.begin(), vb.end(), va.begin(), va.end());
}

inline double assoc_kernel(std::span<const double> x, std::span<const double> y) {
  return -euclidean_distance(x, y) + euclidean_norm(x) + euclidean_norm(y);
}

inline double sign(double v) noexcept { return static_cast<double>((v > 0.0) - (v < 0.0)); }

}  // namespace detail

/// Squared MMD (V-statistic) between the empirical measures of `a` and `b`.
/// Symmetric bit-for-bit in its arguments.
inline double mmd_sq(const Points& a, const Points& b) {
  detail::require_compatible(a, b, "mmd_sq");
  const double n = static_cast<double>(a.size());
  const double m = static_cast<double>(b.size());
  const double self_a = detail::self_distance_sum(a) / (n * n);
  const double self_b = detail::self_distance_sum(b) / (m * m);
  const double cross = detail::canonical_first(a, b) ? detail::cross_distance_sum(a, b)
                                                     : detail::cross_distance_sum(b, a);
  // 1/2 K_aa - K_ab + 1/2 K_bb with K = -distance
  return cross / (n * m) - 0.5 * (self_a + self_b);
}

/// Squared MMD evaluated with the associated kernel -|x-y| + |x| + |y|.
/// Agrees with mmd_sq up to rounding.
inline double mmd_sq_assoc(const Points& a, const Points& b) {
  detail::require_compatible(a, b, "mmd_sq_assoc");
  const double n = static_cast<double>(a.size());
  const double m = static_cast<double>(b.size());
  double kaa = 0.0, kbb = 0.0, kab = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i)
    for (std::size_t j = 0; j < a.size(); ++j) kaa += detail::assoc_kernel(a.row(i), a.row(j));
  for (std::size_t i = 0; i < b.size(); ++i)
    for (std::size_t j = 0; j < b.size(); ++j) kbb += detail::assoc_kernel(b.row(i), b.row(j));
  for (std::size_t i = 0; i < a.size(); ++i)
    for (std::size_t j = 0; j < b.size(); ++j) kab += detail::assoc_kernel(a.row(i), b.row(j));
  return 0.5 * kaa / (n * n) - kab / (n * m) + 0.5 * kbb / (m * m);
}

/// F_p(x) = -1/(2N^2) sum |x_i - x_j| + 1/(NM) sum |x_i - p_j|.
inline double discrete_functional(const Points& x, const Points& p) {
  detail::require_compatible(x, p, "discrete_functional");
  const double n = static_cast<double>(x.size());
  const double m = static_cast<double>(p.size());
  return -detail::self_distance_sum(x) / (2.0 * n * n) +
         detail::cross_distance_sum(x, p) / (n * m);
}

/// Exact gradient of discrete_functional with respect to every x_k.
/// Coincident points contribute the zero subgradient. Rows are independent,
/// so the result does not depend on `threads`.
inline Points grad_full(const Points& x, const Points& p, unsigned threads = 1) {
  detail::require_compatible(x, p, "grad_full");
  const std::size_t n = x.size();
  const std::size_t m = p.size();
  const std::size_t d = x.dim();
  const double inv_nn = 1.0 / (static_cast<double>(n) * static_cast<double>(n));
  const double inv_nm = 1.0 / (static_cast<double>(n) * static_cast<double>(m));
  Points grad(n, d);

  if (d == 1) {
    const auto xv = x.values();
    const auto pv = p.values();
    detail::parallel_for(n, threads, [&](std::size_t k) {
      const double xk = xv[k];
      double interaction = 0.0, attraction = 0.0;
      for (std::size_t j = 0; j < n; ++j) interaction += detail::sign(xk - xv[j]);
      for (std::size_t j = 0; j < m; ++j) attraction += detail::sign(xk - pv[j]);
      grad(k, 0) = -interaction * inv_nn + attraction * inv_nm;
    });
    return grad;
  }

  detail::parallel_for(n, threads, [&](std::size_t k) {
    std::vector<double> interaction(d, 0.0), attraction(d, 0.0);
    const auto xk = x.row(k);
    auto accumulate = [&](std::span<const double> other, std::vector<double>& acc) {
      const double dist = detail::euclidean_distance(xk, other);
      if (dist == 0.0) return;
      for (std::size_t c = 0; c < d; ++c) acc[c] += (xk[c] - other[c]) / dist;
    };
    for (std::size_t j = 0; j < n; ++j) accumulate(x.row(j), interaction);
    for (std::size_t j = 0; j < m; ++j) accumulate(p.row(j), attraction);
    auto g = grad.row(k);
    for (std::size_t c = 0; c < d; ++c) g[c] = -interaction[c] * inv_nn + attraction[c] * inv_nm;
  });
  return grad;
}

/// Kernel mean embedding of `mu` under the associated kernel, evaluated at t.
inline double kernel_mean_embedding(const Points& mu, std::span<const double> t) {
  if (mu.empty()) throw DimensionError("kernel_mean_embedding: empty sample set");
  if (mu.dim() != t.size()) throw DimensionError("kernel_mean_embedding: dimension mismatch");
  double s = 0.0;
  for (std::size_t j = 0; j < mu.size(); ++j) s += detail::assoc_kernel(t, mu.row(j));
  return s / static_cast<double>(mu.size());
}

}  // namespace mmdflow
