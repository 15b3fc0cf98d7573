#pragma once

// Sliced gradient of the discrete MMD functional. A d-dimensional gradient is
// written as c_d times the expectation, over uniform directions xi, of the
// one-dimensional gradient of the projected problem multiplied by xi. The
// one-dimensional gradient is exact and costs O((N + M) log(N + M)) by sorting.

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "mmdflow/parallel.hpp"
#include "mmdflow/points.hpp"
#include "mmdflow/random.hpp"

namespace mmdflow {

/// A unit direction on the sphere S^{D-1}.
struct Projection {
  std::vector<double> direction;
};

/// Uniform direction on S^{D-1} obtained by normalising a standard Gaussian vector.
inline Projection sample_sphere(std::size_t dim, Rng& rng) {
  if (dim == 0) throw DimensionError("sample_sphere: dimension must be positive");
  std::normal_distribution<double> normal;
  Projection out{std::vector<double>(dim)};
  for (;;) {
    double sq = 0.0;
    for (auto& v : out.direction) {
      v = normal(rng);
      sq += v * v;
    }
    const double norm = std::sqrt(sq);
    if (norm < 1e-12) continue;
    for (auto& v : out.direction) v /= norm;
    return out;
  }
}

/// c_d = sqrt(pi) Gamma((d+1)/2) / Gamma(d/2).
inline double slicing_constant(std::size_t dim) {
  if (dim == 0) throw DimensionError("slicing_constant: dimension must be positive");
  const double d = static_cast<double>(dim);
  const double sqrt_pi = std::sqrt(std::numbers::pi);
  if (dim <= 100) return sqrt_pi * std::tgamma((d + 1.0) / 2.0) / std::tgamma(d / 2.0);
  return sqrt_pi * std::exp(std::lgamma((d + 1.0) / 2.0) - std::lgamma(d / 2.0));
}

namespace detail {

/// Maps a double to an unsigned key with the same ordering; -0.0 and +0.0
/// share a key.
inline std::uint64_t order_key(double v) noexcept {
  const auto bits = std::bit_cast<std::uint64_t>(v + 0.0);
  return (bits & 0x8000000000000000ULL) ? ~bits : (bits | 0x8000000000000000ULL);
}

/// Reusable buffers for the sorted one-dimensional gradient. Particles and
/// targets are sorted together on order-preserving keys; the payload carries
/// the particle index or a target marker. Small inputs use an LSD radix sort
/// with 8-bit digits. Large inputs are first split on the top 16 key bits,
/// then each bucket is sorted on the remaining bits while it fits in cache.
struct SortWorkspace {
  static constexpr std::uint32_t kTargetTag = 0xffffffffU;
  static constexpr std::size_t kSplitThreshold = std::size_t{1} << 16;

  struct Entry {
    std::uint64_t key;
    std::uint32_t tag;
  };

  std::vector<Entry> entries, scratch;
  std::vector<std::uint32_t> bounds;

  static void insertion_sort(Entry* a, std::size_t n) {
    for (std::size_t i = 1; i < n; ++i) {
      const Entry e = a[i];
      std::size_t j = i;
      for (; j > 0 && a[j - 1].key > e.key; --j) a[j] = a[j - 1];
      a[j] = e;
    }
  }

  /// Sorts a[0, n) on the low `bits` key bits; tmp has room for n entries.
  static void lsd_sort(Entry* a, Entry* tmp, std::size_t n, int bits) {
    if (n < 64) {
      insertion_sort(a, n);
      return;
    }
    constexpr int kDigit = 8;
    constexpr std::size_t kBuckets = 256;
    const int passes = (bits + kDigit - 1) / kDigit;
    std::uint32_t hist[8][kBuckets] = {};
    for (std::size_t i = 0; i < n; ++i) {
      for (int pass = 0; pass < passes; ++pass) ++hist[pass][(a[i].key >> (pass * kDigit)) & (kBuckets - 1)];
    }
    Entry* src = a;
    Entry* dst = tmp;
    for (int pass = 0; pass < passes; ++pass) {
      const int shift = pass * kDigit;
      std::uint32_t* h = hist[pass];
      // A digit shared by every key leaves the order unchanged.
      if (h[(src[0].key >> shift) & (kBuckets - 1)] == n) continue;
      std::uint32_t running = 0;
      for (std::size_t b = 0; b < kBuckets; ++b) {
        const std::uint32_t c = h[b];
        h[b] = running;
        running += c;
      }
      for (std::size_t i = 0; i < n; ++i) dst[h[(src[i].key >> shift) & (kBuckets - 1)]++] = src[i];
      std::swap(src, dst);
    }
    if (src != a) std::copy(src, src + n, a);
  }

  void sort_entries() {
    const std::size_t total = entries.size();
    scratch.resize(total);
    if (total < kSplitThreshold) {
      lsd_sort(entries.data(), scratch.data(), total, 64);
      return;
    }
    constexpr int kTopBits = 16;
    constexpr std::size_t kTop = std::size_t{1} << kTopBits;
    bounds.assign(kTop + 1, 0U);
    for (const Entry& e : entries) ++bounds[(e.key >> (64 - kTopBits)) + 1];
    for (std::size_t b = 1; b <= kTop; ++b) bounds[b] += bounds[b - 1];
    std::vector<std::uint32_t> next(bounds.begin(), bounds.end() - 1);
    for (const Entry& e : entries) scratch[next[e.key >> (64 - kTopBits)]++] = e;
    for (std::size_t b = 0; b < kTop; ++b) {
      const std::size_t lo = bounds[b], hi = bounds[b + 1];
      if (hi - lo > 1) lsd_sort(scratch.data() + lo, entries.data() + lo, hi - lo, 64 - kTopBits);
    }
    entries.swap(scratch);
  }

  /// Writes the gradient for values x against targets p into out (size N).
  /// Each entry is -(#x below - #x above)/N^2 + (#p below - #p above)/(NM),
  /// so equal values contribute nothing.
  void gradient(std::span<const double> x, std::span<const double> p, std::span<double> out) {
    const std::size_t n = x.size();
    const std::size_t m = p.size();
    entries.resize(n + m);
    for (std::size_t i = 0; i < n; ++i) entries[i] = {order_key(x[i]), static_cast<std::uint32_t>(i)};
    for (std::size_t j = 0; j < m; ++j) entries[n + j] = {order_key(p[j]), kTargetTag};
    sort_entries();

    const double inv_nn = 1.0 / (static_cast<double>(n) * static_cast<double>(n));
    const double inv_nm = 1.0 / (static_cast<double>(n) * static_cast<double>(m));
    std::size_t x_before = 0, p_before = 0;
    const std::size_t total = n + m;
    for (std::size_t begin = 0; begin < total;) {
      std::size_t end = begin;
      std::size_t x_here = 0;
      while (end < total && entries[end].key == entries[begin].key) {
        x_here += entries[end].tag != kTargetTag;
        ++end;
      }
      const std::size_t p_here = (end - begin) - x_here;
      if (x_here > 0) {
        const double less_x = static_cast<double>(x_before);
        const double greater_x = static_cast<double>(n - x_before - x_here);
        const double less_p = static_cast<double>(p_before);
        const double greater_p = static_cast<double>(m - p_before - p_here);
        const double g = -(less_x - greater_x) * inv_nn + (less_p - greater_p) * inv_nm;
        for (std::size_t r = begin; r < end; ++r) {
          if (entries[r].tag != kTargetTag) out[entries[r].tag] = g;
        }
      }
      x_before += x_here;
      p_before += p_here;
      begin = end;
    }
  }
};

inline void require_finite(std::span<const double> v, const char* op) {
  for (double x : v) {
    if (!std::isfinite(x)) throw Error(std::string(op) + ": non-finite input");
  }
}

}  // namespace detail

/// Exact gradient of the one-dimensional discrete functional by sorting.
/// Tied values contribute the zero subgradient.
inline std::vector<double> grad_1d_sorted(std::span<const double> x, std::span<const double> p) {
  detail::require_finite(x, "grad_1d_sorted");
  detail::require_finite(p, "grad_1d_sorted");
  std::vector<double> out(x.size(), 0.0);
  if (x.empty() || p.empty()) return out;
  detail::SortWorkspace ws;
  ws.gradient(x, p, out);
  return out;
}

/// Projections are evaluated in fixed blocks of this many directions; block
/// partial sums are added in block order, so results do not depend on the
/// number of worker threads.
inline constexpr std::size_t kProjectionBlock = 64;

/// Monte-Carlo sliced estimate of the x-block of the joint gradient of the
/// discrete functional on concatenated points (u_i, q_i) against (p_j, qt_j).
/// Directions are drawn on S^{d+n-1}; only their first d components are used to
/// lift the one-dimensional gradient back, so the q-block is never formed.
inline Points sliced_grad_conditional(const Points& u, const Points& q, const Points& p,
                                      const Points& qt, std::size_t projections, Rng& rng,
                                      unsigned threads = 1) {
  if (projections == 0) throw Error("sliced_grad: projection count must be positive");
  if (u.empty() || p.empty()) throw DimensionError("sliced_grad: empty sample set");
  if (u.dim() == 0) throw DimensionError("sliced_grad: zero-dimensional points");
  if (u.dim() != p.dim()) throw DimensionError("sliced_grad: position dimension mismatch");
  if (q.dim() != qt.dim()) throw DimensionError("sliced_grad: condition dimension mismatch");
  if (q.size() != u.size() || qt.size() != p.size()) {
    throw DimensionError("sliced_grad: one condition per point required");
  }
  const std::size_t n = u.size();
  const std::size_t m = p.size();
  const std::size_t d = u.dim();
  const std::size_t nc = q.dim();
  const std::size_t total_dim = d + nc;

  // Directions are drawn up front in projection order so the random stream is
  // consumed identically regardless of threading.
  std::vector<double> directions(projections * total_dim);
  for (std::size_t k = 0; k < projections; ++k) {
    const auto xi = sample_sphere(total_dim, rng);
    std::copy(xi.direction.begin(), xi.direction.end(),
              directions.begin() + static_cast<std::ptrdiff_t>(k * total_dim));
  }

  const std::size_t blocks = (projections + kProjectionBlock - 1) / kProjectionBlock;
  const std::size_t wave = std::max(1u, threads);
  Points total(n, d);
  std::vector<Points> partial(std::min(wave, blocks), Points(n, d));
  std::vector<detail::SortWorkspace> workspaces(partial.size());

  auto run_block = [&](std::size_t block, Points& acc, detail::SortWorkspace& ws) {
    std::fill(acc.values().begin(), acc.values().end(), 0.0);
    std::vector<double> xs(n), ps(m), g(n);
    const std::size_t first = block * kProjectionBlock;
    const std::size_t last = std::min(projections, first + kProjectionBlock);
    for (std::size_t k = first; k < last; ++k) {
      const double* xi = directions.data() + k * total_dim;
      for (std::size_t i = 0; i < n; ++i) {
        double s = 0.0;
        const auto ui = u.row(i);
        for (std::size_t c = 0; c < d; ++c) s += xi[c] * ui[c];
        const auto qi = q.row(i);
        for (std::size_t c = 0; c < nc; ++c) s += xi[d + c] * qi[c];
        xs[i] = s;
      }
      for (std::size_t j = 0; j < m; ++j) {
        double s = 0.0;
        const auto pj = p.row(j);
        for (std::size_t c = 0; c < d; ++c) s += xi[c] * pj[c];
        const auto qj = qt.row(j);
        for (std::size_t c = 0; c < nc; ++c) s += xi[d + c] * qj[c];
        ps[j] = s;
      }
      ws.gradient(xs, ps, g);
      for (std::size_t i = 0; i < n; ++i) {
        auto a = acc.row(i);
        for (std::size_t c = 0; c < d; ++c) a[c] += g[i] * xi[c];
      }
    }
  };

  for (std::size_t start = 0; start < blocks; start += wave) {
    const std::size_t count = std::min(wave, blocks - start);
    detail::parallel_for(count, threads, [&](std::size_t w) {
      run_block(start + w, partial[w], workspaces[w]);
    });
    for (std::size_t w = 0; w < count; ++w) {
      auto dst = total.values();
      const auto src = partial[w].values();
      for (std::size_t t = 0; t < dst.size(); ++t) dst[t] += src[t];
    }
  }

  const double scale = slicing_constant(total_dim) / static_cast<double>(projections);
  for (auto& v : total.values()) v *= scale;
  return total;
}

/// Monte-Carlo sliced estimate of grad_full(x, p) using fresh directions.
inline Points sliced_grad(const Points& x, const Points& p, std::size_t projections, Rng& rng,
                          unsigned threads = 1) {
  return sliced_grad_conditional(x, Points(x.size(), 0), p, Points(p.size(), 0), projections,
                                 rng, threads);
}

}  // namespace mmdflow
