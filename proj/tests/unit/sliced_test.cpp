#include <gtest/gtest.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numbers>
#include <vector>

#include "mmdflow/kernel.hpp"
#include "mmdflow/sliced.hpp"
#include "test_util.hpp"

namespace mmdflow {
namespace {

using testing::random_points;
using testing::relative_l2;

TEST(SampleSphere, OneDimensionalIsSign) {
  Rng rng(1);
  for (int t = 0; t < 100; ++t) {
    const auto xi = sample_sphere(1, rng);
    EXPECT_EQ(std::abs(xi.direction[0]), 1.0);
  }
  EXPECT_THROW(sample_sphere(0, rng), DimensionError);
}

TEST(SampleSphere, UnitNormAndCentred) {
  Rng rng(2);
  double mean[3] = {0, 0, 0};
  constexpr int kDraws = 100000;
  for (int t = 0; t < kDraws; ++t) {
    const auto xi = sample_sphere(3, rng);
    double sq = 0.0;
    for (int c = 0; c < 3; ++c) {
      sq += xi.direction[c] * xi.direction[c];
      mean[c] += xi.direction[c];
    }
    ASSERT_NEAR(std::sqrt(sq), 1.0, 1e-12);
  }
  for (double m : mean) EXPECT_LT(std::abs(m / kDraws), 0.02);
}

TEST(SlicingConstant, LowDimensions) {
  EXPECT_NEAR(slicing_constant(1), 1.0, 1e-12);
  EXPECT_NEAR(slicing_constant(2) / (std::numbers::pi / 2.0), 1.0, 1e-12);
  EXPECT_NEAR(slicing_constant(3) / 2.0, 1.0, 1e-12);
  EXPECT_THROW(slicing_constant(0), DimensionError);
}

TEST(SlicingConstant, LogGammaBranchIsContinuousAndFinite) {
  // Both branches meet at d = 100 / 101 and grow like sqrt(pi d / 2).
  const double c100 = slicing_constant(100);
  const double c101 = slicing_constant(101);
  EXPECT_GT(c101, c100);
  EXPECT_NEAR(c101 / std::sqrt(std::numbers::pi * 101 / 2.0), 1.0, 1e-2);
  for (std::size_t d : {1000u, 10000u}) {
    const double c = slicing_constant(d);
    EXPECT_TRUE(std::isfinite(c));
    EXPECT_GT(c, 0.0);
  }
}

TEST(Grad1dSorted, HandExamples) {
  const double x1[] = {0.0, 1.0}, p1[] = {0.5};
  const auto g1 = grad_1d_sorted(x1, p1);
  EXPECT_DOUBLE_EQ(g1[0], -0.25);
  EXPECT_DOUBLE_EQ(g1[1], 0.25);

  const double x2[] = {0.0, 0.0};
  const auto g2 = grad_1d_sorted(x2, p1);
  EXPECT_DOUBLE_EQ(g2[0], -0.5);
  EXPECT_DOUBLE_EQ(g2[1], -0.5);

  const double p3[] = {3.0, -1.0, 2.0, 0.5};
  std::vector<double> x3(std::begin(p3), std::end(p3));
  std::sort(x3.begin(), x3.end());
  for (double v : grad_1d_sorted(x3, p3)) EXPECT_EQ(v, 0.0);
}

TEST(Grad1dSorted, RejectsNonFinite) {
  const double x[] = {0.0, std::nan("")}, p[] = {1.0};
  EXPECT_THROW(grad_1d_sorted(x, p), Error);
}

TEST(Grad1dSorted, MatchesBruteForceIncludingTies) {
  Rng rng(3);
  std::uniform_int_distribution<int> size(1, 300), grid(-20, 20);
  std::normal_distribution<double> normal;
  for (int t = 0; t < 100; ++t) {
    const std::size_t n = static_cast<std::size_t>(size(rng));
    const std::size_t m = static_cast<std::size_t>(size(rng));
    std::vector<double> x(n), p(m);
    // Every other instance lives on a coarse grid so ties within x and
    // between x and p are frequent.
    const bool ties = t % 2 == 0;
    for (auto& v : x) v = ties ? 0.5 * grid(rng) : normal(rng);
    for (auto& v : p) v = ties ? 0.5 * grid(rng) : normal(rng);
    const auto fast = grad_1d_sorted(x, p);
    const auto brute = grad_full(Points::column(x), Points::column(p));
    for (std::size_t i = 0; i < n; ++i) ASSERT_NEAR(fast[i], brute(i, 0), 1e-10);
  }
}

// Counts below and above by binary search on separately sorted copies.
std::vector<double> rank_gradient(const std::vector<double>& x, const std::vector<double>& p) {
  std::vector<double> xs = x, ps = p;
  std::sort(xs.begin(), xs.end());
  std::sort(ps.begin(), ps.end());
  const double n = static_cast<double>(x.size()), m = static_cast<double>(p.size());
  std::vector<double> g(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double xb = static_cast<double>(std::lower_bound(xs.begin(), xs.end(), x[i]) - xs.begin());
    const double xa = static_cast<double>(xs.end() - std::upper_bound(xs.begin(), xs.end(), x[i]));
    const double pb = static_cast<double>(std::lower_bound(ps.begin(), ps.end(), x[i]) - ps.begin());
    const double pa = static_cast<double>(ps.end() - std::upper_bound(ps.begin(), ps.end(), x[i]));
    g[i] = -(xb - xa) / (n * n) + (pb - pa) / (n * m);
  }
  return g;
}

TEST(Grad1dSorted, LargeInputsMatchRankCounts) {
  Rng rng(30);
  std::normal_distribution<double> normal;
  std::uniform_int_distribution<int> grid(-500, 500);
  for (int t = 0; t < 3; ++t) {
    std::vector<double> x(60000 + 7000 * static_cast<std::size_t>(t)), p(50000);
    for (auto& v : x) v = t == 0 ? normal(rng) : t == 1 ? 0.01 * grid(rng) : 1.0 + 1e-9 * normal(rng);
    for (auto& v : p) v = t == 0 ? normal(rng) : t == 1 ? 0.01 * grid(rng) : 1.0 + 1e-9 * normal(rng);
    x[0] = -0.0;
    p[0] = 0.0;
    const auto fast = grad_1d_sorted(x, p);
    const auto oracle = rank_gradient(x, p);
    for (std::size_t i = 0; i < x.size(); ++i) ASSERT_NEAR(fast[i], oracle[i], 1e-12) << "instance " << t;
  }
}

TEST(SlicedGrad, ExactInOneDimension) {
  Rng rng(4);
  for (int t = 0; t < 20; ++t) {
    const auto x = random_points(15, 1, rng);
    const auto p = random_points(11, 1, rng);
    const auto sliced = sliced_grad(x, p, 1, rng);
    const auto full = grad_full(x, p);
    for (std::size_t i = 0; i < x.size(); ++i) ASSERT_NEAR(sliced(i, 0), full(i, 0), 1e-10);
  }
}

TEST(SlicedGrad, ApproximatesFullGradientInTwoDimensions) {
  Rng rng(5);
  const auto x = random_points(16, 2, rng);
  const auto p = random_points(16, 2, rng);
  const auto sliced = sliced_grad(x, p, 200000, rng);
  EXPECT_LT(relative_l2(sliced, grad_full(x, p)), 0.02);
}

TEST(SlicedGrad, StationaryAtTargets) {
  Rng rng(6);
  const auto p = random_points(10, 3, rng);
  const auto g = sliced_grad(p, p, 50, rng);
  for (double v : g.values()) EXPECT_EQ(v, 0.0);
}

TEST(SlicedGrad, Errors) {
  Rng rng(7);
  const auto x = random_points(4, 2, rng);
  EXPECT_THROW(sliced_grad(x, x, 0, rng), Error);
  EXPECT_THROW(sliced_grad(x, random_points(4, 3, rng), 10, rng), DimensionError);
}

TEST(SlicedGrad, ErrorShrinksLikeInverseSquareRoot) {
  Rng data_rng(8);
  const auto x = random_points(12, 3, data_rng);
  const auto p = random_points(12, 3, data_rng);
  const auto full = grad_full(x, p);
  auto mean_error = [&](std::size_t projections) {
    Rng rng(99);
    double total = 0.0;
    for (int r = 0; r < 50; ++r) total += relative_l2(sliced_grad(x, p, projections, rng), full);
    return total / 50.0;
  };
  const double coarse = mean_error(1000);
  const double fine = mean_error(4000);
  EXPECT_GT(coarse / fine, 2.0 / 1.5);
  EXPECT_LT(coarse / fine, 2.0 * 1.5);

  // Grand mean of 50 independent estimates is closer than a single one.
  Rng rng(100);
  Points grand(x.size(), x.dim());
  for (int r = 0; r < 50; ++r) {
    const auto est = sliced_grad(x, p, 1000, rng);
    for (std::size_t k = 0; k < grand.values().size(); ++k) grand.values()[k] += est.values()[k] / 50.0;
  }
  EXPECT_LT(relative_l2(grand, full), coarse);
}

TEST(SlicedGrad, DeterministicAcrossThreadCounts) {
  Rng data_rng(9);
  const auto x = random_points(50, 3, data_rng);
  const auto p = random_points(40, 3, data_rng);
  Rng a(42), b(42), c(42);
  const auto g1 = sliced_grad(x, p, 300, a, 1);
  const auto g2 = sliced_grad(x, p, 300, b, 1);
  const auto g3 = sliced_grad(x, p, 300, c, 4);
  EXPECT_TRUE(bitwise_equal(g1, g2));
  EXPECT_TRUE(bitwise_equal(g1, g3));
}

TEST(SlicedGradConditional, NoConditionsMatchesUnconditional) {
  Rng data_rng(10);
  const auto x = random_points(20, 2, data_rng);
  const auto p = random_points(25, 2, data_rng);
  Rng a(5), b(5);
  const auto plain = sliced_grad(x, p, 100, a);
  const auto cond = sliced_grad_conditional(x, Points(20, 0), p, Points(25, 0), 100, b);
  EXPECT_TRUE(bitwise_equal(plain, cond));
}

TEST(SlicedGradConditional, StationaryAtMatchedPairs) {
  Rng rng(11);
  const auto p = random_points(10, 2, rng);
  const auto q = random_points(10, 1, rng);
  const auto g = sliced_grad_conditional(p, q, p, q, 64, rng);
  for (double v : g.values()) EXPECT_EQ(v, 0.0);
}

TEST(SlicedGradConditional, MatchesJointSpaceBruteForce) {
  Rng rng(12);
  const auto u = random_points(8, 1, rng);
  const auto q = random_points(8, 1, rng);
  const auto p = random_points(8, 1, rng);
  const auto qt = random_points(8, 1, rng);
  const auto joint = grad_full(concat_columns(u, q), concat_columns(p, qt));
  const auto oracle = take_columns(joint, 0, 1);
  const auto est = sliced_grad_conditional(u, q, p, qt, 200000, rng);
  EXPECT_EQ(est.dim(), 1u);
  EXPECT_LT(relative_l2(est, oracle), 0.02);
}

TEST(SlicedGradConditional, RejectsMismatchedConditions) {
  Rng rng(13);
  const auto u = random_points(4, 1, rng);
  EXPECT_THROW(sliced_grad_conditional(u, random_points(4, 2, rng), u, random_points(4, 1, rng), 4, rng),
               DimensionError);
  EXPECT_THROW(sliced_grad_conditional(u, random_points(3, 1, rng), u, random_points(4, 1, rng), 4, rng),
               DimensionError);
}

double loglog_slope(const std::vector<double>& n, const std::vector<double>& t) {
  double mx = 0, my = 0;
  for (std::size_t i = 0; i < n.size(); ++i) {
    mx += std::log(n[i]);
    my += std::log(t[i]);
  }
  mx /= static_cast<double>(n.size());
  my /= static_cast<double>(n.size());
  double sxy = 0, sxx = 0;
  for (std::size_t i = 0; i < n.size(); ++i) {
    sxy += (std::log(n[i]) - mx) * (std::log(t[i]) - my);
    sxx += (std::log(n[i]) - mx) * (std::log(n[i]) - mx);
  }
  return sxy / sxx;
}

TEST(Grad1dSorted, NearLinearScaling) {
  Rng rng(14);
  std::normal_distribution<double> normal;
  std::vector<double> sizes, times;
  for (std::size_t n : {1000u, 10000u, 100000u, 1000000u}) {
    std::vector<double> x(n), p(n);
    for (auto& v : x) v = normal(rng);
    for (auto& v : p) v = normal(rng);
    const int reps = n >= 1000000 ? 3 : 9;
    std::vector<double> samples;
    for (int r = 0; r < reps; ++r) {
      const auto t0 = std::chrono::steady_clock::now();
      const auto g = grad_1d_sorted(x, p);
      const auto t1 = std::chrono::steady_clock::now();
      ASSERT_EQ(g.size(), n);
      samples.push_back(std::chrono::duration<double>(t1 - t0).count());
    }
    std::nth_element(samples.begin(), samples.begin() + reps / 2, samples.end());
    sizes.push_back(static_cast<double>(n));
    times.push_back(samples[reps / 2]);
  }
  EXPECT_LE(loglog_slope(sizes, times), 1.2);
}

}  // namespace
}  // namespace mmdflow
