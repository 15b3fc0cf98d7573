#pragma once

#include <random>

#include "mmdflow/points.hpp"
#include "mmdflow/random.hpp"

namespace mmdflow::testing {

inline Points random_points(std::size_t n, std::size_t d, Rng& rng, double scale = 1.0) {
  std::normal_distribution<double> normal;
  Points p(n, d);
  for (auto& v : p.values()) v = scale * normal(rng);
  return p;
}

inline double l2_norm(const Points& p) {
  double s = 0.0;
  for (double v : p.values()) s += v * v;
  return std::sqrt(s);
}

inline double relative_l2(const Points& estimate, const Points& reference) {
  double num = 0.0, den = 0.0;
  for (std::size_t t = 0; t < reference.values().size(); ++t) {
    const double e = estimate.values()[t] - reference.values()[t];
    num += e * e;
    den += reference.values()[t] * reference.values()[t];
  }
  return std::sqrt(num / den);
}

}  // namespace mmdflow::testing
