#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <ostream>
#include <random>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "mmdflow/flow.hpp"
#include "mmdflow/kernel.hpp"
#include "mmdflow/points.hpp"
#include "mmdflow/problems.hpp"
#include "mmdflow/random.hpp"

namespace mmdflow {

struct MetricReport {
  std::string name;
  double value = 0.0;
  double tolerance = 0.0;
  bool pass = false;
  nlohmann::json context = nlohmann::json::object();
};

inline nlohmann::json to_json(const MetricReport& r) {
  return {{"name", r.name}, {"value", r.value}, {"tolerance", r.tolerance}, {"pass", r.pass},
          {"context", r.context}};
}

/// One compact JSON object per line.
inline void write_jsonl(std::ostream& os, std::span<const MetricReport> reports) {
  for (const auto& r : reports) os << to_json(r).dump() << '\n';
}

/// W_1 between two equal-size one-dimensional empirical measures via the
/// sorted (quantile) coupling.
inline double w1_sorted(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw DimensionError("w1_sorted: sample sizes differ");
  if (a.empty()) throw DimensionError("w1_sorted: empty sample");
  std::vector<double> sa(a.begin(), a.end()), sb(b.begin(), b.end());
  std::sort(sa.begin(), sa.end());
  std::sort(sb.begin(), sb.end());
  double s = 0.0;
  for (std::size_t i = 0; i < sa.size(); ++i) s += std::abs(sa[i] - sb[i]);
  return s / static_cast<double>(sa.size());
}

/// Sweeps random one-dimensional pairs and checks mmd_sq <= W_1 + 1e-9.
/// The reported value is the largest observed mmd_sq - W_1.
inline MetricReport check_mmd_w1_bound(std::size_t trials, std::size_t count, std::uint64_t seed) {
  constexpr double kTolerance = 1e-9;
  Rng rng = make_rng(seed, "mmd-w1-bound");
  std::normal_distribution<double> normal;
  std::uniform_real_distribution<double> shift(-3.0, 3.0), scale(0.1, 3.0);
  double worst = -std::numeric_limits<double>::infinity();
  std::size_t violations = 0;
  std::vector<double> a(count), b(count);
  for (std::size_t t = 0; t < trials; ++t) {
    const double ma = shift(rng), sa = scale(rng), mb = shift(rng), sb = scale(rng);
    for (auto& v : a) v = ma + sa * normal(rng);
    for (auto& v : b) v = mb + sb * normal(rng);
    const double gap = mmd_sq(Points::column(a), Points::column(b)) - w1_sorted(a, b);
    worst = std::max(worst, gap);
    if (gap > kTolerance) ++violations;
  }
  return {"mmd_sq_le_w1", worst, kTolerance, violations == 0,
          {{"trials", trials}, {"size", count}, {"violations", violations}, {"seed", seed}}};
}

/// Samples generated for one condition value.
struct ConditionSamples {
  std::vector<double> condition;
  Points samples;
};

/// Compares per-condition sample moments with the oracle: the mean error in
/// units of the oracle std and |empirical std / oracle std - 1|, per
/// coordinate. Value is the largest mean error; pass requires both maxima
/// within their tolerances.
inline MetricReport posterior_error(std::span<const ConditionSamples> groups,
                                    const PosteriorOracle& oracle, double mean_tolerance,
                                    double std_tolerance) {
  constexpr std::size_t kMinSamples = 100;
  if (groups.empty()) throw Error("posterior_error: no conditions to evaluate");
  nlohmann::json details = nlohmann::json::array();
  double max_mean = 0.0, max_std = 0.0, sum_mean = 0.0, sum_std = 0.0;
  std::size_t entries = 0;
  for (const auto& g : groups) {
    const std::size_t n = g.samples.size();
    if (n < kMinSamples) {
      throw Error("posterior_error: " + std::to_string(n) + " samples for a condition, need at least " +
                  std::to_string(kMinSamples));
    }
    const Posterior post = oracle.at(g.condition);
    if (g.samples.dim() != post.dim()) throw DimensionError("posterior_error: sample dimension mismatch");
    const auto mu = post.mean();
    const auto sd = post.stddev();
    std::vector<double> mean_err, std_err;
    for (std::size_t c = 0; c < g.samples.dim(); ++c) {
      double m = 0.0;
      for (std::size_t i = 0; i < n; ++i) m += g.samples(i, c);
      m /= static_cast<double>(n);
      double v = 0.0;
      for (std::size_t i = 0; i < n; ++i) v += (g.samples(i, c) - m) * (g.samples(i, c) - m);
      const double s = std::sqrt(v / static_cast<double>(n - 1));
      mean_err.push_back(std::abs(m - mu[c]) / sd[c]);
      std_err.push_back(std::abs(s / sd[c] - 1.0));
      max_mean = std::max(max_mean, mean_err.back());
      max_std = std::max(max_std, std_err.back());
      sum_mean += mean_err.back();
      sum_std += std_err.back();
      ++entries;
    }
    details.push_back({{"condition", g.condition}, {"samples", n}, {"oracle_mean", mu},
                       {"oracle_std", sd}, {"mean_error", mean_err}, {"std_ratio_error", std_err}});
  }
  const double denom = static_cast<double>(entries);
  return {"posterior_error",
          max_mean,
          mean_tolerance,
          max_mean <= mean_tolerance && max_std <= std_tolerance,
          {{"max_mean_error", max_mean},
           {"mean_mean_error", sum_mean / denom},
           {"max_std_ratio_error", max_std},
           {"mean_std_ratio_error", sum_std / denom},
           {"std_tolerance", std_tolerance},
           {"conditions", details}}};
}

namespace detail {

inline std::vector<double> average_ranks(std::span<const double> v) {
  std::vector<std::size_t> idx(v.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
  std::vector<double> ranks(v.size());
  for (std::size_t i = 0; i < idx.size();) {
    std::size_t j = i + 1;
    while (j < idx.size() && v[idx[j]] == v[idx[i]]) ++j;
    const double r = 0.5 * static_cast<double>(i + j - 1) + 1.0;
    for (std::size_t k = i; k < j; ++k) ranks[idx[k]] = r;
    i = j;
  }
  return ranks;
}

}  // namespace detail

/// Spearman rank correlation with average ranks for ties; NaN when either
/// series is constant.
inline double rank_correlation(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size() || a.size() < 2) {
    throw DimensionError("rank_correlation: need two equal-length series of length >= 2");
  }
  const auto ra = detail::average_ranks(a);
  const auto rb = detail::average_ranks(b);
  const double n = static_cast<double>(a.size());
  const double ma = std::accumulate(ra.begin(), ra.end(), 0.0) / n;
  const double mb = std::accumulate(rb.begin(), rb.end(), 0.0) / n;
  double sab = 0.0, saa = 0.0, sbb = 0.0;
  for (std::size_t i = 0; i < ra.size(); ++i) {
    sab += (ra[i] - ma) * (rb[i] - mb);
    saa += (ra[i] - ma) * (ra[i] - ma);
    sbb += (rb[i] - mb) * (rb[i] - mb);
  }
  if (saa == 0.0 || sbb == 0.0) return std::numeric_limits<double>::quiet_NaN();
  return sab / std::sqrt(saa * sbb);
}

/// Along a conditional flow on a discrete-y problem, compares the joint
/// mmd_sq with the P_Y-weighted average of per-atom posterior mmd_sq at each
/// snapshot. Value is their rank correlation; pass when it exceeds `threshold`.
inline MetricReport joint_vs_posterior_trend(const FlowTrajectory& traj,
                                             const Points& particle_conditions,
                                             const TargetSample& targets,
                                             const PosteriorOracle& oracle,
                                             double threshold = 0.9) {
  if (oracle.kind() != OracleKind::discrete) {
    throw Error("joint_vs_posterior_trend: requires a discrete-y problem");
  }
  if (traj.snapshots.size() < 2) throw Error("joint_vs_posterior_trend: need at least two snapshots");
  const Points& atoms = oracle.atoms();
  std::vector<std::vector<std::size_t>> particle_rows(atoms.size()), target_rows(atoms.size());
  for (std::size_t i = 0; i < particle_conditions.size(); ++i) {
    const auto j = oracle.atom_index(particle_conditions.row(i));
    if (j < 0) throw Error("joint_vs_posterior_trend: particle condition is not an atom");
    particle_rows[static_cast<std::size_t>(j)].push_back(i);
  }
  for (std::size_t i = 0; i < targets.conditions.size(); ++i) {
    const auto j = oracle.atom_index(targets.conditions.row(i));
    if (j < 0) throw Error("joint_vs_posterior_trend: target condition is not an atom");
    target_rows[static_cast<std::size_t>(j)].push_back(i);
  }
  std::vector<Points> target_groups;
  for (const auto& rows : target_rows) target_groups.push_back(take_rows(targets.positions, rows));
  const Points joint_targets = concat_columns(targets.positions, targets.conditions);
  const double total_targets = static_cast<double>(targets.positions.size());

  std::vector<double> joint, posterior, steps;
  for (const auto& snap : traj.snapshots) {
    joint.push_back(mmd_sq(concat_columns(snap.positions, particle_conditions), joint_targets));
    double avg = 0.0;
    for (std::size_t j = 0; j < atoms.size(); ++j) {
      if (particle_rows[j].empty() || target_rows[j].empty()) continue;
      const double weight = static_cast<double>(target_rows[j].size()) / total_targets;
      avg += weight * mmd_sq(take_rows(snap.positions, particle_rows[j]), target_groups[j]);
    }
    posterior.push_back(avg);
    steps.push_back(static_cast<double>(snap.step));
  }
  const double rho = rank_correlation(joint, posterior);
  return {"joint_vs_posterior_trend", rho, threshold, std::isfinite(rho) && rho > threshold,
          {{"steps", steps}, {"joint_mmd_sq", joint}, {"posterior_mmd_sq", posterior}}};
}

}  // namespace mmdflow
