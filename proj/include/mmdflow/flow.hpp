#pragma once

// Explicit time stepping of the particle flow u' = -N grad_x F((u, q) | (p, q)).
// Conditions q are carried along untouched; only the position block moves.

#include <cmath>
#include <cstdint>
#include <functional>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "mmdflow/csv.hpp"
#include "mmdflow/kernel.hpp"
#include "mmdflow/points.hpp"
#include "mmdflow/random.hpp"
#include "mmdflow/sliced.hpp"

namespace mmdflow {

/// Particle positions (N x d) with their frozen conditions (N x n, n may be 0).
struct ParticleEnsemble {
  Points positions;
  Points conditions;
  std::size_t step_index = 0;
};

/// Empirical joint target: M positions paired with M conditions.
struct TargetSample {
  Points positions;
  Points conditions;
};

struct StageSchedule {
  double tau = 0.0;
  double momentum = 0.0;
  std::size_t steps = 0;
  std::size_t projections = 1;
  std::uint64_t seed = 0;

  friend bool operator==(const StageSchedule&, const StageSchedule&) = default;
};

enum class GradientMethod { sliced, exact };

struct FlowOptions {
  std::size_t record_every = 100;
  GradientMethod gradient = GradientMethod::sliced;
  unsigned threads = 1;
  /// Evaluate the exact joint mmd_sq at every snapshot (O(N^2) each).
  bool track_mmd = true;
};

struct Snapshot {
  std::size_t step = 0;
  Points positions;
  std::optional<double> mmd_sq;
};

struct FlowTrajectory {
  std::vector<Snapshot> snapshots;
  std::size_t record_every = 100;
  ParticleEnsemble final_state;
  double initial_mmd_sq = 0.0;
  double final_mmd_sq = 0.0;
};

/// Coordinates beyond this magnitude are treated as a diverged flow.
inline constexpr double kDivergenceBound = 1e8;

/// Default step size 0.1 * diameter / N. The update multiplies by N, so the
/// effective step tau * N scales with the data diameter only.
inline double default_step_size(std::size_t particles, double diameter) {
  const double diam = diameter > 0.0 ? diameter : 1.0;
  return 0.1 * diam / static_cast<double>(particles);
}

inline void validate_schedule(const StageSchedule& s) {
  if (!(s.tau > 0.0) || !std::isfinite(s.tau)) throw Error("stage schedule: tau must be positive");
  if (!(s.momentum >= 0.0 && s.momentum < 1.0)) {
    throw Error("stage schedule: momentum must lie in [0, 1)");
  }
  if (s.projections == 0) throw Error("stage schedule: projections must be positive");
}

inline void validate_pairing(const ParticleEnsemble& ens, const TargetSample& targets) {
  if (ens.positions.size() != ens.conditions.size()) {
    throw DimensionError("flow: one condition per particle required");
  }
  if (targets.positions.size() != targets.conditions.size()) {
    throw DimensionError("flow: one condition per target required");
  }
  if (ens.positions.dim() != targets.positions.dim() ||
      ens.conditions.dim() != targets.conditions.dim()) {
    throw DimensionError("flow: particle and target dimensions differ");
  }
}

/// Gradient of the joint functional with respect to the position block.
/// Sliced mode draws fresh projections from `rng` on every call.
class ConditionalGradient {
 public:
  ConditionalGradient(GradientMethod method, std::size_t projections, Rng& rng, unsigned threads)
      : method_(method), projections_(projections), rng_(&rng), threads_(threads) {}

  Points operator()(const Points& u, const Points& q, const TargetSample& targets) const {
    if (method_ == GradientMethod::sliced) {
      return sliced_grad_conditional(u, q, targets.positions, targets.conditions, projections_,
                                     *rng_, threads_);
    }
    if (q.dim() == 0) return grad_full(u, targets.positions, threads_);
    const Points joint =
        grad_full(concat_columns(u, q), concat_columns(targets.positions, targets.conditions),
                  threads_);
    return take_columns(joint, 0, u.dim());
  }

 private:
  GradientMethod method_;
  std::size_t projections_;
  Rng* rng_;
  unsigned threads_;
};

namespace detail {

inline void check_divergence(const Points& positions, std::size_t step) {
  for (double v : positions.values()) {
    if (!std::isfinite(v)) throw DivergenceError("flow produced a non-finite coordinate", step);
    if (std::abs(v) > kDivergenceBound) {
      throw DivergenceError("flow coordinate exceeded divergence bound", step);
    }
  }
}

inline void check_gradient(const Points& grad, std::size_t step) {
  for (double v : grad.values()) {
    if (!std::isfinite(v)) throw DivergenceError("non-finite gradient", step);
  }
}

inline double joint_mmd_sq(const Points& u, const Points& q, const TargetSample& targets) {
  if (q.dim() == 0) return mmd_sq(u, targets.positions);
  return mmd_sq(concat_columns(u, q), concat_columns(targets.positions, targets.conditions));
}

}  // namespace detail

/// One explicit Euler step u <- u - tau N grad. Conditions are left untouched.
template <typename GradFn>
void euler_step(ParticleEnsemble& ens, const TargetSample& targets, double tau, GradFn&& grad_fn) {
  const Points grad = grad_fn(ens.positions, ens.conditions, targets);
  detail::check_gradient(grad, ens.step_index + 1);
  const double scale = tau * static_cast<double>(ens.positions.size());
  auto pos = ens.positions.values();
  const auto g = grad.values();
  for (std::size_t t = 0; t < pos.size(); ++t) pos[t] -= scale * g[t];
  ++ens.step_index;
  detail::check_divergence(ens.positions, ens.step_index);
}

/// Momentum step: v <- grad + m v, then u <- u - tau N v.
template <typename GradFn>
void momentum_step(ParticleEnsemble& ens, Points& velocity, const TargetSample& targets,
                   const StageSchedule& schedule, GradFn&& grad_fn) {
  if (velocity.size() != ens.positions.size() || velocity.dim() != ens.positions.dim()) {
    throw DimensionError("momentum_step: velocity shape differs from positions");
  }
  const Points grad = grad_fn(ens.positions, ens.conditions, targets);
  detail::check_gradient(grad, ens.step_index + 1);
  const double scale = schedule.tau * static_cast<double>(ens.positions.size());
  auto v = velocity.values();
  auto pos = ens.positions.values();
  const auto g = grad.values();
  for (std::size_t t = 0; t < pos.size(); ++t) {
    v[t] = g[t] + schedule.momentum * v[t];
    pos[t] -= scale * v[t];
  }
  ++ens.step_index;
  detail::check_divergence(ens.positions, ens.step_index);
}

namespace detail {

inline void record(FlowTrajectory& traj, const ParticleEnsemble& ens, const TargetSample& targets,
                   const FlowOptions& options) {
  Snapshot snap{ens.step_index, ens.positions, std::nullopt};
  if (options.track_mmd) snap.mmd_sq = joint_mmd_sq(ens.positions, ens.conditions, targets);
  traj.snapshots.push_back(std::move(snap));
}

inline void run_stage(FlowTrajectory& traj, ParticleEnsemble& ens, const TargetSample& targets,
                      const StageSchedule& schedule, const FlowOptions& options) {
  validate_schedule(schedule);
  Rng rng(schedule.seed);
  ConditionalGradient grad(options.gradient, schedule.projections, rng, options.threads);
  Points velocity(ens.positions.size(), ens.positions.dim());
  const std::size_t every = std::max<std::size_t>(1, options.record_every);
  for (std::size_t t = 0; t < schedule.steps; ++t) {
    momentum_step(ens, velocity, targets, schedule, grad);
    if (ens.step_index % every == 0) record(traj, ens, targets, options);
  }
}

inline FlowTrajectory finish(FlowTrajectory traj, ParticleEnsemble ens, const TargetSample& targets,
                             const FlowOptions& options) {
  if (traj.snapshots.back().step != ens.step_index) record(traj, ens, targets, options);
  traj.final_mmd_sq = traj.snapshots.back().mmd_sq
                          ? *traj.snapshots.back().mmd_sq
                          : joint_mmd_sq(ens.positions, ens.conditions, targets);
  traj.final_state = std::move(ens);
  return traj;
}

inline FlowTrajectory start(const ParticleEnsemble& init, const TargetSample& targets,
                            const FlowOptions& options) {
  validate_pairing(init, targets);
  if (!all_finite(init.positions) || !all_finite(init.conditions)) {
    throw Error("flow: initial ensemble contains non-finite values");
  }
  FlowTrajectory traj;
  traj.record_every = options.record_every;
  record(traj, init, targets, options);
  traj.initial_mmd_sq = traj.snapshots.front().mmd_sq
                            ? *traj.snapshots.front().mmd_sq
                            : joint_mmd_sq(init.positions, init.conditions, targets);
  return traj;
}

}  // namespace detail

/// Runs consecutive stages; the velocity buffer restarts from zero at each stage.
inline FlowTrajectory run_stages(const ParticleEnsemble& init, const TargetSample& targets,
                                 std::span<const StageSchedule> stages,
                                 const FlowOptions& options = {}) {
  FlowTrajectory traj = detail::start(init, targets, options);
  ParticleEnsemble ens = init;
  for (const auto& stage : stages) detail::run_stage(traj, ens, targets, stage, options);
  return detail::finish(std::move(traj), std::move(ens), targets, options);
}

/// Conditional flow with frozen conditions for `schedule.steps` momentum steps.
inline FlowTrajectory run_conditional_flow(const ParticleEnsemble& init,
                                           const TargetSample& targets,
                                           const StageSchedule& schedule,
                                           const FlowOptions& options = {}) {
  return run_stages(init, targets, std::span<const StageSchedule>(&schedule, 1), options);
}

/// Plain particle flow toward the target positions (no conditions).
inline FlowTrajectory run_unconditional_flow(const Points& init, const Points& targets,
                                             const StageSchedule& schedule,
                                             const FlowOptions& options = {}) {
  ParticleEnsemble ens{init, Points(init.size(), 0), 0};
  TargetSample tgt{targets, Points(targets.size(), 0)};
  return run_conditional_flow(ens, tgt, schedule, options);
}

enum class DriftMode {
  /// Conditions held fixed; the y-velocity is identically zero.
  frozen,
  /// Both blocks follow the full joint gradient.
  free,
};

struct DriftSample {
  std::size_t step = 0;
  double ratio = 0.0;
};

/// Runs a momentum flow on joint points and records mean |v_y| / mean |v_x|
/// of the velocity buffer every `record_every` steps.
inline std::vector<DriftSample> measure_y_drift(const ParticleEnsemble& init,
                                                const TargetSample& targets,
                                                const StageSchedule& schedule, DriftMode mode,
                                                const FlowOptions& options = {}) {
  validate_pairing(init, targets);
  validate_schedule(schedule);
  const std::size_t n = init.positions.size();
  const std::size_t d = init.positions.dim();
  const std::size_t nc = init.conditions.dim();
  const std::size_t every = std::max<std::size_t>(1, options.record_every);
  Rng rng(schedule.seed);
  std::vector<DriftSample> out;

  if (mode == DriftMode::frozen) {
    ParticleEnsemble ens = init;
    Points velocity(n, d);
    ConditionalGradient grad(options.gradient, schedule.projections, rng, options.threads);
    for (std::size_t t = 0; t < schedule.steps; ++t) {
      momentum_step(ens, velocity, targets, schedule, grad);
      if (ens.step_index % every == 0) out.push_back({ens.step_index, 0.0});
    }
    return out;
  }

  // Free mode: flow on the concatenated points; nothing is held fixed.
  ParticleEnsemble joint{concat_columns(init.positions, init.conditions), Points(n, 0),
                         init.step_index};
  const TargetSample joint_targets{concat_columns(targets.positions, targets.conditions),
                                   Points(targets.positions.size(), 0)};
  Points velocity(n, d + nc);
  ConditionalGradient grad(options.gradient, schedule.projections, rng, options.threads);
  for (std::size_t t = 0; t < schedule.steps; ++t) {
    momentum_step(joint, velocity, joint_targets, schedule, grad);
    if (joint.step_index % every != 0) continue;
    double vx = 0.0, vy = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      const auto v = velocity.row(i);
      for (std::size_t c = 0; c < d; ++c) vx += std::abs(v[c]);
      for (std::size_t c = d; c < d + nc; ++c) vy += std::abs(v[c]);
    }
    vx /= static_cast<double>(n * d);
    vy = nc == 0 ? 0.0 : vy / static_cast<double>(n * nc);
    out.push_back({joint.step_index, vx > 0.0 ? vy / vx : 0.0});
  }
  return out;
}

/// CSV with columns step,particle_id,coordinate_index,value.
inline void write_trajectory_csv(std::ostream& os, const FlowTrajectory& traj) {
  os << "step,particle_id,coordinate_index,value\n";
  for (const auto& snap : traj.snapshots) {
    for (std::size_t i = 0; i < snap.positions.size(); ++i) {
      for (std::size_t c = 0; c < snap.positions.dim(); ++c) {
        os << snap.step << ',' << i << ',' << c << ',' << csv::format_double(snap.positions(i, c))
           << '\n';
      }
    }
  }
}

}  // namespace mmdflow
