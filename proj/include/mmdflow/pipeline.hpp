#pragma once

// File-level commands behind the command-line driver. Every command writes
// into a run directory and derives all randomness from the run seed.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "mmdflow/config.hpp"
#include "mmdflow/csv.hpp"
#include "mmdflow/flow.hpp"
#include "mmdflow/kernel.hpp"
#include "mmdflow/metrics.hpp"
#include "mmdflow/problems.hpp"
#include "mmdflow/sliced.hpp"
#include "mmdflow/surrogate.hpp"

namespace mmdflow {

namespace fs = std::filesystem;

class EvaluationFailure : public Error {
 public:
  using Error::Error;
};

namespace detail {

inline std::ofstream open_output(const fs::path& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw Error("cannot open " + path.string() + " for writing");
  return os;
}

inline void write_json(const fs::path& path, const nlohmann::json& doc) {
  auto os = open_output(path);
  os << doc.dump(2) << '\n';
}

inline nlohmann::json read_json(const fs::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw Error("cannot open " + path.string());
  try {
    return nlohmann::json::parse(is);
  } catch (const nlohmann::json::parse_error& e) {
    throw Error(path.string() + ": invalid JSON: " + e.what());
  }
}

inline csv::Table read_csv(const fs::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw Error("cannot open " + path.string());
  return csv::read_table(is, path.string());
}

/// Dataset, oracle and initial particles shared by simulate, distill and y-drift.
struct Setup {
  ToyProblem problem;
  TargetSample targets;
  ParticleEnsemble initial;
  std::vector<StageSchedule> stages;
  FlowOptions options;
};

inline Setup prepare(const RunConfig& cfg, const fs::path& dir) {
  ToyProblem problem = make_problem(cfg.problem, derive_seed(cfg.seed, "dataset"));
  TargetSample targets{problem.data.x, problem.data.y};
  const std::size_t n = targets.positions.size();
  Points latents = latent_sampler(cfg.latent, targets.positions.dim(), n, derive_seed(cfg.seed, "particles"));
  ParticleEnsemble initial{std::move(latents), targets.conditions, 0};
  const double diameter = bounding_diameter(concat_columns(targets.positions, targets.conditions));
  auto stages = resolve_stages(cfg.flow, cfg.seed, n, diameter);
  FlowOptions options;
  options.record_every = cfg.flow.record_every;
  options.gradient = cfg.flow.gradient;
  options.threads = cfg.threads;

  fs::create_directories(dir);
  write_json(dir / "config.json", serialize_config(cfg));
  {
    auto os = open_output(dir / "dataset.csv");
    write_dataset_csv(os, problem.data);
  }
  write_json(dir / "provenance.json", to_json(problem.data.provenance));
  write_json(dir / "oracle.json", problem.oracle.to_json());
  return {std::move(problem), std::move(targets), std::move(initial), std::move(stages), options};
}

inline nlohmann::json stages_json(const std::vector<StageSchedule>& stages) {
  nlohmann::json out = nlohmann::json::array();
  for (const auto& s : stages) {
    out.push_back({{"tau", s.tau}, {"momentum", s.momentum}, {"steps", s.steps},
                   {"projections", s.projections}, {"seed", s.seed}});
  }
  return out;
}

inline double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t m = v.size() / 2;
  return v.size() % 2 == 1 ? v[m] : 0.5 * (v[m - 1] + v[m]);
}

}  // namespace detail

/// out_dir/run_<name>
inline fs::path run_directory(const RunConfig& cfg) { return fs::path(cfg.output_dir) / ("run_" + cfg.name); }

struct SimulateSummary {
  double initial_mmd_sq = 0.0;
  double final_mmd_sq = 0.0;
  double ratio = 0.0;
  std::size_t steps = 0;
  std::size_t snapshots = 0;
};

/// Runs the conditional flow from latent particles. Writes trajectory.csv,
/// mmd_series.csv and summary.json next to the dataset and oracle.
inline SimulateSummary cmd_simulate(const RunConfig& cfg, const fs::path& dir) {
  auto setup = detail::prepare(cfg, dir);
  setup.options.track_mmd = true;
  const auto traj = run_stages(setup.initial, setup.targets, setup.stages, setup.options);
  {
    auto os = detail::open_output(dir / "trajectory.csv");
    write_trajectory_csv(os, traj);
  }
  {
    auto os = detail::open_output(dir / "mmd_series.csv");
    os << "step,mmd_sq\n";
    for (const auto& s : traj.snapshots) os << s.step << ',' << csv::format_double(s.mmd_sq.value_or(NAN)) << '\n';
  }
  SimulateSummary out{traj.initial_mmd_sq, traj.final_mmd_sq,
                      traj.initial_mmd_sq > 0.0 ? traj.final_mmd_sq / traj.initial_mmd_sq : 0.0,
                      traj.final_state.step_index, traj.snapshots.size()};
  detail::write_json(dir / "summary.json",
                     {{"command", "simulate"},
                      {"initial_mmd_sq", out.initial_mmd_sq},
                      {"final_mmd_sq", out.final_mmd_sq},
                      {"ratio", out.ratio},
                      {"steps", out.steps},
                      {"snapshots", out.snapshots},
                      {"stages", detail::stages_json(setup.stages)}});
  return out;
}

/// Alternating flow simulation and regression; writes stack.json,
/// loss_history.csv and distill_summary.json.
inline DistillResult cmd_distill(const RunConfig& cfg, const fs::path& dir) {
  if (!cfg.surrogate) throw ConfigError("surrogate", "required for distill");
  auto setup = detail::prepare(cfg, dir);
  const TrainConfig train = train_config(*cfg.surrogate, cfg.seed);
  DistillResult result = distill(setup.initial.positions, setup.targets, setup.stages, train, setup.options);
  result.stack.latent = std::string(latent_kind_name(cfg.latent));
  {
    auto os = detail::open_output(dir / "stack.json");
    os << to_json(result.stack).dump() << '\n';
  }
  {
    auto os = detail::open_output(dir / "loss_history.csv");
    os << "stage,epoch,loss\n";
    for (std::size_t l = 0; l < result.stack.loss_history.size(); ++l) {
      const auto& h = result.stack.loss_history[l];
      for (std::size_t e = 0; e < h.size(); ++e) os << l << ',' << e << ',' << csv::format_double(h[e]) << '\n';
    }
  }
  const Points joint_targets = concat_columns(setup.targets.positions, setup.targets.conditions);
  detail::write_json(dir / "distill_summary.json",
                     {{"command", "distill"},
                      {"stage_losses", result.stage_losses},
                      {"transported_mmd_sq",
                       mmd_sq(concat_columns(result.transported, setup.targets.conditions), joint_targets)},
                      {"stages", detail::stages_json(setup.stages)}});
  return result;
}

inline SurrogateStack load_stack(const fs::path& path) { return surrogate_from_json(detail::read_json(path)); }

/// Draws `count` latents per condition row and pushes them through the stack.
/// Returns samples with their conditions; writes samples.csv when `output`
/// is non-empty.
inline std::pair<Points, Points> cmd_generate(const SurrogateStack& stack, const Points& conditions,
                                              std::size_t count, std::uint64_t seed,
                                              const fs::path& output = {}) {
  if (stack.regressors.empty()) throw Error("generate: surrogate stack is empty");
  if (conditions.dim() != stack.condition_dim) {
    throw DimensionError("generate: stack expects " + std::to_string(stack.condition_dim) +
                         "-dimensional conditions, got " + std::to_string(conditions.dim()));
  }
  if (count == 0) throw Error("generate: count must be positive");
  const LatentKind latent = parse_latent_kind(stack.latent);
  Points samples(conditions.size() * count, stack.position_dim);
  Points conds(conditions.size() * count, conditions.dim());
  for (std::size_t k = 0; k < conditions.size(); ++k) {
    const Points z = latent_sampler(latent, stack.position_dim, count, derive_seed(seed, "generate", k));
    Points y(count, conditions.dim());
    for (std::size_t i = 0; i < count; ++i) std::copy(conditions.row(k).begin(), conditions.row(k).end(), y.row(i).begin());
    const Points x = apply_stack(stack, z, y);
    for (std::size_t i = 0; i < count; ++i) {
      std::copy(x.row(i).begin(), x.row(i).end(), samples.row(k * count + i).begin());
      std::copy(y.row(i).begin(), y.row(i).end(), conds.row(k * count + i).begin());
    }
  }
  if (!output.empty()) {
    if (output.has_parent_path()) fs::create_directories(output.parent_path());
    auto os = detail::open_output(output);
    csv::write_joint(os, samples, conds);
  }
  return {std::move(samples), std::move(conds)};
}

/// Groups rows of a samples table by their condition and compares each group
/// with the oracle. Writes reports.jsonl when `output` is non-empty.
inline MetricReport cmd_eval(const csv::Table& samples, const PosteriorOracle& oracle, double mean_tolerance,
                             double std_tolerance, const fs::path& output = {}) {
  const Points x = samples.block("x_", oracle.position_dim());
  const Points y = samples.block("y_", oracle.condition_dim());
  std::vector<ConditionSamples> groups;
  std::map<std::vector<double>, std::size_t> index;
  std::vector<std::vector<std::size_t>> rows;
  for (std::size_t i = 0; i < y.size(); ++i) {
    std::vector<double> key(y.row(i).begin(), y.row(i).end());
    auto [it, inserted] = index.emplace(key, rows.size());
    if (inserted) {
      rows.emplace_back();
      groups.push_back({std::move(key), Points()});
    }
    rows[it->second].push_back(i);
  }
  for (std::size_t g = 0; g < groups.size(); ++g) groups[g].samples = take_rows(x, rows[g]);
  MetricReport report = posterior_error(groups, oracle, mean_tolerance, std_tolerance);
  if (!output.empty()) {
    auto os = detail::open_output(output);
    const MetricReport list[] = {report};
    write_jsonl(os, list);
  }
  return report;
}

struct BenchRow {
  std::string method;
  std::size_t n = 0;
  double median_seconds = 0.0;
  std::size_t repetitions = 0;
};

struct BenchResult {
  std::vector<BenchRow> rows;
  double slope_sorted = 0.0;
  double slope_full = 0.0;
};

/// Least-squares slope of log(t) against log(n).
inline double loglog_slope(std::span<const double> n, std::span<const double> t) {
  if (n.size() != t.size() || n.size() < 2) throw Error("loglog_slope: need at least two points");
  double mx = 0.0, my = 0.0;
  for (std::size_t i = 0; i < n.size(); ++i) {
    mx += std::log(n[i]);
    my += std::log(t[i]);
  }
  mx /= static_cast<double>(n.size());
  my /= static_cast<double>(n.size());
  double sxy = 0.0, sxx = 0.0;
  for (std::size_t i = 0; i < n.size(); ++i) {
    sxy += (std::log(n[i]) - mx) * (std::log(t[i]) - my);
    sxx += (std::log(n[i]) - mx) * (std::log(n[i]) - mx);
  }
  return sxy / sxx;
}

/// Times grad_1d_sorted and one-dimensional grad_full with N = M = n for each
/// size; inputs depend only on (seed, n). Writes bench.csv and
/// bench_summary.json when `dir` is non-empty.
inline BenchResult cmd_bench(const std::vector<std::size_t>& sizes, std::size_t repetitions, std::uint64_t seed,
                             const fs::path& dir = {}) {
  if (sizes.size() < 2) throw Error("bench: at least two sizes required");
  if (repetitions == 0) throw Error("bench: repetitions must be positive");
  using clock = std::chrono::steady_clock;
  BenchResult out;
  std::vector<double> ns, sorted_t, full_t;
  for (std::size_t n : sizes) {
    if (n == 0) throw Error("bench: sizes must be positive");
    Rng rng = make_rng(seed, "bench", n);
    std::normal_distribution<double> normal;
    std::vector<double> x(n), p(n);
    for (auto& v : x) v = normal(rng);
    for (auto& v : p) v = normal(rng);
    const Points xp = Points::column(x), pp = Points::column(p);
    std::vector<double> ts, tf;
    double sink = 0.0;
    for (std::size_t r = 0; r < repetitions; ++r) {
      auto t0 = clock::now();
      const auto g = grad_1d_sorted(x, p);
      auto t1 = clock::now();
      sink += g[0];
      ts.push_back(std::chrono::duration<double>(t1 - t0).count());
      t0 = clock::now();
      const auto f = grad_full(xp, pp);
      t1 = clock::now();
      sink += f(0, 0);
      tf.push_back(std::chrono::duration<double>(t1 - t0).count());
    }
    if (!std::isfinite(sink)) throw Error("bench: non-finite gradient");
    out.rows.push_back({"grad_1d_sorted", n, detail::median(ts), repetitions});
    out.rows.push_back({"grad_full", n, detail::median(tf), repetitions});
    ns.push_back(static_cast<double>(n));
    sorted_t.push_back(std::max(detail::median(ts), 1e-9));
    full_t.push_back(std::max(detail::median(tf), 1e-9));
  }
  out.slope_sorted = loglog_slope(ns, sorted_t);
  out.slope_full = loglog_slope(ns, full_t);
  if (!dir.empty()) {
    fs::create_directories(dir);
    auto os = detail::open_output(dir / "bench.csv");
    os << "method,n,median_seconds,repetitions\n";
    for (const auto& r : out.rows) {
      os << r.method << ',' << r.n << ',' << csv::format_double(r.median_seconds) << ',' << r.repetitions << '\n';
    }
    detail::write_json(dir / "bench_summary.json",
                       {{"sizes", sizes},
                        {"repetitions", repetitions},
                        {"seed", seed},
                        {"slope_grad_1d_sorted", out.slope_sorted},
                        {"slope_grad_full", out.slope_full}});
  }
  return out;
}

struct DriftResult {
  std::vector<DriftSample> frozen;
  std::vector<DriftSample> free;
};

/// Velocity ratio |v_y| / |v_x| along the first configured stage, with the
/// condition block frozen and free. Writes y_drift.csv.
inline DriftResult cmd_y_drift(const RunConfig& cfg, const fs::path& dir) {
  auto setup = detail::prepare(cfg, dir);
  if (setup.targets.conditions.dim() == 0) throw ConfigError("problem", "y-drift needs conditions");
  const StageSchedule& stage = setup.stages.front();
  DriftResult out{measure_y_drift(setup.initial, setup.targets, stage, DriftMode::frozen, setup.options),
                  measure_y_drift(setup.initial, setup.targets, stage, DriftMode::free, setup.options)};
  auto os = detail::open_output(dir / "y_drift.csv");
  os << "mode,step,ratio\n";
  for (const auto& s : out.frozen) os << "frozen," << s.step << ',' << csv::format_double(s.ratio) << '\n';
  for (const auto& s : out.free) os << "free," << s.step << ',' << csv::format_double(s.ratio) << '\n';
  return out;
}

}  // namespace mmdflow
