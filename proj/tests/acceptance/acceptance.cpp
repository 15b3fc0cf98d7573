// Acceptance suite: one PASS/FAIL line per criterion; exits non-zero if any fails.

#include <sys/wait.h>
#include <unistd.h>

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <limits>
#include <numbers>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "mmdflow/flow.hpp"
#include "mmdflow/kernel.hpp"
#include "mmdflow/metrics.hpp"
#include "mmdflow/pipeline.hpp"
#include "mmdflow/problems.hpp"
#include "mmdflow/sliced.hpp"
#include "mmdflow/surrogate.hpp"

namespace {

using namespace mmdflow;
namespace fs = std::filesystem;
using nlohmann::json;

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(double v) {
  std::ostringstream os;
  os.precision(4);
  os << v;
  return os.str();
}

fs::path work_root() {
  static const fs::path root = [] {
    fs::path p = fs::temp_directory_path() / ("mmdflow_acceptance_" + std::to_string(::getpid()));
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
  }();
  return root;
}

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  std::stringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

/// Runs the CLI; throws with the captured stderr on a non-zero exit.
int cli(const std::string& args, bool require_success = true) {
  const fs::path log = work_root() / "cli.log";
  const std::string cmd = std::string(MMDFLOW_CLI_PATH) + " " + args + " > " + log.string() + " 2>&1";
  const int status = std::system(cmd.c_str());
  const int code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  if (require_success && code != 0) {
    throw std::runtime_error("mmdflow " + args + " exited with " + std::to_string(code) + ": " + slurp(log));
  }
  return code;
}

fs::path write_config(const json& doc, const std::string& file) {
  const fs::path p = work_root() / file;
  std::ofstream(p) << doc.dump(2);
  return p;
}

Points normal_points(std::size_t rows, std::size_t dim, Rng& rng, double shift = 0.0) {
  std::normal_distribution<double> normal(shift, 1.0);
  Points p(rows, dim);
  for (auto& v : p.values()) v = normal(rng);
  return p;
}

double relative_l2(const Points& a, const Points& b) {
  double num = 0.0, den = 0.0;
  for (std::size_t k = 0; k < a.values().size(); ++k) {
    num += (a.values()[k] - b.values()[k]) * (a.values()[k] - b.values()[k]);
    den += b.values()[k] * b.values()[k];
  }
  return std::sqrt(num / den);
}

Outcome exact_1d() {
  Rng rng = make_rng(1, "acceptance-1d");
  std::uniform_int_distribution<std::size_t> size(1, 1000);
  std::uniform_int_distribution<int> grid(-10, 10);
  std::normal_distribution<double> normal;
  double worst = 0.0;
  for (int t = 0; t < 100; ++t) {
    std::vector<double> x(size(rng)), p(size(rng));
    const bool ties = t % 2 == 0;
    for (auto& v : x) v = ties ? 0.25 * grid(rng) : normal(rng);
    for (auto& v : p) v = ties ? 0.25 * grid(rng) : normal(rng);
    const auto fast = grad_1d_sorted(x, p);
    const Points full = grad_full(Points::column(x), Points::column(p));
    for (std::size_t i = 0; i < x.size(); ++i) worst = std::max(worst, std::abs(fast[i] - full(i, 0)));
  }
  return {worst <= 1e-10, "max abs error " + fmt(worst) + " over 100 instances, half with ties"};
}

Outcome sliced_unbiased() {
  double worst = 0.0;
  std::string detail;
  for (std::size_t d : {2u, 3u, 5u}) {
    double sum = 0.0;
    for (std::uint64_t s = 0; s < 10; ++s) {
      Rng data = make_rng(s, "acceptance-sliced-data", d);
      const Points x = normal_points(16, d, data);
      const Points p = normal_points(16, d, data, 0.5);
      Rng dirs = make_rng(s, "acceptance-sliced-dirs", d);
      sum += relative_l2(sliced_grad(x, p, 200000, dirs), grad_full(x, p));
    }
    const double mean = sum / 10.0;
    worst = std::max(worst, mean);
    detail += "d=" + std::to_string(d) + ": " + fmt(100.0 * mean) + "% ";
  }
  return {worst <= 0.03, detail + "(mean relative L2 over 10 seeds)"};
}

Outcome slicing_constants() {
  const double expected[] = {1.0, std::numbers::pi / 2.0, 2.0};
  double worst = 0.0;
  for (std::size_t d = 1; d <= 3; ++d) {
    worst = std::max(worst, std::abs(slicing_constant(d) - expected[d - 1]) / expected[d - 1]);
  }
  bool finite = true;
  for (std::size_t d = 1; d <= 10000; ++d) {
    const double c = slicing_constant(d);
    finite = finite && std::isfinite(c) && c > 0.0;
  }
  return {worst <= 1e-12 && finite,
          "max relative error on c_1..c_3 " + fmt(worst) + ", c_d finite and positive to d=10000: " +
              (finite ? "yes" : "no") + ", c_10000 = " + fmt(slicing_constant(10000))};
}

Outcome kernel_equivalence() {
  Rng rng = make_rng(4, "acceptance-kernel");
  std::uniform_int_distribution<std::size_t> size(1, 60), dim(1, 5);
  double worst = 0.0;
  for (int t = 0; t < 100; ++t) {
    const std::size_t d = dim(rng);
    const Points a = normal_points(size(rng), d, rng);
    const Points b = normal_points(size(rng), d, rng, 1.0);
    worst = std::max(worst, std::abs(mmd_sq(a, b) - mmd_sq_assoc(a, b)));
  }
  return {worst <= 1e-9, "max |mmd_sq - mmd_sq_assoc| " + fmt(worst) + " over 100 pairs"};
}

Outcome metric_bound() {
  const auto sweep = check_mmd_w1_bound(200, 50, 5);
  const Points d0 = Points::column({0.0}), d1 = Points::column({1.0});
  const double dk = std::sqrt(mmd_sq(d0, d1));
  const double zero[] = {0.0}, one[] = {1.0};
  const double w1 = w1_sorted(zero, one);
  return {sweep.pass && dk == 1.0 && w1 == 1.0,
          "max mmd_sq - W1 " + fmt(sweep.value) + " over 200 pairs, D_K(d0,d1) = " + fmt(dk) +
              ", W1(d0,d1) = " + fmt(w1)};
}

Outcome flow_convergence() {
  const auto prob = linear_gaussian(1.0, 1.0, 1.0, 1024, derive_seed(6, "dataset"));
  const TargetSample targets{prob.data.x, prob.data.y};
  const Points z = latent_sampler(LatentKind::gaussian, 1, 1024, derive_seed(6, "particles"));
  FlowOptions options;
  options.record_every = 3000;
  const auto traj = run_conditional_flow(ParticleEnsemble{z, prob.data.y, 0}, targets,
                                         StageSchedule{0.004, 0.9, 3000, 256, derive_seed(6, "flow")}, options);
  const double ratio = traj.final_mmd_sq / traj.initial_mmd_sq;
  return {ratio < 0.05, "mmd_sq " + fmt(traj.initial_mmd_sq) + " -> " + fmt(traj.final_mmd_sq) + " (ratio " +
                            fmt(ratio) + ") after 3000 momentum steps"};
}

Outcome condition_immutability() {
  const auto prob = labeled_clusters(Points(3, 2, {0.0, 0.0, 3.0, 3.0, -3.0, 3.0}), 0.3, 200,
                                     derive_seed(7, "dataset"));
  const TargetSample targets{prob.data.x, prob.data.y};
  const Points z = latent_sampler(LatentKind::gaussian, 2, 200, derive_seed(7, "particles"));
  bool same = true;
  int runs = 0;
  for (auto method : {GradientMethod::sliced, GradientMethod::exact}) {
    for (double momentum : {0.0, 0.9}) {
      FlowOptions options;
      options.gradient = method;
      options.record_every = 10;
      options.track_mmd = false;
      const auto traj = run_conditional_flow(ParticleEnsemble{z, prob.data.y, 0}, targets,
                                             StageSchedule{0.005, momentum, 100, 32, derive_seed(7, "flow")},
                                             options);
      same = same && bitwise_equal(traj.final_state.conditions, prob.data.y);
      ++runs;
    }
  }
  FlowOptions options;
  options.record_every = 5;
  const auto frozen = measure_y_drift(ParticleEnsemble{z, prob.data.y, 0}, targets,
                                      StageSchedule{0.005, 0.9, 100, 32, derive_seed(7, "drift")},
                                      DriftMode::frozen, options);
  double max_ratio = 0.0;
  for (const auto& s : frozen) max_ratio = std::max(max_ratio, std::abs(s.ratio));
  return {same && max_ratio == 0.0 && !frozen.empty(),
          std::string("conditions byte-identical in ") + std::to_string(runs) + " flows: " + (same ? "yes" : "no") +
              ", max frozen y-drift ratio " + fmt(max_ratio) + " over " + std::to_string(frozen.size()) +
              " samples"};
}

Outcome posterior_accuracy() {
  json doc = json::parse(R"({
    "schema_version": 1, "name": "posterior", "seed": 8,
    "problem": {"generator": "linear_gaussian", "n_samples": 4096,
                "params": {"a": 1.0, "sigma": 1.0, "prior_std": 2.0}},
    "latent": "gaussian",
    "flow": {"gradient": "sliced", "record_every": 1000000,
             "growth": {"count": 5, "base_steps": 800, "max_steps": 4000,
                        "tau": 0.012, "momentum": 0.9, "projections": 64}},
    "surrogate": {"hidden": [64, 64], "residual": true,
                  "optimizer": {"kind": "adam", "learning_rate": 0.002, "momentum": 0.9,
                                "epochs": 200, "batch_size": 256, "cosine": true}},
    "evaluation": {"conditions": [[-2.0], [-1.0], [0.0], [1.0], [2.0]],
                   "samples_per_condition": 2000, "mean_tolerance": 0.15, "std_tolerance": 0.2}
  })");
  doc["output_dir"] = (work_root() / "c8").string();
  const fs::path cfg = write_config(doc, "c8.json");
  cli("distill --config " + cfg.string());
  cli("generate --config " + cfg.string());
  const int code = cli("eval --config " + cfg.string(), false);
  const fs::path dir = work_root() / "c8" / "run_posterior";
  std::ifstream is(dir / "reports.jsonl");
  std::string line;
  std::getline(is, line);
  const json report = json::parse(line);
  const json losses = json::parse(slurp(dir / "distill_summary.json")).at("stage_losses");
  std::string detail = "per-y (mean err, |std ratio - 1|):";
  for (const auto& c : report.at("context").at("conditions")) {
    detail += " y=" + fmt(c.at("condition")[0].get<double>()) + " (" + fmt(c.at("mean_error")[0].get<double>()) +
              ", " + fmt(c.at("std_ratio_error")[0].get<double>()) + ")";
  }
  detail += "; stage losses " + losses.dump();
  return {code == 0 && report.at("pass").get<bool>(), detail};
}

Outcome gradient_check() {
  Rng rng = make_rng(9, "acceptance-gradcheck");
  double worst = 0.0;
  for (int t = 0; t < 10; ++t) {
    const bool residual = t % 2 == 0;
    Regressor reg = Regressor::random({3, 6, 6, 2}, residual, rng);
    const TrainingBatch batch{normal_points(8, 2, rng), normal_points(8, 1, rng), normal_points(8, 2, rng)};
    const auto exact = param_gradient(reg, batch);
    constexpr double h = 1e-5;
    double num = 0.0, den = 0.0;
    for (std::size_t k = 0; k < exact.size(); ++k) {
      const double saved = reg.parameters()[k];
      reg.parameters()[k] = saved + h;
      const double up = regression_loss(reg, batch);
      reg.parameters()[k] = saved - h;
      const double down = regression_loss(reg, batch);
      reg.parameters()[k] = saved;
      const double fd = (up - down) / (2.0 * h);
      num += (exact[k] - fd) * (exact[k] - fd);
      den += fd * fd;
    }
    worst = std::max(worst, std::sqrt(num / den));
  }
  return {worst <= 1e-4, "max relative error " + fmt(worst) + " over 10 nets"};
}

Outcome complexity() {
  const auto r = cmd_bench({1000, 10000, 100000}, 3, 10, work_root() / "c10");
  std::string detail;
  for (const auto& row : r.rows) detail += row.method + "(" + std::to_string(row.n) + ")=" + fmt(row.median_seconds) + "s ";
  return {r.slope_sorted <= 1.2 && r.slope_full >= 1.8,
          "slope grad_1d_sorted " + fmt(r.slope_sorted) + ", grad_full " + fmt(r.slope_full) + "; " + detail};
}

Outcome posterior_trend() {
  const auto prob = discrete_y_toy(Points::column({-1.0, 0.0, 1.0}), Points::column({-2.0, 0.0, 2.0}),
                                   {0.5, 0.5, 0.5}, 300, derive_seed(11, "dataset"));
  const TargetSample targets{prob.data.x, prob.data.y};
  const Points z = latent_sampler(LatentKind::gaussian, 1, 300, derive_seed(11, "particles"));
  FlowOptions options;
  options.record_every = 40;
  const auto traj = run_conditional_flow(ParticleEnsemble{z, prob.data.y, 0}, targets,
                                         StageSchedule{0.005, 0.9, 1000, 64, derive_seed(11, "flow")}, options);
  const auto report = joint_vs_posterior_trend(traj, prob.data.y, targets, prob.oracle);
  const bool enough = traj.snapshots.size() >= 20;
  return {enough && report.pass && report.value > 0.9,
          "rank correlation " + fmt(report.value) + " over " + std::to_string(traj.snapshots.size()) +
              " checkpoints"};
}

Outcome determinism() {
  json doc = json::parse(R"({
    "schema_version": 1, "name": "det", "seed": 12,
    "problem": {"generator": "linear_gaussian", "n_samples": 300,
                "params": {"a": 1.0, "sigma": 0.5, "prior_std": 1.0}},
    "flow": {"record_every": 25,
             "growth": {"count": 2, "base_steps": 100, "max_steps": 200,
                        "tau": 0.01, "momentum": 0.9, "projections": 32}},
    "surrogate": {"hidden": [16, 16], "residual": true,
                  "optimizer": {"kind": "adam", "learning_rate": 0.003, "momentum": 0.9,
                                "epochs": 20, "batch_size": 64, "cosine": true}},
    "evaluation": {"conditions": [[-0.5], [0.5]], "samples_per_condition": 200,
                   "mean_tolerance": 0.15, "std_tolerance": 0.2}
  })");
  const fs::path cfg = write_config(doc, "c12.json");
  std::vector<fs::path> dirs;
  for (const char* run : {"first", "second"}) {
    const fs::path out = work_root() / "c12" / run;
    for (const char* cmd : {"simulate", "distill", "generate"}) {
      cli(std::string(cmd) + " --config " + cfg.string() + " --out " + out.string());
    }
    dirs.push_back(out / "run_det");
  }
  std::string detail;
  bool same = true;
  for (const char* f : {"samples.csv", "trajectory.csv", "stack.json", "dataset.csv"}) {
    const std::string a = slurp(dirs[0] / f), b = slurp(dirs[1] / f);
    const bool eq = !a.empty() && a == b;
    same = same && eq;
    detail += std::string(f) + (eq ? " identical (" + std::to_string(a.size()) + " bytes) " : " DIFFERS ");
  }
  return {same, detail};
}

}  // namespace

int main() {
  struct Criterion {
    const char* name;
    std::function<Outcome()> run;
  };
  const std::vector<Criterion> criteria{
      {"1-d exactness", exact_1d},
      {"sliced unbiasedness", sliced_unbiased},
      {"slicing constant", slicing_constants},
      {"kernel equivalence", kernel_equivalence},
      {"metric bound", metric_bound},
      {"flow convergence", flow_convergence},
      {"condition immutability", condition_immutability},
      {"posterior accuracy", posterior_accuracy},
      {"surrogate gradient check", gradient_check},
      {"complexity", complexity},
      {"joint vs posterior trend", posterior_trend},
      {"determinism", determinism},
  };
  int failures = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = criteria[i].run();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    if (!o.pass) ++failures;
    std::cout << (o.pass ? "PASS" : "FAIL") << "  " << (i + 1) << ". " << criteria[i].name << ": " << o.detail
              << " [" << fmt(secs) << " s]" << std::endl;
  }
  std::cout << (criteria.size() - static_cast<std::size_t>(failures)) << "/" << criteria.size()
            << " criteria passed" << std::endl;
  fs::remove_all(work_root());
  return failures == 0 ? 0 : 1;
}
