// Command-line driver: simulate, distill, generate, eval, bench, y-drift.
// Exit codes: 0 success, 1 other error, 2 configuration error,
// 3 numerical divergence, 4 evaluation failure.

#include <cstdint>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "mmdflow/config.hpp"
#include "mmdflow/pipeline.hpp"

namespace {

using namespace mmdflow;

constexpr int kExitOther = 1;
constexpr int kExitConfig = 2;
constexpr int kExitDivergence = 3;
constexpr int kExitEvaluation = 4;

struct GlobalFlags {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
  std::optional<unsigned> threads;
};

RunConfig load_config(const GlobalFlags& g) {
  std::ifstream is(g.config, std::ios::binary);
  if (!is) throw ConfigError("<file>", "cannot read " + g.config);
  std::stringstream ss;
  ss << is.rdbuf();
  RunConfig cfg = parse_config_text(ss.str());
  if (g.seed) cfg.seed = *g.seed;
  if (!g.out.empty()) cfg.output_dir = g.out;
  if (g.threads) cfg.threads = *g.threads;
  return cfg;
}

/// Run directory and optional config: out/run_<name> with a config, else --out.
std::pair<fs::path, std::optional<RunConfig>> locate(const GlobalFlags& g) {
  if (!g.config.empty()) {
    RunConfig cfg = load_config(g);
    return {run_directory(cfg), cfg};
  }
  if (g.out.empty()) throw ConfigError("--out", "either --config or --out is required");
  return {fs::path(g.out), std::nullopt};
}

std::vector<double> parse_row(const std::string& text) {
  std::vector<double> row;
  for (auto field : csv::split(text)) row.push_back(csv::parse_double(field, "--y"));
  return row;
}

Points rows_to_points(const std::vector<std::vector<double>>& rows, const std::string& what) {
  if (rows.empty()) throw ConfigError(what, "no conditions given");
  Points out(rows.size(), rows.front().size());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i].size() != out.dim()) throw ConfigError(what, "conditions have different lengths");
    std::copy(rows[i].begin(), rows[i].end(), out.row(i).begin());
  }
  return out;
}

void add_global_flags(CLI::App* cmd, GlobalFlags& g) {
  cmd->add_option("--config", g.config, "Run configuration (JSON)");
  cmd->add_option("--seed", g.seed, "Override the configured seed");
  cmd->add_option("--out", g.out, "Output directory");
  cmd->add_option("--threads", g.threads, "Worker threads")->check(CLI::PositiveNumber);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Particle flows of the maximum mean discrepancy with the negative distance kernel"};
  app.require_subcommand(1);
  GlobalFlags g;

  auto* simulate = app.add_subcommand("simulate", "Run the conditional particle flow");
  add_global_flags(simulate, g);
  auto* distill_cmd = app.add_subcommand("distill", "Distill flow stages into a surrogate stack");
  add_global_flags(distill_cmd, g);
  auto* y_drift = app.add_subcommand("y-drift", "Measure condition-block velocity with frozen and free conditions");
  add_global_flags(y_drift, g);

  auto* generate = app.add_subcommand("generate", "Sample the surrogate posterior for given conditions");
  add_global_flags(generate, g);
  std::string stack_path, conditions_path, samples_out;
  std::vector<std::string> inline_y;
  std::optional<std::size_t> count;
  generate->add_option("--stack", stack_path, "Surrogate stack JSON (default: <run>/stack.json)");
  generate->add_option("--y", inline_y, "Condition as comma-separated values; repeatable");
  generate->add_option("--conditions", conditions_path, "CSV file with y_0.. columns");
  generate->add_option("--count", count, "Samples per condition")->check(CLI::PositiveNumber);
  generate->add_option("--output", samples_out, "Samples CSV (default: <run>/samples.csv)");

  auto* eval = app.add_subcommand("eval", "Compare samples with the analytic posterior");
  add_global_flags(eval, g);
  std::string eval_samples, oracle_path, reports_out;
  std::optional<double> mean_tol, std_tol;
  eval->add_option("--samples", eval_samples, "Samples CSV (default: <run>/samples.csv)");
  eval->add_option("--oracle", oracle_path, "Oracle JSON (default: <run>/oracle.json)");
  eval->add_option("--mean-tol", mean_tol, "Mean error tolerance in oracle-std units");
  eval->add_option("--std-tol", std_tol, "Tolerance on |std ratio - 1|");
  eval->add_option("--output", reports_out, "Report JSON lines (default: <run>/reports.jsonl)");

  auto* bench = app.add_subcommand("bench", "Time sorted and brute-force one-dimensional gradients");
  add_global_flags(bench, g);
  std::vector<std::size_t> sizes{1000, 10000, 100000};
  std::size_t reps = 3;
  bench->add_option("--sizes", sizes, "Particle counts")->delimiter(',');
  bench->add_option("--reps", reps, "Repetitions per size")->check(CLI::PositiveNumber);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kExitConfig;
  }

  try {
    if (simulate->parsed() || distill_cmd->parsed() || y_drift->parsed()) {
      if (g.config.empty()) throw ConfigError("--config", "required for this command");
      const RunConfig cfg = load_config(g);
      const fs::path dir = run_directory(cfg);
      if (simulate->parsed()) {
        const auto s = cmd_simulate(cfg, dir);
        std::cout << "simulate: " << s.steps << " steps, mmd_sq " << s.initial_mmd_sq << " -> " << s.final_mmd_sq
                  << " (ratio " << s.ratio << "), outputs in " << dir.string() << '\n';
      } else if (distill_cmd->parsed()) {
        const auto r = cmd_distill(cfg, dir);
        std::cout << "distill: " << r.stack.regressors.size() << " stages, final losses";
        for (double l : r.stage_losses) std::cout << ' ' << l;
        std::cout << ", stack in " << (dir / "stack.json").string() << '\n';
      } else {
        const auto r = cmd_y_drift(cfg, dir);
        double mean_free = 0.0;
        for (const auto& s : r.free) mean_free += s.ratio;
        if (!r.free.empty()) mean_free /= static_cast<double>(r.free.size());
        std::cout << "y-drift: frozen ratio 0, mean free ratio " << mean_free << ", series in "
                  << (dir / "y_drift.csv").string() << '\n';
      }
      return 0;
    }

    const auto [dir, cfg] = locate(g);
    if (generate->parsed()) {
      const SurrogateStack stack = load_stack(stack_path.empty() ? dir / "stack.json" : fs::path(stack_path));
      std::vector<std::vector<double>> rows;
      for (const auto& y : inline_y) rows.push_back(parse_row(y));
      if (!conditions_path.empty()) {
        const auto table = detail::read_csv(conditions_path);
        const Points y = table.block("y_", table.count_prefixed("y_"));
        for (std::size_t i = 0; i < y.size(); ++i) rows.emplace_back(y.row(i).begin(), y.row(i).end());
      }
      if (rows.empty() && cfg && cfg->evaluation) rows = cfg->evaluation->conditions;
      const Points conditions = rows_to_points(rows, "--y");
      std::size_t n = 1000;
      if (count) {
        n = *count;
      } else if (cfg && cfg->evaluation) {
        n = cfg->evaluation->samples_per_condition;
      }
      const std::uint64_t seed = cfg ? derive_seed(cfg->seed, "samples") : g.seed.value_or(0);
      const fs::path out = samples_out.empty() ? dir / "samples.csv" : fs::path(samples_out);
      cmd_generate(stack, conditions, n, seed, out);
      std::cout << "generate: " << conditions.size() * n << " samples in " << out.string() << '\n';
      return 0;
    }

    if (eval->parsed()) {
      const auto table = detail::read_csv(eval_samples.empty() ? dir / "samples.csv" : fs::path(eval_samples));
      const auto oracle =
          PosteriorOracle::from_json(detail::read_json(oracle_path.empty() ? dir / "oracle.json" : fs::path(oracle_path)));
      double mt = 0.15, st = 0.2;
      if (cfg && cfg->evaluation) {
        mt = cfg->evaluation->mean_tolerance;
        st = cfg->evaluation->std_tolerance;
      }
      if (mean_tol) mt = *mean_tol;
      if (std_tol) st = *std_tol;
      const fs::path out = reports_out.empty() ? dir / "reports.jsonl" : fs::path(reports_out);
      const auto report = cmd_eval(table, oracle, mt, st, out);
      std::cout << "eval: max mean error " << report.value << ", max std ratio error "
                << report.context.at("max_std_ratio_error").get<double>() << " -> "
                << (report.pass ? "PASS" : "FAIL") << '\n';
      return report.pass ? 0 : kExitEvaluation;
    }

    if (bench->parsed()) {
      const std::uint64_t seed = cfg ? cfg->seed : g.seed.value_or(0);
      const auto r = cmd_bench(sizes, reps, seed, dir);
      for (const auto& row : r.rows) {
        std::cout << row.method << " n=" << row.n << " median " << row.median_seconds << " s\n";
      }
      std::cout << "slope grad_1d_sorted " << r.slope_sorted << ", grad_full " << r.slope_full << '\n';
      return 0;
    }
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const csv::FormatError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const DivergenceError& e) {
    std::cerr << "error: " << e.what() << " (step " << e.step() << ")\n";
    return kExitDivergence;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitOther;
  }
  return kExitOther;
}
