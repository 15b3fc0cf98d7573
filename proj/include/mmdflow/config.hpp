#pragma once

// Run configuration: a single JSON document with a schema version. Parsing is
// strict: unknown keys, wrong types and out-of-range values raise ConfigError
// naming the offending field path.

#include <algorithm>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "mmdflow/flow.hpp"
#include "mmdflow/points.hpp"
#include "mmdflow/problems.hpp"
#include "mmdflow/random.hpp"
#include "mmdflow/surrogate.hpp"

namespace mmdflow {

class ConfigError : public Error {
 public:
  ConfigError(const std::string& path, const std::string& message)
      : Error("config: " + path + ": " + message), path_(path) {}
  const std::string& path() const noexcept { return path_; }

 private:
  std::string path_;
};

inline constexpr int kSchemaVersion = 1;

struct ProblemSpec {
  /// linear_gaussian | labeled_clusters | discrete_y_toy
  std::string generator = "linear_gaussian";
  std::size_t n_samples = 1024;
  nlohmann::json params = nlohmann::json::object();

  friend bool operator==(const ProblemSpec&, const ProblemSpec&) = default;
};

/// One flow stage; an absent tau means the default 0.1 * diameter / N.
struct StageSpec {
  std::optional<double> tau;
  double momentum = 0.9;
  std::size_t steps = 1000;
  std::size_t projections = 256;

  friend bool operator==(const StageSpec&, const StageSpec&) = default;
};

/// Stage l (1-based) runs min(base_steps * l, max_steps) steps.
struct StageGrowth {
  std::size_t count = 1;
  std::size_t base_steps = 1000;
  std::size_t max_steps = 1000;
  std::optional<double> tau;
  double momentum = 0.9;
  std::size_t projections = 256;

  friend bool operator==(const StageGrowth&, const StageGrowth&) = default;
};

struct FlowSpec {
  GradientMethod gradient = GradientMethod::sliced;
  std::size_t record_every = 100;
  /// Exactly one of `stages` and `growth` is set.
  std::vector<StageSpec> stages;
  std::optional<StageGrowth> growth;

  friend bool operator==(const FlowSpec&, const FlowSpec&) = default;
};

struct SurrogateSpec {
  std::vector<std::size_t> hidden{128, 128};
  bool residual = true;
  OptimizerKind optimizer = OptimizerKind::sgd;
  double learning_rate = 0.01;
  double momentum = 0.9;
  std::size_t epochs = 500;
  std::size_t batch_size = 256;
  bool cosine = true;

  friend bool operator==(const SurrogateSpec&, const SurrogateSpec&) = default;
};

struct EvaluationSpec {
  std::vector<std::vector<double>> conditions;
  std::size_t samples_per_condition = 2000;
  double mean_tolerance = 0.15;
  double std_tolerance = 0.2;

  friend bool operator==(const EvaluationSpec&, const EvaluationSpec&) = default;
};

struct RunConfig {
  int schema_version = kSchemaVersion;
  std::string name = "run";
  std::uint64_t seed = 0;
  std::string output_dir = "out";
  unsigned threads = 1;
  ProblemSpec problem;
  LatentKind latent = LatentKind::gaussian;
  FlowSpec flow;
  std::optional<SurrogateSpec> surrogate;
  std::optional<EvaluationSpec> evaluation;

  friend bool operator==(const RunConfig&, const RunConfig&) = default;
};

namespace detail {

using json = nlohmann::json;

class Reader {
 public:
  Reader(const json& node, std::string path) : node_(node), path_(std::move(path)) {
    if (!node_.is_object()) throw ConfigError(display(), "expected an object");
  }

  bool has(const char* key) const { return node_.contains(key); }

  Reader child(const char* key) const { return Reader(at(key), join(key)); }

  const json& at(const char* key) const {
    seen_.emplace_back(key);
    if (!node_.contains(key)) throw ConfigError(join(key), "missing required field");
    return node_.at(key);
  }

  std::string join(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }

  double number(const char* key) const {
    const auto& v = at(key);
    if (!v.is_number()) throw ConfigError(join(key), "expected a number");
    return v.get<double>();
  }
  double positive(const char* key) const {
    const double v = number(key);
    if (!(v > 0.0) || !std::isfinite(v)) throw ConfigError(join(key), "must be a positive finite number");
    return v;
  }
  std::uint64_t unsigned_int(const char* key) const {
    const auto& v = at(key);
    if (!v.is_number_unsigned() && !(v.is_number_integer() && v.get<std::int64_t>() >= 0)) {
      throw ConfigError(join(key), "expected a non-negative integer");
    }
    return v.get<std::uint64_t>();
  }
  std::size_t count(const char* key, std::size_t min = 1) const {
    const auto v = unsigned_int(key);
    if (v < min) throw ConfigError(join(key), "must be at least " + std::to_string(min));
    return static_cast<std::size_t>(v);
  }
  bool boolean(const char* key) const {
    const auto& v = at(key);
    if (!v.is_boolean()) throw ConfigError(join(key), "expected true or false");
    return v.get<bool>();
  }
  std::string string(const char* key) const {
    const auto& v = at(key);
    if (!v.is_string()) throw ConfigError(join(key), "expected a string");
    return v.get<std::string>();
  }
  std::optional<double> optional_positive(const char* key) const {
    if (!has(key) || node_.at(key).is_null()) {
      seen_.emplace_back(key);
      return std::nullopt;
    }
    return positive(key);
  }
  double momentum(const char* key) const {
    const double m = number(key);
    if (!(m >= 0.0 && m < 1.0)) throw ConfigError(join(key), "must lie in [0, 1)");
    return m;
  }

  /// Rejects keys that were never read.
  void finish() const {
    for (const auto& [key, value] : node_.items()) {
      if (std::find(seen_.begin(), seen_.end(), key) == seen_.end()) {
        throw ConfigError(join(key), "unknown field");
      }
    }
  }

  std::string display() const { return path_.empty() ? "<root>" : path_; }

 private:
  const json& node_;
  std::string path_;
  mutable std::vector<std::string> seen_;
};

inline Points matrix_param(const json& v, const std::string& path) {
  if (v.is_number()) return Points::column({v.get<double>()});
  if (!v.is_array() || v.empty()) throw ConfigError(path, "expected a number or a non-empty list");
  const bool nested = v.front().is_array();
  const std::size_t cols = nested ? v.front().size() : 1;
  if (cols == 0) throw ConfigError(path, "rows must be non-empty");
  Points out(v.size(), cols);
  for (std::size_t i = 0; i < v.size(); ++i) {
    const auto& row = v[i];
    if (nested) {
      if (!row.is_array() || row.size() != cols) throw ConfigError(path, "ragged rows");
      for (std::size_t c = 0; c < cols; ++c) {
        if (!row[c].is_number()) throw ConfigError(path, "expected numbers");
        out(i, c) = row[c].get<double>();
      }
    } else {
      if (!row.is_number()) throw ConfigError(path, "expected numbers");
      out(i, 0) = row.get<double>();
    }
  }
  return out;
}

inline std::vector<double> stds_param(const Reader& r, const char* key, std::size_t expected) {
  const auto& v = r.at(key);
  std::vector<double> out;
  if (v.is_number()) {
    out.assign(expected, v.get<double>());
  } else if (v.is_array()) {
    for (const auto& s : v) {
      if (!s.is_number()) throw ConfigError(r.join(key), "expected numbers");
      out.push_back(s.get<double>());
    }
  } else {
    throw ConfigError(r.join(key), "expected a number or a list");
  }
  if (out.size() != expected) throw ConfigError(r.join(key), "needs one entry per atom");
  for (double s : out) {
    if (!(s > 0.0)) throw ConfigError(r.join(key), "must be positive");
  }
  return out;
}

inline GradientMethod parse_gradient(const std::string& s, const std::string& path) {
  if (s == "sliced") return GradientMethod::sliced;
  if (s == "exact") return GradientMethod::exact;
  throw ConfigError(path, "expected 'sliced' or 'exact'");
}

inline const char* gradient_name(GradientMethod g) { return g == GradientMethod::sliced ? "sliced" : "exact"; }

inline json optional_json(const std::optional<double>& v) { return v ? json(*v) : json(nullptr); }

}  // namespace detail

/// Builds the toy problem described by `spec`; the dataset stream derives from `seed`.
inline ToyProblem make_problem(const ProblemSpec& spec, std::uint64_t seed) {
  const detail::Reader r(spec.params, "problem.params");
  const std::string base = "problem.params";
  ToyProblem out = [&] {
    if (spec.generator == "linear_gaussian") {
      const Points a = detail::matrix_param(r.at("a"), base + ".a");
      return linear_gaussian(a, r.positive("sigma"), r.positive("prior_std"), spec.n_samples, seed);
    }
    if (spec.generator == "labeled_clusters") {
      const Points means = detail::matrix_param(r.at("means"), base + ".means");
      if (means.size() < 2) throw ConfigError(base + ".means", "at least two classes required");
      return labeled_clusters(means, r.positive("std"), spec.n_samples, seed);
    }
    if (spec.generator == "discrete_y_toy") {
      const Points atoms = detail::matrix_param(r.at("atoms"), base + ".atoms");
      const Points means = detail::matrix_param(r.at("means"), base + ".means");
      if (atoms.size() < 2) throw ConfigError(base + ".atoms", "at least two atoms required");
      if (means.size() != atoms.size()) throw ConfigError(base + ".means", "needs one row per atom");
      return discrete_y_toy(atoms, means, detail::stds_param(r, "stds", atoms.size()), spec.n_samples,
                            seed);
    }
    throw ConfigError("problem.generator", "unknown generator '" + spec.generator + "'");
  }();
  r.finish();
  return out;
}

/// Expands the flow spec into concrete schedules. Stage seeds derive from the
/// run seed; a missing tau becomes 0.1 * diameter(targets) / N.
inline std::vector<StageSchedule> resolve_stages(const FlowSpec& flow, std::uint64_t seed,
                                                 std::size_t particles, double diameter) {
  std::vector<StageSpec> specs = flow.stages;
  if (flow.growth) {
    const auto& g = *flow.growth;
    specs.clear();
    for (std::size_t l = 1; l <= g.count; ++l) {
      specs.push_back({g.tau, g.momentum, std::min(g.base_steps * l, g.max_steps), g.projections});
    }
  }
  std::vector<StageSchedule> out;
  for (std::size_t l = 0; l < specs.size(); ++l) {
    const auto& s = specs[l];
    const double tau = s.tau ? *s.tau : default_step_size(particles, diameter);
    out.push_back({tau, s.momentum, s.steps, s.projections, derive_seed(seed, "flow-stage", l)});
  }
  return out;
}

inline TrainConfig train_config(const SurrogateSpec& s, std::uint64_t seed) {
  TrainConfig t;
  t.hidden = s.hidden;
  t.residual = s.residual;
  t.optimizer = s.optimizer;
  t.learning_rate = s.learning_rate;
  t.momentum = s.momentum;
  t.epochs = s.epochs;
  t.batch_size = s.batch_size;
  t.cosine_decay = s.cosine;
  t.seed = derive_seed(seed, "surrogate");
  return t;
}

inline RunConfig parse_config(const nlohmann::json& doc) {
  using detail::Reader;
  const Reader root(doc, "");
  RunConfig c;
  const auto version = root.unsigned_int("schema_version");
  if (version != static_cast<std::uint64_t>(kSchemaVersion)) {
    throw ConfigError("schema_version", "unsupported version " + std::to_string(version));
  }
  c.name = root.string("name");
  if (c.name.empty() || c.name.find_first_of("/\\") != std::string::npos) {
    throw ConfigError("name", "must be a non-empty name without path separators");
  }
  c.seed = root.unsigned_int("seed");
  if (root.has("output_dir")) c.output_dir = root.string("output_dir");
  if (root.has("threads")) c.threads = static_cast<unsigned>(root.count("threads"));

  {
    const Reader p = root.child("problem");
    c.problem.generator = p.string("generator");
    c.problem.n_samples = p.count("n_samples");
    const auto& params = p.at("params");
    if (!params.is_object()) throw ConfigError("problem.params", "expected an object");
    c.problem.params = params;
    p.finish();
    ProblemSpec probe = c.problem;
    probe.n_samples = 1;
    make_problem(probe, 0);  // validates parameters
  }

  if (root.has("latent")) {
    const auto name = root.string("latent");
    try {
      c.latent = parse_latent_kind(name);
    } catch (const Error&) {
      throw ConfigError("latent", "expected 'gaussian' or 'uniform'");
    }
  }

  {
    const Reader f = root.child("flow");
    if (f.has("gradient")) c.flow.gradient = detail::parse_gradient(f.string("gradient"), "flow.gradient");
    if (f.has("record_every")) c.flow.record_every = f.count("record_every");
    const bool explicit_stages = f.has("stages");
    const bool growth = f.has("growth");
    if (explicit_stages == growth) throw ConfigError("flow", "exactly one of 'stages' and 'growth' is required");
    if (explicit_stages) {
      const auto& list = f.at("stages");
      if (!list.is_array() || list.empty()) throw ConfigError("flow.stages", "expected a non-empty list");
      for (std::size_t l = 0; l < list.size(); ++l) {
        const Reader s(list[l], "flow.stages[" + std::to_string(l) + "]");
        StageSpec st;
        st.tau = s.optional_positive("tau");
        st.momentum = s.momentum("momentum");
        st.steps = s.count("steps", 0);
        st.projections = s.count("projections");
        s.finish();
        c.flow.stages.push_back(st);
      }
    } else {
      const Reader g = f.child("growth");
      StageGrowth st;
      st.count = g.count("count");
      st.base_steps = g.count("base_steps", 0);
      st.max_steps = g.count("max_steps", 0);
      st.tau = g.optional_positive("tau");
      st.momentum = g.momentum("momentum");
      st.projections = g.count("projections");
      g.finish();
      c.flow.growth = st;
    }
    f.finish();
  }

  if (root.has("surrogate")) {
    const Reader s = root.child("surrogate");
    SurrogateSpec sp;
    const auto& hidden = s.at("hidden");
    if (!hidden.is_array()) throw ConfigError("surrogate.hidden", "expected a list of widths");
    sp.hidden.clear();
    for (const auto& w : hidden) {
      if (!w.is_number_integer() || w.get<std::int64_t>() <= 0) {
        throw ConfigError("surrogate.hidden", "widths must be positive integers");
      }
      sp.hidden.push_back(w.get<std::size_t>());
    }
    sp.residual = s.boolean("residual");
    const Reader o = s.child("optimizer");
    const auto kind = o.string("kind");
    if (kind == "sgd") {
      sp.optimizer = OptimizerKind::sgd;
    } else if (kind == "adam") {
      sp.optimizer = OptimizerKind::adam;
    } else {
      throw ConfigError("surrogate.optimizer.kind", "expected 'sgd' or 'adam'");
    }
    sp.learning_rate = o.positive("learning_rate");
    sp.momentum = o.momentum("momentum");
    sp.epochs = o.count("epochs");
    sp.batch_size = o.count("batch_size");
    sp.cosine = o.boolean("cosine");
    o.finish();
    s.finish();
    c.surrogate = sp;
  }

  if (root.has("evaluation")) {
    const Reader e = root.child("evaluation");
    EvaluationSpec ev;
    const auto& conds = e.at("conditions");
    if (!conds.is_array() || conds.empty()) {
      throw ConfigError("evaluation.conditions", "expected a non-empty list");
    }
    const Points m = detail::matrix_param(conds, "evaluation.conditions");
    for (std::size_t i = 0; i < m.size(); ++i) ev.conditions.emplace_back(m.row(i).begin(), m.row(i).end());
    ev.samples_per_condition = e.count("samples_per_condition", 100);
    ev.mean_tolerance = e.positive("mean_tolerance");
    ev.std_tolerance = e.positive("std_tolerance");
    e.finish();
    c.evaluation = ev;
  }
  root.finish();
  return c;
}

inline nlohmann::json serialize_config(const RunConfig& c) {
  using detail::json;
  json flow = {{"gradient", detail::gradient_name(c.flow.gradient)}, {"record_every", c.flow.record_every}};
  if (c.flow.growth) {
    const auto& g = *c.flow.growth;
    flow["growth"] = {{"count", g.count},       {"base_steps", g.base_steps},
                      {"max_steps", g.max_steps}, {"tau", detail::optional_json(g.tau)},
                      {"momentum", g.momentum},  {"projections", g.projections}};
  } else {
    json stages = json::array();
    for (const auto& s : c.flow.stages) {
      stages.push_back({{"tau", detail::optional_json(s.tau)}, {"momentum", s.momentum},
                        {"steps", s.steps}, {"projections", s.projections}});
    }
    flow["stages"] = stages;
  }
  json doc = {{"schema_version", c.schema_version},
              {"name", c.name},
              {"seed", c.seed},
              {"output_dir", c.output_dir},
              {"threads", c.threads},
              {"problem",
               {{"generator", c.problem.generator},
                {"n_samples", c.problem.n_samples},
                {"params", c.problem.params}}},
              {"latent", std::string(latent_kind_name(c.latent))},
              {"flow", flow}};
  if (c.surrogate) {
    const auto& s = *c.surrogate;
    doc["surrogate"] = {{"hidden", s.hidden},
                        {"residual", s.residual},
                        {"optimizer",
                         {{"kind", s.optimizer == OptimizerKind::sgd ? "sgd" : "adam"},
                          {"learning_rate", s.learning_rate},
                          {"momentum", s.momentum},
                          {"epochs", s.epochs},
                          {"batch_size", s.batch_size},
                          {"cosine", s.cosine}}}};
  }
  if (c.evaluation) {
    const auto& e = *c.evaluation;
    doc["evaluation"] = {{"conditions", e.conditions},
                         {"samples_per_condition", e.samples_per_condition},
                         {"mean_tolerance", e.mean_tolerance},
                         {"std_tolerance", e.std_tolerance}};
  }
  return doc;
}

inline RunConfig parse_config_text(const std::string& text) {
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError("<document>", std::string("invalid JSON: ") + e.what());
  }
  return parse_config(doc);
}

}  // namespace mmdflow
