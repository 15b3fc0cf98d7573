#pragma once

// Fully-connected regressors Phi_l(u, q) -> R^d that distill segments of the
// conditional flow, and their composition T(., y) = Phi_L o ... o Phi_1 with
// u <- u - Phi_l(u, y) at every layer of the stack.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <numeric>
#include <random>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "mmdflow/flow.hpp"
#include "mmdflow/points.hpp"
#include "mmdflow/random.hpp"

namespace mmdflow {

class TrainingError : public DivergenceError {
 public:
  using DivergenceError::DivergenceError;
};

namespace detail {

inline double sigmoid(double z) noexcept { return 1.0 / (1.0 + std::exp(-z)); }
inline double silu(double z) noexcept { return z * sigmoid(z); }
inline double silu_derivative(double z) noexcept {
  const double s = sigmoid(z);
  return s * (1.0 + z * (1.0 - s));
}

}  // namespace detail

/// Multilayer perceptron with widths [d+n, h_1, ..., h_k, d], x*sigmoid(x)
/// hidden activations and a linear output layer. With `residual` set, hidden
/// layers of equal width add their input to their output.
///
/// Parameters live in one flat buffer: for each layer, the row-major weight
/// (out x in) followed by the bias (out).
class Regressor {
 public:
  using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  using ConstWeight = Eigen::Map<const RowMatrix>;
  using Weight = Eigen::Map<RowMatrix>;
  using ConstBias = Eigen::Map<const Eigen::VectorXd>;

  Regressor() = default;

  /// All-zero parameters.
  Regressor(std::vector<std::size_t> widths, bool residual)
      : widths_(std::move(widths)), residual_(residual) {
    if (widths_.size() < 2) throw DimensionError("Regressor: need at least input and output width");
    for (auto w : widths_) {
      if (w == 0) throw DimensionError("Regressor: widths must be positive");
    }
    offsets_.push_back(0);
    for (std::size_t l = 0; l + 1 < widths_.size(); ++l) {
      offsets_.push_back(offsets_.back() + widths_[l + 1] * widths_[l] + widths_[l + 1]);
    }
    params_.assign(offsets_.back(), 0.0);
  }

  /// Gaussian weights with variance 1/fan_in, zero biases.
  static Regressor random(std::vector<std::size_t> widths, bool residual, Rng& rng) {
    Regressor r(std::move(widths), residual);
    std::normal_distribution<double> normal;
    for (std::size_t l = 0; l < r.layer_count(); ++l) {
      const double scale = 1.0 / std::sqrt(static_cast<double>(r.widths_[l]));
      auto w = r.weight(l);
      for (Eigen::Index i = 0; i < w.size(); ++i) w.data()[i] = scale * normal(rng);
    }
    return r;
  }

  std::size_t layer_count() const noexcept { return widths_.empty() ? 0 : widths_.size() - 1; }
  std::size_t input_dim() const noexcept { return widths_.front(); }
  std::size_t output_dim() const noexcept { return widths_.back(); }
  const std::vector<std::size_t>& widths() const noexcept { return widths_; }
  bool residual() const noexcept { return residual_; }

  std::span<double> parameters() noexcept { return params_; }
  std::span<const double> parameters() const noexcept { return params_; }

  Weight weight(std::size_t l) {
    return Weight(params_.data() + offsets_[l], static_cast<Eigen::Index>(widths_[l + 1]),
                  static_cast<Eigen::Index>(widths_[l]));
  }
  ConstWeight weight(std::size_t l) const {
    return ConstWeight(params_.data() + offsets_[l], static_cast<Eigen::Index>(widths_[l + 1]),
                       static_cast<Eigen::Index>(widths_[l]));
  }
  Eigen::Map<Eigen::VectorXd> bias(std::size_t l) {
    return Eigen::Map<Eigen::VectorXd>(params_.data() + offsets_[l] + widths_[l + 1] * widths_[l],
                                       static_cast<Eigen::Index>(widths_[l + 1]));
  }
  ConstBias bias(std::size_t l) const {
    return ConstBias(params_.data() + offsets_[l] + widths_[l + 1] * widths_[l],
                     static_cast<Eigen::Index>(widths_[l + 1]));
  }

  /// True for hidden-to-hidden layers that carry a skip connection.
  bool skips(std::size_t l) const noexcept {
    return residual_ && l > 0 && l + 1 < layer_count() && widths_[l] == widths_[l + 1];
  }

  /// Column-batched forward pass; inputs are (d+n) x B.
  Eigen::MatrixXd forward_batch(const Eigen::MatrixXd& inputs) const {
    if (static_cast<std::size_t>(inputs.rows()) != input_dim()) {
      throw DimensionError("Regressor: input width mismatch");
    }
    Eigen::MatrixXd a = inputs;
    for (std::size_t l = 0; l < layer_count(); ++l) {
      Eigen::MatrixXd z = weight(l) * a;
      z.colwise() += bias(l);
      if (l + 1 == layer_count()) return z;
      Eigen::MatrixXd next = z.unaryExpr([](double v) { return detail::silu(v); });
      if (skips(l)) next += a;
      a = std::move(next);
    }
    return a;
  }

  /// Phi(u, q) for a single point.
  std::vector<double> forward(std::span<const double> u, std::span<const double> q) const {
    if (u.size() + q.size() != input_dim()) throw DimensionError("Regressor: input width mismatch");
    Eigen::MatrixXd in(static_cast<Eigen::Index>(input_dim()), 1);
    for (std::size_t c = 0; c < u.size(); ++c) in(static_cast<Eigen::Index>(c), 0) = u[c];
    for (std::size_t c = 0; c < q.size(); ++c) {
      in(static_cast<Eigen::Index>(u.size() + c), 0) = q[c];
    }
    const Eigen::MatrixXd out = forward_batch(in);
    return std::vector<double>(out.data(), out.data() + out.size());
  }

  friend bool operator==(const Regressor&, const Regressor&) = default;

 private:
  std::vector<std::size_t> widths_;
  bool residual_ = false;
  std::vector<std::size_t> offsets_;
  std::vector<double> params_;
};

/// Regression data: inputs u, conditions q and target displacements.
struct TrainingBatch {
  Points inputs;
  Points conditions;
  Points targets;
};

namespace detail {

inline void validate_batch(const Regressor& reg, const TrainingBatch& b) {
  if (b.inputs.empty()) throw Error("training batch is empty");
  if (b.inputs.size() != b.conditions.size() || b.inputs.size() != b.targets.size()) {
    throw DimensionError("training batch: inconsistent row counts");
  }
  if (b.inputs.dim() + b.conditions.dim() != reg.input_dim() ||
      b.targets.dim() != reg.output_dim()) {
    throw DimensionError("training batch: dimensions do not match the regressor");
  }
}

inline Eigen::MatrixXd stack_inputs(const Points& u, const Points& q) {
  const auto n = static_cast<Eigen::Index>(u.size());
  Eigen::MatrixXd in(static_cast<Eigen::Index>(u.dim() + q.dim()), n);
  for (Eigen::Index i = 0; i < n; ++i) {
    const auto ui = u.row(static_cast<std::size_t>(i));
    const auto qi = q.row(static_cast<std::size_t>(i));
    for (std::size_t c = 0; c < ui.size(); ++c) in(static_cast<Eigen::Index>(c), i) = ui[c];
    for (std::size_t c = 0; c < qi.size(); ++c) {
      in(static_cast<Eigen::Index>(ui.size() + c), i) = qi[c];
    }
  }
  return in;
}

inline Eigen::MatrixXd to_columns(const Points& p) {
  Eigen::MatrixXd out(static_cast<Eigen::Index>(p.dim()), static_cast<Eigen::Index>(p.size()));
  for (std::size_t i = 0; i < p.size(); ++i) {
    for (std::size_t c = 0; c < p.dim(); ++c) {
      out(static_cast<Eigen::Index>(c), static_cast<Eigen::Index>(i)) = p(i, c);
    }
  }
  return out;
}

inline double mean_squared_error(const Eigen::MatrixXd& pred, const Eigen::MatrixXd& target) {
  return (pred - target).squaredNorm() / static_cast<double>(pred.cols());
}

/// Loss (1/B) sum_i |Phi(x_i) - t_i|^2 and its gradient, written into `grad`
/// with the regressor's flat parameter layout.
inline double loss_and_gradient(const Regressor& reg, const Eigen::MatrixXd& inputs,
                                const Eigen::MatrixXd& targets, std::span<double> grad) {
  const std::size_t layers = reg.layer_count();
  std::vector<Eigen::MatrixXd> acts;  // input to layer l
  std::vector<Eigen::MatrixXd> pre;   // pre-activation of layer l
  acts.reserve(layers);
  pre.reserve(layers);
  acts.push_back(inputs);
  Eigen::MatrixXd out;
  for (std::size_t l = 0; l < layers; ++l) {
    Eigen::MatrixXd z = reg.weight(l) * acts.back();
    z.colwise() += reg.bias(l);
    if (l + 1 == layers) {
      out = z;
      pre.push_back(std::move(z));
      break;
    }
    Eigen::MatrixXd next = z.unaryExpr([](double v) { return silu(v); });
    if (reg.skips(l)) next += acts.back();
    pre.push_back(std::move(z));
    acts.push_back(std::move(next));
  }

  const double batch = static_cast<double>(inputs.cols());
  const Eigen::MatrixXd residual = out - targets;
  const double loss = residual.squaredNorm() / batch;

  // delta = dL/d(output of layer l)
  Eigen::MatrixXd delta = (2.0 / batch) * residual;
  Regressor view = reg;  // reuse the layout to address gradient blocks
  for (std::size_t l = layers; l-- > 0;) {
    Eigen::MatrixXd dz;
    if (l + 1 == layers) {
      dz = delta;
    } else {
      dz = delta.cwiseProduct(pre[l].unaryExpr([](double v) { return silu_derivative(v); }));
    }
    view.weight(l) = dz * acts[l].transpose();
    view.bias(l) = dz.rowwise().sum();
    if (l == 0) break;
    Eigen::MatrixXd next_delta = reg.weight(l).transpose() * dz;
    if (reg.skips(l)) next_delta += delta;
    delta = std::move(next_delta);
  }
  std::copy(view.parameters().begin(), view.parameters().end(), grad.begin());
  return loss;
}

}  // namespace detail

/// Mean squared displacement error of `reg` on `batch`.
inline double regression_loss(const Regressor& reg, const TrainingBatch& batch) {
  detail::validate_batch(reg, batch);
  return detail::mean_squared_error(
      reg.forward_batch(detail::stack_inputs(batch.inputs, batch.conditions)),
      detail::to_columns(batch.targets));
}

/// Exact reverse-mode gradient of regression_loss, flat parameter layout.
inline std::vector<double> param_gradient(const Regressor& reg, const TrainingBatch& batch) {
  detail::validate_batch(reg, batch);
  std::vector<double> grad(reg.parameters().size());
  detail::loss_and_gradient(reg, detail::stack_inputs(batch.inputs, batch.conditions),
                            detail::to_columns(batch.targets), grad);
  return grad;
}

enum class OptimizerKind { sgd, adam };

struct TrainConfig {
  std::vector<std::size_t> hidden{128, 128};
  bool residual = true;
  OptimizerKind optimizer = OptimizerKind::sgd;
  double learning_rate = 0.01;
  /// Heavy-ball coefficient for sgd, first-moment decay for adam.
  double momentum = 0.9;
  std::size_t epochs = 500;
  std::size_t batch_size = 256;
  bool cosine_decay = true;
  std::uint64_t seed = 0;

  friend bool operator==(const TrainConfig&, const TrainConfig&) = default;
};

struct TrainedRegressor {
  Regressor regressor;
  /// Full-data loss after every epoch.
  std::vector<double> loss_history;
  double final_loss = 0.0;
};

/// Fits Phi so that outputs ~= inputs - Phi(inputs, conditions) by minibatch
/// gradient descent. Initialisation and shuffling derive from config.seed.
inline TrainedRegressor train_stage(const Points& inputs, const Points& conditions,
                                    const Points& outputs, const TrainConfig& config) {
  if (inputs.size() != conditions.size() || inputs.size() != outputs.size()) {
    throw DimensionError("train_stage: inputs, conditions and outputs need equal length");
  }
  if (inputs.empty()) throw Error("training batch is empty");
  if (inputs.dim() != outputs.dim()) throw DimensionError("train_stage: output width mismatch");
  if (config.epochs == 0 || config.batch_size == 0) {
    throw Error("train_stage: epochs and batch_size must be positive");
  }

  std::vector<std::size_t> widths{inputs.dim() + conditions.dim()};
  widths.insert(widths.end(), config.hidden.begin(), config.hidden.end());
  widths.push_back(inputs.dim());
  Rng init_rng = make_rng(config.seed, "regressor-init");
  Rng shuffle_rng = make_rng(config.seed, "regressor-shuffle");
  Regressor reg = Regressor::random(widths, config.residual, init_rng);

  const Eigen::MatrixXd all_inputs = detail::stack_inputs(inputs, conditions);
  Eigen::MatrixXd all_targets = detail::to_columns(inputs);
  all_targets -= detail::to_columns(outputs);

  const std::size_t n = inputs.size();
  const std::size_t batch = std::min(config.batch_size, n);
  const std::size_t batches_per_epoch = (n + batch - 1) / batch;
  const std::size_t total_iters = config.epochs * batches_per_epoch;
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);

  auto params = reg.parameters();
  std::vector<double> grad(params.size()), first(params.size(), 0.0), second(params.size(), 0.0);
  constexpr double kBeta2 = 0.999;
  constexpr double kEps = 1e-8;

  TrainedRegressor result;
  std::size_t iter = 0;
  Eigen::MatrixXd xb, tb;
  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), shuffle_rng);
    for (std::size_t b = 0; b < batches_per_epoch; ++b) {
      const std::size_t lo = b * batch;
      const std::size_t hi = std::min(n, lo + batch);
      const auto cols = static_cast<Eigen::Index>(hi - lo);
      xb.resize(all_inputs.rows(), cols);
      tb.resize(all_targets.rows(), cols);
      for (std::size_t k = lo; k < hi; ++k) {
        const auto dst = static_cast<Eigen::Index>(k - lo);
        const auto src = static_cast<Eigen::Index>(order[k]);
        xb.col(dst) = all_inputs.col(src);
        tb.col(dst) = all_targets.col(src);
      }
      detail::loss_and_gradient(reg, xb, tb, grad);

      double lr = config.learning_rate;
      if (config.cosine_decay) {
        lr *= 0.5 * (1.0 + std::cos(std::numbers::pi * static_cast<double>(iter) /
                                    static_cast<double>(total_iters)));
      }
      ++iter;
      if (config.optimizer == OptimizerKind::sgd) {
        for (std::size_t t = 0; t < params.size(); ++t) {
          first[t] = config.momentum * first[t] + grad[t];
          params[t] -= lr * first[t];
        }
      } else {
        const double c1 = 1.0 - std::pow(config.momentum, static_cast<double>(iter));
        const double c2 = 1.0 - std::pow(kBeta2, static_cast<double>(iter));
        for (std::size_t t = 0; t < params.size(); ++t) {
          first[t] = config.momentum * first[t] + (1.0 - config.momentum) * grad[t];
          second[t] = kBeta2 * second[t] + (1.0 - kBeta2) * grad[t] * grad[t];
          params[t] -= lr * (first[t] / c1) / (std::sqrt(second[t] / c2) + kEps);
        }
      }
    }
    const double loss = detail::mean_squared_error(reg.forward_batch(all_inputs), all_targets);
    if (!std::isfinite(loss)) throw TrainingError("non-finite training loss", epoch);
    result.loss_history.push_back(loss);
  }
  result.final_loss = result.loss_history.back();
  result.regressor = std::move(reg);
  return result;
}

/// Ordered regressors composing the transport map T(., y).
struct SurrogateStack {
  std::size_t position_dim = 0;
  std::size_t condition_dim = 0;
  std::vector<Regressor> regressors;
  std::vector<std::vector<double>> loss_history;
  std::string latent = "gaussian";

  friend bool operator==(const SurrogateStack&, const SurrogateStack&) = default;
};

/// u <- u - Phi_l(u, y) for l = 1..L, starting from u = z.
inline std::vector<double> compose_apply(const SurrogateStack& stack, std::span<const double> z,
                                         std::span<const double> y) {
  if (stack.regressors.empty()) throw Error("compose_apply: empty surrogate stack");
  if (z.size() != stack.position_dim || y.size() != stack.condition_dim) {
    throw DimensionError("compose_apply: dimension mismatch");
  }
  std::vector<double> u(z.begin(), z.end());
  for (const auto& reg : stack.regressors) {
    const auto step = reg.forward(u, y);
    for (std::size_t c = 0; c < u.size(); ++c) u[c] -= step[c];
  }
  return u;
}

/// Batched compose_apply over rows of z and y.
inline Points apply_stack(const SurrogateStack& stack, const Points& z, const Points& y) {
  if (stack.regressors.empty()) throw Error("compose_apply: empty surrogate stack");
  if (z.size() != y.size()) throw DimensionError("apply_stack: row counts differ");
  if (z.dim() != stack.position_dim || y.dim() != stack.condition_dim) {
    throw DimensionError("compose_apply: dimension mismatch");
  }
  Points u = z;
  for (const auto& reg : stack.regressors) {
    const Eigen::MatrixXd step = reg.forward_batch(detail::stack_inputs(u, y));
    for (std::size_t i = 0; i < u.size(); ++i) {
      for (std::size_t c = 0; c < u.dim(); ++c) {
        u(i, c) -= step(static_cast<Eigen::Index>(c), static_cast<Eigen::Index>(i));
      }
    }
  }
  return u;
}

struct DistillResult {
  SurrogateStack stack;
  /// Particles after pushing the latents through the whole stack, u^(L).
  Points transported;
  /// Endpoint of the last simulated flow segment.
  Points last_flow_endpoint;
  std::vector<double> stage_losses;
};

/// Alternates flow simulation and regression: stage l flows the current
/// particles u^(l-1) for T_l steps, fits Phi_l to the displacement, then sets
/// u^(l) = u^(l-1) - Phi_l(u^(l-1), q). Particle conditions are the target
/// conditions. Stage l trains with seed derive_seed(train.seed, "stage", l).
inline DistillResult distill(const Points& latents, const TargetSample& targets,
                             std::span<const StageSchedule> stages, const TrainConfig& train,
                             FlowOptions flow_options = {}) {
  if (stages.empty()) throw Error("distill: at least one stage required");
  if (latents.size() != targets.conditions.size()) {
    throw DimensionError("distill: one latent per target pair required");
  }
  flow_options.track_mmd = false;
  flow_options.record_every = static_cast<std::size_t>(-1);

  DistillResult out;
  out.stack.position_dim = latents.dim();
  out.stack.condition_dim = targets.conditions.dim();
  Points u = latents;
  for (std::size_t l = 0; l < stages.size(); ++l) {
    const ParticleEnsemble start{u, targets.conditions, 0};
    const FlowTrajectory traj = run_conditional_flow(start, targets, stages[l], flow_options);
    TrainConfig cfg = train;
    cfg.seed = derive_seed(train.seed, "stage", l);
    TrainedRegressor fit = train_stage(u, targets.conditions, traj.final_state.positions, cfg);
    out.stage_losses.push_back(fit.final_loss);
    out.stack.loss_history.push_back(std::move(fit.loss_history));
    out.stack.regressors.push_back(std::move(fit.regressor));
    SurrogateStack last{out.stack.position_dim, out.stack.condition_dim,
                        {out.stack.regressors.back()}, {}, out.stack.latent};
    u = apply_stack(last, u, targets.conditions);
    out.last_flow_endpoint = traj.final_state.positions;
  }
  out.transported = std::move(u);
  return out;
}

// Persistence. Doubles are written by nlohmann::json in shortest round-trip
// form, so a load reproduces every finite parameter bit-for-bit.

inline nlohmann::json to_json(const SurrogateStack& stack) {
  nlohmann::json regs = nlohmann::json::array();
  for (const auto& reg : stack.regressors) {
    nlohmann::json layers = nlohmann::json::array();
    for (std::size_t l = 0; l < reg.layer_count(); ++l) {
      const auto w = reg.weight(l);
      const auto b = reg.bias(l);
      layers.push_back({{"weight", std::vector<double>(w.data(), w.data() + w.size())},
                        {"bias", std::vector<double>(b.data(), b.data() + b.size())}});
    }
    regs.push_back({{"widths", reg.widths()}, {"residual", reg.residual()}, {"layers", layers}});
  }
  return {{"format", "mmdflow-surrogate"},
          {"version", 1},
          {"dims", {{"d", stack.position_dim}, {"n", stack.condition_dim}}},
          {"L", stack.regressors.size()},
          {"activation", "silu"},
          {"latent", stack.latent},
          {"regressors", regs},
          {"training", {{"loss_history", stack.loss_history}}}};
}

inline SurrogateStack surrogate_from_json(const nlohmann::json& j) {
  try {
    if (j.at("format").get<std::string>() != "mmdflow-surrogate") {
      throw Error("surrogate file: unexpected format tag");
    }
    if (j.at("activation").get<std::string>() != "silu") {
      throw Error("surrogate file: unsupported activation");
    }
    SurrogateStack stack;
    stack.position_dim = j.at("dims").at("d").get<std::size_t>();
    stack.condition_dim = j.at("dims").at("n").get<std::size_t>();
    stack.latent = j.value("latent", std::string("gaussian"));
    for (const auto& r : j.at("regressors")) {
      Regressor reg(r.at("widths").get<std::vector<std::size_t>>(), r.at("residual").get<bool>());
      const auto& layers = r.at("layers");
      if (layers.size() != reg.layer_count()) throw Error("surrogate file: layer count mismatch");
      for (std::size_t l = 0; l < reg.layer_count(); ++l) {
        const auto w = layers[l].at("weight").get<std::vector<double>>();
        const auto b = layers[l].at("bias").get<std::vector<double>>();
        auto wm = reg.weight(l);
        auto bm = reg.bias(l);
        if (w.size() != static_cast<std::size_t>(wm.size()) ||
            b.size() != static_cast<std::size_t>(bm.size())) {
          throw Error("surrogate file: layer " + std::to_string(l) + " has wrong shape");
        }
        std::copy(w.begin(), w.end(), wm.data());
        std::copy(b.begin(), b.end(), bm.data());
      }
      if (reg.input_dim() != stack.position_dim + stack.condition_dim ||
          reg.output_dim() != stack.position_dim) {
        throw DimensionError("surrogate file: regressor widths disagree with dims");
      }
      stack.regressors.push_back(std::move(reg));
    }
    if (stack.regressors.size() != j.at("L").get<std::size_t>()) {
      throw Error("surrogate file: L disagrees with regressor count");
    }
    if (j.contains("training")) {
      stack.loss_history =
          j.at("training").at("loss_history").get<std::vector<std::vector<double>>>();
    }
    return stack;
  } catch (const nlohmann::json::exception& e) {
    throw Error(std::string("surrogate file: ") + e.what());
  }
}

}  // namespace mmdflow
