#pragma once

// Toy joint distributions P_{X,Y} with closed-form posteriors P_{X|Y=y}.

#include <cmath>
#include <cstdint>
#include <ostream>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "mmdflow/csv.hpp"
#include "mmdflow/points.hpp"
#include "mmdflow/random.hpp"

namespace mmdflow {

struct Provenance {
  std::string generator;
  nlohmann::json parameters;
  std::uint64_t seed = 0;
};

inline nlohmann::json to_json(const Provenance& p) {
  return {{"generator", p.generator}, {"parameters", p.parameters}, {"seed", p.seed}};
}

/// Rows are i.i.d. pairs (x_i, y_i).
struct JointDataset {
  Points x;
  Points y;
  Provenance provenance;
};

struct Gaussian {
  std::vector<double> mean;
  /// Row-major d x d covariance.
  std::vector<double> cov;
};

/// Finite Gaussian mixture; a single component for most oracles.
struct Posterior {
  std::vector<double> weights;
  std::vector<Gaussian> components;

  std::size_t dim() const { return components.front().mean.size(); }

  std::vector<double> mean() const {
    std::vector<double> m(dim(), 0.0);
    for (std::size_t k = 0; k < components.size(); ++k) {
      for (std::size_t c = 0; c < m.size(); ++c) m[c] += weights[k] * components[k].mean[c];
    }
    return m;
  }

  /// Marginal standard deviation of each coordinate.
  std::vector<double> stddev() const {
    const auto m = mean();
    const std::size_t d = dim();
    std::vector<double> s(d, 0.0);
    for (std::size_t k = 0; k < components.size(); ++k) {
      for (std::size_t c = 0; c < d; ++c) {
        const double dm = components[k].mean[c] - m[c];
        s[c] += weights[k] * (components[k].cov[c * d + c] + dm * dm);
      }
    }
    for (auto& v : s) v = std::sqrt(v);
    return s;
  }

  Points sample(std::size_t count, Rng& rng) const {
    const std::size_t d = dim();
    std::vector<Eigen::MatrixXd> chol;
    for (const auto& g : components) {
      const Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>
          cov(g.cov.data(), static_cast<Eigen::Index>(d), static_cast<Eigen::Index>(d));
      chol.emplace_back(Eigen::LLT<Eigen::MatrixXd>(cov).matrixL());
    }
    std::discrete_distribution<std::size_t> pick(weights.begin(), weights.end());
    std::normal_distribution<double> normal;
    Points out(count, d);
    Eigen::VectorXd z(static_cast<Eigen::Index>(d));
    for (std::size_t i = 0; i < count; ++i) {
      const std::size_t k = components.size() == 1 ? 0 : pick(rng);
      for (auto& v : z) v = normal(rng);
      const Eigen::VectorXd x = chol[k] * z;
      for (std::size_t c = 0; c < d; ++c) {
        out(i, c) = components[k].mean[c] + x(static_cast<Eigen::Index>(c));
      }
    }
    return out;
  }
};

enum class OracleKind { gaussian, discrete };

/// Closed-form posterior for a toy problem.
///   gaussian: linear observation y = A x + noise with Gaussian prior and noise.
///   discrete: y takes one of J atoms; given atom j, x ~ N(mean_j, std_j^2 I).
///             With one-hot atoms, a probability vector y yields the mixture
///             weighted by y.
class PosteriorOracle {
 public:
  struct LinearGaussian {
    Points a;  // n x d
    double sigma = 1.0;
    double prior_std = 1.0;
  };
  struct Atoms {
    Points atoms;  // J x n
    Points means;  // J x d
    std::vector<double> stds;
    bool one_hot = false;
  };

  explicit PosteriorOracle(LinearGaussian p) : params_(std::move(p)) {
    const auto& lg = std::get<LinearGaussian>(params_);
    if (!(lg.sigma > 0.0) || !(lg.prior_std > 0.0)) {
      throw Error("linear_gaussian: scales must be positive");
    }
    if (lg.a.dim() == 0 || lg.a.size() == 0) throw DimensionError("linear_gaussian: empty operator");
  }
  explicit PosteriorOracle(Atoms p) : params_(std::move(p)) {
    const auto& at = std::get<Atoms>(params_);
    if (at.atoms.size() < 2) throw Error("discrete oracle: at least two atoms required");
    if (at.means.size() != at.atoms.size() || at.stds.size() != at.atoms.size()) {
      throw DimensionError("discrete oracle: per-atom parameter counts differ");
    }
    for (double s : at.stds) {
      if (!(s > 0.0)) throw Error("discrete oracle: standard deviations must be positive");
    }
  }

  OracleKind kind() const noexcept {
    return std::holds_alternative<LinearGaussian>(params_) ? OracleKind::gaussian
                                                           : OracleKind::discrete;
  }

  std::size_t position_dim() const {
    if (const auto* lg = std::get_if<LinearGaussian>(&params_)) return lg->a.dim();
    return std::get<Atoms>(params_).means.dim();
  }
  std::size_t condition_dim() const {
    if (const auto* lg = std::get_if<LinearGaussian>(&params_)) return lg->a.size();
    return std::get<Atoms>(params_).atoms.dim();
  }

  /// Index of the atom equal to y (within 1e-9), or -1.
  std::ptrdiff_t atom_index(std::span<const double> y) const {
    const auto* at = std::get_if<Atoms>(&params_);
    if (at == nullptr || y.size() != at->atoms.dim()) return -1;
    for (std::size_t j = 0; j < at->atoms.size(); ++j) {
      bool same = true;
      for (std::size_t c = 0; c < y.size(); ++c) same = same && std::abs(at->atoms(j, c) - y[c]) <= 1e-9;
      if (same) return static_cast<std::ptrdiff_t>(j);
    }
    return -1;
  }

  const Points& atoms() const { return std::get<Atoms>(params_).atoms; }

  Posterior at(std::span<const double> y) const {
    if (y.size() != condition_dim()) throw DimensionError("posterior oracle: condition dimension mismatch");
    if (const auto* lg = std::get_if<LinearGaussian>(&params_)) return linear_posterior(*lg, y);
    const auto& at = std::get<Atoms>(params_);
    const std::size_t d = at.means.dim();
    auto component = [&](std::size_t j) {
      Gaussian g{std::vector<double>(at.means.row(j).begin(), at.means.row(j).end()),
                 std::vector<double>(d * d, 0.0)};
      for (std::size_t c = 0; c < d; ++c) g.cov[c * d + c] = at.stds[j] * at.stds[j];
      return g;
    };
    if (const auto j = atom_index(y); j >= 0) {
      return Posterior{{1.0}, {component(static_cast<std::size_t>(j))}};
    }
    if (at.one_hot) {
      double total = 0.0;
      bool valid = true;
      for (double w : y) {
        valid = valid && w >= 0.0;
        total += w;
      }
      if (valid && std::abs(total - 1.0) <= 1e-9) {
        Posterior post;
        for (std::size_t j = 0; j < y.size(); ++j) {
          if (y[j] == 0.0) continue;
          post.weights.push_back(y[j]);
          post.components.push_back(component(j));
        }
        return post;
      }
    }
    throw Error("discrete oracle: condition is not one of the atoms");
  }

  nlohmann::json to_json() const {
    auto rows = [](const Points& p) {
      std::vector<std::vector<double>> out;
      for (std::size_t i = 0; i < p.size(); ++i) out.emplace_back(p.row(i).begin(), p.row(i).end());
      return out;
    };
    if (const auto* lg = std::get_if<LinearGaussian>(&params_)) {
      return {{"kind", "gaussian"}, {"a", rows(lg->a)}, {"sigma", lg->sigma},
              {"prior_std", lg->prior_std}};
    }
    const auto& at = std::get<Atoms>(params_);
    return {{"kind", "discrete"}, {"atoms", rows(at.atoms)}, {"means", rows(at.means)},
            {"stds", at.stds}, {"one_hot", at.one_hot}};
  }

  static PosteriorOracle from_json(const nlohmann::json& j) {
    auto points = [](const nlohmann::json& v, const char* field) {
      const auto rows = v.at(field).get<std::vector<std::vector<double>>>();
      if (rows.empty()) throw Error(std::string("oracle: field '") + field + "' is empty");
      Points out(rows.size(), rows.front().size());
      for (std::size_t i = 0; i < rows.size(); ++i) {
        if (rows[i].size() != out.dim()) throw Error(std::string("oracle: ragged '") + field + "'");
        std::copy(rows[i].begin(), rows[i].end(), out.row(i).begin());
      }
      return out;
    };
    try {
      const auto kind = j.at("kind").get<std::string>();
      if (kind == "gaussian") {
        return PosteriorOracle(LinearGaussian{points(j, "a"), j.at("sigma").get<double>(),
                                              j.at("prior_std").get<double>()});
      }
      if (kind == "discrete") {
        return PosteriorOracle(Atoms{points(j, "atoms"), points(j, "means"),
                                     j.at("stds").get<std::vector<double>>(),
                                     j.value("one_hot", false)});
      }
      throw Error("oracle: unknown kind '" + kind + "'");
    } catch (const nlohmann::json::exception& e) {
      throw Error(std::string("oracle: ") + e.what());
    }
  }

 private:
  static Posterior linear_posterior(const LinearGaussian& lg, std::span<const double> y) {
    const auto n = static_cast<Eigen::Index>(lg.a.size());
    const auto d = static_cast<Eigen::Index>(lg.a.dim());
    const Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>> a(
        lg.a.values().data(), n, d);
    const Eigen::Map<const Eigen::VectorXd> yv(y.data(), n);
    const double inv_noise = 1.0 / (lg.sigma * lg.sigma);
    const Eigen::MatrixXd precision =
        Eigen::MatrixXd::Identity(d, d) / (lg.prior_std * lg.prior_std) +
        inv_noise * a.transpose() * a;
    const Eigen::MatrixXd cov = precision.inverse();
    const Eigen::VectorXd mean = inv_noise * cov * a.transpose() * yv;
    Gaussian g{std::vector<double>(mean.data(), mean.data() + d),
               std::vector<double>(static_cast<std::size_t>(d * d))};
    for (Eigen::Index r = 0; r < d; ++r) {
      for (Eigen::Index c = 0; c < d; ++c) g.cov[static_cast<std::size_t>(r * d + c)] = cov(r, c);
    }
    return Posterior{{1.0}, {std::move(g)}};
  }

  std::variant<LinearGaussian, Atoms> params_;
};

struct ToyProblem {
  JointDataset data;
  PosteriorOracle oracle;
};

namespace detail {

inline nlohmann::json rows_json(const Points& p) {
  nlohmann::json out = nlohmann::json::array();
  for (std::size_t i = 0; i < p.size(); ++i) out.push_back(std::vector<double>(p.row(i).begin(), p.row(i).end()));
  return out;
}

}  // namespace detail

/// x ~ N(0, prior_std^2 I), y = A x + eps with eps ~ N(0, sigma^2 I); A is n x d.
inline ToyProblem linear_gaussian(const Points& a, double sigma, double prior_std, std::size_t count,
                                  std::uint64_t seed) {
  PosteriorOracle oracle(PosteriorOracle::LinearGaussian{a, sigma, prior_std});
  const std::size_t n = a.size();
  const std::size_t d = a.dim();
  Rng rng = make_rng(seed, "dataset:linear_gaussian");
  std::normal_distribution<double> normal;
  JointDataset data{Points(count, d), Points(count, n),
                    {"linear_gaussian",
                     {{"a", detail::rows_json(a)}, {"sigma", sigma}, {"prior_std", prior_std},
                      {"count", count}},
                     seed}};
  for (std::size_t i = 0; i < count; ++i) {
    auto x = data.x.row(i);
    for (auto& v : x) v = prior_std * normal(rng);
    auto y = data.y.row(i);
    for (std::size_t r = 0; r < n; ++r) {
      double s = 0.0;
      for (std::size_t c = 0; c < d; ++c) s += a(r, c) * x[c];
      y[r] = s + sigma * normal(rng);
    }
  }
  return {std::move(data), std::move(oracle)};
}

/// Scalar forward operator y = a x + eps in one dimension.
inline ToyProblem linear_gaussian(double a, double sigma, double prior_std, std::size_t count,
                                  std::uint64_t seed) {
  return linear_gaussian(Points::column({a}), sigma, prior_std, count, seed);
}

/// Class label k uniform on K classes (one-hot y), x ~ N(mean_k, std^2 I).
inline ToyProblem labeled_clusters(const Points& means, double stddev, std::size_t count,
                                   std::uint64_t seed) {
  const std::size_t k = means.size();
  if (k < 2) throw Error("labeled_clusters: at least two classes required");
  if (!(stddev > 0.0)) throw Error("labeled_clusters: cluster std must be positive");
  Points atoms(k, k);
  for (std::size_t j = 0; j < k; ++j) atoms(j, j) = 1.0;
  PosteriorOracle oracle(
      PosteriorOracle::Atoms{atoms, means, std::vector<double>(k, stddev), true});
  Rng rng = make_rng(seed, "dataset:labeled_clusters");
  std::uniform_int_distribution<std::size_t> label(0, k - 1);
  std::normal_distribution<double> normal;
  JointDataset data{Points(count, means.dim()), Points(count, k),
                    {"labeled_clusters",
                     {{"means", detail::rows_json(means)}, {"std", stddev}, {"count", count}},
                     seed}};
  for (std::size_t i = 0; i < count; ++i) {
    const std::size_t j = label(rng);
    data.y(i, j) = 1.0;
    for (std::size_t c = 0; c < means.dim(); ++c) data.x(i, c) = means(j, c) + stddev * normal(rng);
  }
  return {std::move(data), std::move(oracle)};
}

/// y uniform over J atoms; given atom j, x ~ N(mean_j, std_j^2 I).
inline ToyProblem discrete_y_toy(const Points& atoms, const Points& means,
                                 const std::vector<double>& stds, std::size_t count,
                                 std::uint64_t seed) {
  if (atoms.size() < 2) throw Error("discrete_y_toy: at least two atoms required");
  PosteriorOracle oracle(PosteriorOracle::Atoms{atoms, means, stds, false});
  Rng rng = make_rng(seed, "dataset:discrete_y_toy");
  std::uniform_int_distribution<std::size_t> pick(0, atoms.size() - 1);
  std::normal_distribution<double> normal;
  JointDataset data{Points(count, means.dim()), Points(count, atoms.dim()),
                    {"discrete_y_toy",
                     {{"atoms", detail::rows_json(atoms)}, {"means", detail::rows_json(means)},
                      {"stds", stds}, {"count", count}},
                     seed}};
  for (std::size_t i = 0; i < count; ++i) {
    const std::size_t j = pick(rng);
    std::copy(atoms.row(j).begin(), atoms.row(j).end(), data.y.row(i).begin());
    for (std::size_t c = 0; c < means.dim(); ++c) data.x(i, c) = means(j, c) + stds[j] * normal(rng);
  }
  return {std::move(data), std::move(oracle)};
}

enum class LatentKind { gaussian, uniform };

inline LatentKind parse_latent_kind(std::string_view name) {
  if (name == "gaussian") return LatentKind::gaussian;
  if (name == "uniform") return LatentKind::uniform;
  throw Error("unknown latent kind '" + std::string(name) + "'");
}

inline std::string_view latent_kind_name(LatentKind k) {
  return k == LatentKind::gaussian ? "gaussian" : "uniform";
}

/// Standard normal or uniform on [-1, 1]^d draws.
inline Points latent_sampler(LatentKind kind, std::size_t dim, std::size_t count,
                             std::uint64_t seed) {
  if (dim == 0) throw DimensionError("latent_sampler: dimension must be positive");
  Rng rng = make_rng(seed, "latent");
  Points out(count, dim);
  if (kind == LatentKind::gaussian) {
    std::normal_distribution<double> normal;
    for (auto& v : out.values()) v = normal(rng);
  } else {
    std::uniform_real_distribution<double> uniform(-1.0, 1.0);
    for (auto& v : out.values()) v = uniform(rng);
  }
  return out;
}

/// CSV with header x_0..x_{d-1}, y_0..y_{n-1}.
inline void write_dataset_csv(std::ostream& os, const JointDataset& data) {
  csv::write_joint(os, data.x, data.y);
}

}  // namespace mmdflow
