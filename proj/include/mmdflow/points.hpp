#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstring>
#include <initializer_list>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace mmdflow {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class DimensionError : public Error {
 public:
  using Error::Error;
};

/// Raised when a flow or a training run produces non-finite or runaway values.
class DivergenceError : public Error {
 public:
  DivergenceError(const std::string& what, std::size_t step)
      : Error(what + " (step " + std::to_string(step) + ")"), step_(step) {}
  std::size_t step() const noexcept { return step_; }

 private:
  std::size_t step_;
};

/// Dense row-major block of `size()` points with `dim()` coordinates each.
/// A zero-width block (dim() == 0) represents an absent condition vector.
class Points {
 public:
  Points() = default;
  Points(std::size_t rows, std::size_t cols, double fill = 0.0)
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}
  Points(std::size_t rows, std::size_t cols, std::vector<double> values)
      : rows_(rows), cols_(cols), data_(std::move(values)) {
    if (data_.size() != rows_ * cols_) {
      throw DimensionError("Points: value count " + std::to_string(data_.size()) +
                           " does not match " + std::to_string(rows_) + "x" +
                           std::to_string(cols_));
    }
  }

  static Points from_rows(std::initializer_list<std::initializer_list<double>> rows) {
    const std::size_t cols = rows.size() == 0 ? 0 : rows.begin()->size();
    Points out(rows.size(), cols);
    std::size_t i = 0;
    for (const auto& r : rows) {
      if (r.size() != cols) throw DimensionError("Points::from_rows: ragged rows");
      std::copy(r.begin(), r.end(), out.row(i++).begin());
    }
    return out;
  }

  /// One-dimensional points, one per value.
  static Points column(std::span<const double> values) {
    return Points(values.size(), 1, std::vector<double>(values.begin(), values.end()));
  }
  static Points column(std::initializer_list<double> values) {
    return column(std::span<const double>(values.begin(), values.size()));
  }

  std::size_t size() const noexcept { return rows_; }
  std::size_t dim() const noexcept { return cols_; }
  bool empty() const noexcept { return rows_ == 0; }

  std::span<double> row(std::size_t i) noexcept { return {data_.data() + i * cols_, cols_}; }
  std::span<const double> row(std::size_t i) const noexcept {
    return {data_.data() + i * cols_, cols_};
  }
  double& operator()(std::size_t i, std::size_t j) noexcept { return data_[i * cols_ + j]; }
  double operator()(std::size_t i, std::size_t j) const noexcept { return data_[i * cols_ + j]; }

  std::span<double> values() noexcept { return data_; }
  std::span<const double> values() const noexcept { return data_; }

  friend bool operator==(const Points&, const Points&) = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

/// True when both blocks have the same shape and identical bytes.
inline bool bitwise_equal(const Points& a, const Points& b) {
  return a.size() == b.size() && a.dim() == b.dim() &&
         (a.values().empty() ||
          std::memcmp(a.values().data(), b.values().data(), a.values().size_bytes()) == 0);
}

inline bool all_finite(const Points& p) {
  return std::all_of(p.values().begin(), p.values().end(),
                     [](double v) { return std::isfinite(v); });
}

/// Row-wise concatenation [a | b]; both blocks must have the same number of rows.
inline Points concat_columns(const Points& a, const Points& b) {
  if (a.size() != b.size()) {
    throw DimensionError("concat_columns: row counts differ (" + std::to_string(a.size()) +
                         " vs " + std::to_string(b.size()) + ")");
  }
  Points out(a.size(), a.dim() + b.dim());
  for (std::size_t i = 0; i < a.size(); ++i) {
    auto r = out.row(i);
    std::copy(a.row(i).begin(), a.row(i).end(), r.begin());
    std::copy(b.row(i).begin(), b.row(i).end(), r.begin() + static_cast<std::ptrdiff_t>(a.dim()));
  }
  return out;
}

inline Points take_columns(const Points& a, std::size_t first, std::size_t count) {
  if (first + count > a.dim()) throw DimensionError("take_columns: column range out of bounds");
  Points out(a.size(), count);
  for (std::size_t i = 0; i < a.size(); ++i) {
    auto src = a.row(i).subspan(first, count);
    std::copy(src.begin(), src.end(), out.row(i).begin());
  }
  return out;
}

inline Points take_rows(const Points& a, std::span<const std::size_t> rows) {
  Points out(rows.size(), a.dim());
  for (std::size_t k = 0; k < rows.size(); ++k) {
    std::copy(a.row(rows[k]).begin(), a.row(rows[k]).end(), out.row(k).begin());
  }
  return out;
}

/// Largest Euclidean distance between any coordinate-wise bounding box corners.
inline double bounding_diameter(const Points& p) {
  if (p.empty()) return 0.0;
  double sq = 0.0;
  for (std::size_t j = 0; j < p.dim(); ++j) {
    double lo = p(0, j), hi = p(0, j);
    for (std::size_t i = 1; i < p.size(); ++i) {
      lo = std::min(lo, p(i, j));
      hi = std::max(hi, p(i, j));
    }
    sq += (hi - lo) * (hi - lo);
  }
  return std::sqrt(sq);
}

namespace detail {

inline double euclidean_distance(std::span<const double> a, std::span<const double> b) noexcept {
  double s = 0.0;
  for (std::size_t k = 0; k < a.size(); ++k) {
    const double t = a[k] - b[k];
    s += t * t;
  }
  return std::sqrt(s);
}

inline double euclidean_norm(std::span<const double> a) noexcept {
  double s = 0.0;
  for (double v : a) s += v * v;
  return std::sqrt(s);
}

}  // namespace detail

}  // namespace mmdflow
