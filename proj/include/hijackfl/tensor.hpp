#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <numeric>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "hijackfl/errors.hpp"

namespace hijackfl {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

inline std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

/// Dense row-major array of doubles with an optional gradient buffer.
struct Tensor {
  Shape shape;
  std::vector<double> values;
  bool requires_grad = false;
  std::optional<std::vector<double>> grad;

  Tensor() = default;
  Tensor(Shape s, std::vector<double> v, bool track = false)
      : shape(std::move(s)), values(std::move(v)), requires_grad(track) {
    if (shape_size(shape) != values.size()) {
      throw DimensionError("tensor shape " + shape_string(shape) + " holds " +
                           std::to_string(shape_size(shape)) +
                           " values, got " + std::to_string(values.size()));
    }
  }

  static Tensor zeros(Shape s, bool track = false) {
    const auto n = shape_size(s);
    return Tensor(std::move(s), std::vector<double>(n, 0.0), track);
  }
  static Tensor scalar(double v) { return Tensor({}, {v}); }
  static Tensor vector(std::vector<double> v) {
    const auto n = v.size();
    return Tensor({n}, std::move(v));
  }
  static Tensor matrix(std::size_t rows, std::size_t cols,
                       std::vector<double> v) {
    return Tensor({rows, cols}, std::move(v));
  }

  std::size_t size() const { return values.size(); }
  std::size_t rank() const { return shape.size(); }
  std::size_t rows() const { return shape.empty() ? 1 : shape.front(); }
  std::size_t cols() const { return shape.size() < 2 ? size() : shape[1]; }

  double& operator[](std::size_t i) { return values[i]; }
  double operator[](std::size_t i) const { return values[i]; }
  double at(std::size_t r, std::size_t c) const { return values[r * cols() + c]; }

  bool all_finite() const {
    for (double v : values)
      if (!std::isfinite(v)) return false;
    return true;
  }

  /// Values and shape only; gradient state is not part of equality.
  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.shape == b.shape && a.values == b.values;
  }
};

}  // namespace hijackfl
