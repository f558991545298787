#pragma once

#include <cmath>
#include <cstdint>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

#include "drift/errors.hpp"

namespace drift {

// Dense row-major tensor of doubles. Plain value type: shape and data are
// public and product(shape) == data.size() is maintained by construction.
struct Tensor {
  std::vector<int> shape;
  std::vector<double> data;

  Tensor() = default;

  bool operator==(const Tensor&) const = default;

  static Tensor zeros(std::vector<int> shape) {
    Tensor t;
    t.shape = std::move(shape);
    t.data.assign(t.count(), 0.0);
    return t;
  }

  static Tensor full(std::vector<int> shape, double v) {
    Tensor t = zeros(std::move(shape));
    std::fill(t.data.begin(), t.data.end(), v);
    return t;
  }

  static Tensor from(std::vector<int> shape, std::vector<double> values) {
    Tensor t;
    t.shape = std::move(shape);
    t.data = std::move(values);
    if (t.count() != t.data.size()) {
      throw DimensionError("Tensor::from: shape does not match value count");
    }
    return t;
  }

  static Tensor scalar(double v) { return from({1}, {v}); }

  std::size_t count() const {
    std::size_t n = 1;
    for (int d : shape) {
      if (d <= 0) throw DimensionError("Tensor: non-positive dimension");
      n *= static_cast<std::size_t>(d);
    }
    return n;
  }

  std::size_t size() const { return data.size(); }
  int rank() const { return static_cast<int>(shape.size()); }
  int rows() const { return shape.empty() ? 1 : shape[0]; }
  int cols() const { return rank() < 2 ? 1 : shape[1]; }

  double& at(int i) { return data[static_cast<std::size_t>(i)]; }
  double at(int i) const { return data[static_cast<std::size_t>(i)]; }
  double& at(int r, int c) {
    return data[static_cast<std::size_t>(r) * cols() + c];
  }
  double at(int r, int c) const {
    return data[static_cast<std::size_t>(r) * cols() + c];
  }

  double item() const {
    if (size() != 1) throw DimensionError("Tensor::item: not a scalar");
    return data[0];
  }

  bool same_shape(const Tensor& o) const { return shape == o.shape; }
};

inline bool all_finite(const Tensor& t) {
  for (double v : t.data) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

inline std::string shape_str(const Tensor& t) {
  std::string s = "[";
  for (std::size_t i = 0; i < t.shape.size(); ++i) {
    if (i) s += "x";
    s += std::to_string(t.shape[i]);
  }
  return s + "]";
}

}  // namespace drift
