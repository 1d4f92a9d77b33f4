#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "corfsep/error.hpp"
#include "corfsep/rng.hpp"

namespace corfsep::nn {

// Dense row-major matrix of doubles. Vectors are 1xN rows; scalars 1x1.
struct Tensor {
  int rows = 0;
  int cols = 0;
  std::vector<double> d;

  Tensor() = default;
  Tensor(int r, int c) : rows(r), cols(c), d(static_cast<size_t>(r) * c, 0.0) {}

  static Tensor zeros(int r, int c) { return Tensor(r, c); }
  static Tensor full(int r, int c, double v) {
    Tensor t(r, c);
    std::fill(t.d.begin(), t.d.end(), v);
    return t;
  }
  static Tensor scalar(double v) { return full(1, 1, v); }
  static Tensor row(std::vector<double> v) {
    Tensor t;
    t.rows = 1;
    t.cols = static_cast<int>(v.size());
    t.d = std::move(v);
    return t;
  }
  static Tensor uniform(int r, int c, double lo, double hi, Rng& rng) {
    Tensor t(r, c);
    for (auto& x : t.d) x = rng.uniform(lo, hi);
    return t;
  }

  int64_t numel() const { return static_cast<int64_t>(rows) * cols; }
  double& at(int i, int j) { return d[static_cast<size_t>(i) * cols + j]; }
  double at(int i, int j) const { return d[static_cast<size_t>(i) * cols + j]; }
  bool same_shape(const Tensor& o) const { return rows == o.rows && cols == o.cols; }

  bool all_finite() const {
    for (double v : d)
      if (!std::isfinite(v)) return false;
    return true;
  }
};

}  // namespace corfsep::nn
