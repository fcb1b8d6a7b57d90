#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace ng {

class Rng;

// Dense row-major tensor of 64-bit floats. Rank 0 is a scalar with one
// element. All numeric state in the project lives in these; 64-bit is
// deliberate, attribution aggregation compares values at 1e-12 tolerances.
struct Tensor {
  std::vector<int64_t> shape;
  std::vector<double> data;

  Tensor() = default;
  explicit Tensor(std::vector<int64_t> s);

  static Tensor scalar(double v);
  static Tensor zeros(std::vector<int64_t> s);
  static Tensor full(std::vector<int64_t> s, double v);
  static Tensor vector(std::vector<double> v);
  static Tensor matrix(int64_t r, int64_t c, std::vector<double> v);
  static Tensor randn(std::vector<int64_t> s, Rng& rng, double stddev = 1.0);

  int64_t numel() const { return static_cast<int64_t>(data.size()); }
  int64_t rank() const { return static_cast<int64_t>(shape.size()); }
  bool is_scalar() const { return shape.empty(); }

  // 2-D accessors; dimension checks are asserts, not contract errors.
  int64_t rows() const;
  int64_t cols() const;
  double& at(int64_t i) { return data[static_cast<size_t>(i)]; }
  double at(int64_t i) const { return data[static_cast<size_t>(i)]; }
  double& at(int64_t i, int64_t j) { return data[static_cast<size_t>(i * cols() + j)]; }
  double at(int64_t i, int64_t j) const { return data[static_cast<size_t>(i * cols() + j)]; }
  double item() const;

  bool same_shape(const Tensor& o) const { return shape == o.shape; }
  bool all_finite() const;
  std::string shape_str() const;
};

// Shape product, validating non-negative dims.
int64_t shape_numel(const std::vector<int64_t>& shape);

Tensor transpose(const Tensor& m);

}  // namespace ng
