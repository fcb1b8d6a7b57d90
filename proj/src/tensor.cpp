#include "ng/tensor.hpp"

#include <cassert>
#include <cmath>
#include <sstream>
#include <stdexcept>

#include "ng/rng.hpp"

namespace ng {

int64_t shape_numel(const std::vector<int64_t>& shape) {
  int64_t n = 1;
  for (int64_t d : shape) {
    if (d < 0) throw std::invalid_argument("tensor shape has negative dimension");
    n *= d;
  }
  return n;
}

Tensor::Tensor(std::vector<int64_t> s) : shape(std::move(s)) {
  data.assign(static_cast<size_t>(shape_numel(shape)), 0.0);
}

Tensor Tensor::scalar(double v) {
  Tensor t;
  t.data.assign(1, v);
  return t;
}

Tensor Tensor::zeros(std::vector<int64_t> s) { return Tensor(std::move(s)); }

Tensor Tensor::full(std::vector<int64_t> s, double v) {
  Tensor t(std::move(s));
  for (auto& x : t.data) x = v;
  return t;
}

Tensor Tensor::vector(std::vector<double> v) {
  Tensor t;
  t.shape = {static_cast<int64_t>(v.size())};
  t.data = std::move(v);
  return t;
}

Tensor Tensor::matrix(int64_t r, int64_t c, std::vector<double> v) {
  if (static_cast<int64_t>(v.size()) != r * c)
    throw std::invalid_argument("matrix literal size does not match shape");
  Tensor t;
  t.shape = {r, c};
  t.data = std::move(v);
  return t;
}

Tensor Tensor::randn(std::vector<int64_t> s, Rng& rng, double stddev) {
  Tensor t(std::move(s));
  for (auto& x : t.data) x = rng.normal(0.0, stddev);
  return t;
}

int64_t Tensor::rows() const {
  assert(shape.size() == 2);
  return shape[0];
}

int64_t Tensor::cols() const {
  assert(shape.size() == 2);
  return shape[1];
}

double Tensor::item() const {
  if (data.size() != 1) throw std::invalid_argument("item() on non-scalar tensor " + shape_str());
  return data[0];
}

bool Tensor::all_finite() const {
  for (double v : data)
    if (!std::isfinite(v)) return false;
  return true;
}

std::string Tensor::shape_str() const {
  std::ostringstream os;
  os << "[";
  for (size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ",";
    os << shape[i];
  }
  os << "]";
  return os.str();
}

Tensor transpose(const Tensor& m) {
  if (m.rank() != 2) throw std::invalid_argument("transpose expects rank-2 tensor, got " + m.shape_str());
  Tensor out({m.cols(), m.rows()});
  for (int64_t i = 0; i < m.rows(); ++i)
    for (int64_t j = 0; j < m.cols(); ++j) out.at(j, i) = m.at(i, j);
  return out;
}

}  // namespace ng
