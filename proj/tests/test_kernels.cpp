#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cstring>

#include "ng/kernels.hpp"
#include "ng/rng.hpp"
#include "ng/tensor.hpp"
#include "test_util.hpp"

using namespace ng;

namespace {

Tensor naive_matmul(const Tensor& a, const Tensor& b) {
  Tensor c({a.rows(), b.cols()});
  for (int64_t i = 0; i < a.rows(); ++i)
    for (int64_t j = 0; j < b.cols(); ++j) {
      double s = 0.0;
      for (int64_t k = 0; k < a.cols(); ++k) s += a.at(i, k) * b.at(k, j);
      c.at(i, j) = s;
    }
  return c;
}

bool bits_equal(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() != b.size()) return false;
  return a.empty() || std::memcmp(a.data(), b.data(), a.size() * sizeof(double)) == 0;
}

}  // namespace

TEST_CASE("matmul matches a naive triple loop") {
  Rng rng(7);
  for (int iter = 0; iter < 20; ++iter) {
    int m = 1 + rng.below_int(9), k = 1 + rng.below_int(9), n = 1 + rng.below_int(17);
    Tensor a = ngtest::random_tensor({m, k}, rng);
    Tensor b = ngtest::random_tensor({k, n}, rng);
    Tensor c({m, n});
    kernels::active().matmul(a.data.data(), b.data.data(), c.data.data(), m, k, n, false);
    Tensor ref = naive_matmul(a, b);
    for (int64_t i = 0; i < c.numel(); ++i) CHECK(ngtest::rel_err(c.at(i), ref.at(i)) < 1e-12);
  }
}

TEST_CASE("matmul_at_b computes A^T * B") {
  Rng rng(8);
  int m = 5, k = 7, n = 6;
  Tensor a = ngtest::random_tensor({m, k}, rng);
  Tensor b = ngtest::random_tensor({m, n}, rng);
  Tensor c({k, n});
  kernels::active().matmul_at_b(a.data.data(), b.data.data(), c.data.data(), m, k, n, false);
  Tensor ref = naive_matmul(transpose(a), b);
  for (int64_t i = 0; i < c.numel(); ++i) CHECK(ngtest::rel_err(c.at(i), ref.at(i)) < 1e-12);
}

TEST_CASE("matmul_a_bt computes A * B^T") {
  Rng rng(9);
  int m = 4, k = 6, n = 5;
  Tensor a = ngtest::random_tensor({m, k}, rng);
  Tensor b = ngtest::random_tensor({n, k}, rng);
  Tensor c({m, n});
  kernels::matmul_a_bt(a.data.data(), b.data.data(), c.data.data(), m, k, n, false);
  Tensor ref = naive_matmul(a, transpose(b));
  for (int64_t i = 0; i < c.numel(); ++i) CHECK(ngtest::rel_err(c.at(i), ref.at(i)) < 1e-12);
}

TEST_CASE("accumulate flag adds into the output") {
  Rng rng(10);
  int m = 3, k = 4, n = 5;
  Tensor a = ngtest::random_tensor({m, k}, rng);
  Tensor b = ngtest::random_tensor({k, n}, rng);
  Tensor c = ngtest::random_tensor({m, n}, rng);
  Tensor c2 = c;
  kernels::active().matmul(a.data.data(), b.data.data(), c.data.data(), m, k, n, true);
  Tensor prod({m, n});
  kernels::active().matmul(a.data.data(), b.data.data(), prod.data.data(), m, k, n, false);
  for (int64_t i = 0; i < c.numel(); ++i) CHECK(c.at(i) == doctest::Approx(c2.at(i) + prod.at(i)).epsilon(1e-14));
}

TEST_CASE("scalar and avx2 variants are bit-identical") {
  if (!kernels::avx2_supported()) {
    MESSAGE("AVX2 unavailable; equivalence suite skipped");
    return;
  }
  const kernels::KernelTable& sc = kernels::scalar_table();
  const kernels::KernelTable& vx = *kernels::avx2_table();
  Rng rng(11);

  // matmul family over shapes that hit the 8-wide, 4-wide and tail paths
  for (int iter = 0; iter < 40; ++iter) {
    int m = 1 + rng.below_int(12), k = 1 + rng.below_int(12), n = 1 + rng.below_int(21);
    Tensor a = ngtest::random_tensor({m, k}, rng);
    Tensor b = ngtest::random_tensor({k, n}, rng);
    Tensor c1({m, n}), c2({m, n});
    sc.matmul(a.data.data(), b.data.data(), c1.data.data(), m, k, n, false);
    vx.matmul(a.data.data(), b.data.data(), c2.data.data(), m, k, n, false);
    REQUIRE(bits_equal(c1.data, c2.data));

    Tensor bt = ngtest::random_tensor({m, n}, rng);
    Tensor d1({k, n}), d2({k, n});
    sc.matmul_at_b(a.data.data(), bt.data.data(), d1.data.data(), m, k, n, false);
    vx.matmul_at_b(a.data.data(), bt.data.data(), d2.data.data(), m, k, n, false);
    REQUIRE(bits_equal(d1.data, d2.data));
  }

  // elementwise ops across tail lengths
  for (size_t n : {1u, 2u, 3u, 4u, 5u, 7u, 8u, 9u, 31u, 64u, 100u}) {
    Tensor a = ngtest::random_tensor({static_cast<int64_t>(n)}, rng);
    Tensor b = ngtest::random_tensor({static_cast<int64_t>(n)}, rng);
    Tensor o1({static_cast<int64_t>(n)}), o2({static_cast<int64_t>(n)});
    sc.add(a.data.data(), b.data.data(), o1.data.data(), n);
    vx.add(a.data.data(), b.data.data(), o2.data.data(), n);
    REQUIRE(bits_equal(o1.data, o2.data));
    sc.sub(a.data.data(), b.data.data(), o1.data.data(), n);
    vx.sub(a.data.data(), b.data.data(), o2.data.data(), n);
    REQUIRE(bits_equal(o1.data, o2.data));
    sc.mul(a.data.data(), b.data.data(), o1.data.data(), n);
    vx.mul(a.data.data(), b.data.data(), o2.data.data(), n);
    REQUIRE(bits_equal(o1.data, o2.data));
    sc.scale(a.data.data(), 1.7, o1.data.data(), n);
    vx.scale(a.data.data(), 1.7, o2.data.data(), n);
    REQUIRE(bits_equal(o1.data, o2.data));
    Tensor y1 = b, y2 = b;
    sc.axpy(-0.3, a.data.data(), y1.data.data(), n);
    vx.axpy(-0.3, a.data.data(), y2.data.data(), n);
    REQUIRE(bits_equal(y1.data, y2.data));
  }
}

TEST_CASE("kernel selection respects the environment override") {
  auto names = kernels::available();
  CHECK(names.size() >= 1);
  CHECK(names[0] == "scalar");
  std::string active = kernels::active().name;
  bool known = false;
  for (const auto& n : names) known = known || (n == active);
  CHECK(known);
}
