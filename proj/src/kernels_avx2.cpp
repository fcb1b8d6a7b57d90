#include "ng/kernels.hpp"

// AVX2 variants. Vector lanes always span independent output elements, and
// the reduction index stays in the outer loop, so each element sees the same
// add/mul sequence as the scalar reference. No FMA: separate mul and add
// keep the rounding identical to the reference.

#if defined(__AVX2__)

#include <immintrin.h>

#include <cstring>

namespace ng::kernels {
namespace {

inline void accum_row_avx2(const double* brow, double aik, double* crow, int n) {
  const __m256d va = _mm256_set1_pd(aik);
  int j = 0;
  for (; j + 8 <= n; j += 8) {
    __m256d c0 = _mm256_loadu_pd(crow + j);
    __m256d c1 = _mm256_loadu_pd(crow + j + 4);
    __m256d b0 = _mm256_loadu_pd(brow + j);
    __m256d b1 = _mm256_loadu_pd(brow + j + 4);
    c0 = _mm256_add_pd(c0, _mm256_mul_pd(va, b0));
    c1 = _mm256_add_pd(c1, _mm256_mul_pd(va, b1));
    _mm256_storeu_pd(crow + j, c0);
    _mm256_storeu_pd(crow + j + 4, c1);
  }
  for (; j + 4 <= n; j += 4) {
    __m256d c0 = _mm256_loadu_pd(crow + j);
    __m256d b0 = _mm256_loadu_pd(brow + j);
    _mm256_storeu_pd(crow + j, _mm256_add_pd(c0, _mm256_mul_pd(va, b0)));
  }
  for (; j < n; ++j) crow[j] += aik * brow[j];
}

void matmul_avx2(const double* a, const double* b, double* c, int m, int k, int n, bool accumulate) {
  if (!accumulate) std::memset(c, 0, sizeof(double) * static_cast<size_t>(m) * static_cast<size_t>(n));
  for (int i = 0; i < m; ++i) {
    const double* arow = a + static_cast<size_t>(i) * k;
    double* crow = c + static_cast<size_t>(i) * n;
    for (int kk = 0; kk < k; ++kk) accum_row_avx2(b + static_cast<size_t>(kk) * n, arow[kk], crow, n);
  }
}

void matmul_at_b_avx2(const double* a, const double* b, double* c, int m, int k, int n, bool accumulate) {
  if (!accumulate) std::memset(c, 0, sizeof(double) * static_cast<size_t>(k) * static_cast<size_t>(n));
  for (int i = 0; i < m; ++i) {
    const double* arow = a + static_cast<size_t>(i) * k;
    const double* brow = b + static_cast<size_t>(i) * n;
    for (int kk = 0; kk < k; ++kk) accum_row_avx2(brow, arow[kk], c + static_cast<size_t>(kk) * n, n);
  }
}

void add_avx2(const double* a, const double* b, double* out, size_t n) {
  size_t i = 0;
  for (; i + 4 <= n; i += 4)
    _mm256_storeu_pd(out + i, _mm256_add_pd(_mm256_loadu_pd(a + i), _mm256_loadu_pd(b + i)));
  for (; i < n; ++i) out[i] = a[i] + b[i];
}

void sub_avx2(const double* a, const double* b, double* out, size_t n) {
  size_t i = 0;
  for (; i + 4 <= n; i += 4)
    _mm256_storeu_pd(out + i, _mm256_sub_pd(_mm256_loadu_pd(a + i), _mm256_loadu_pd(b + i)));
  for (; i < n; ++i) out[i] = a[i] - b[i];
}

void mul_avx2(const double* a, const double* b, double* out, size_t n) {
  size_t i = 0;
  for (; i + 4 <= n; i += 4)
    _mm256_storeu_pd(out + i, _mm256_mul_pd(_mm256_loadu_pd(a + i), _mm256_loadu_pd(b + i)));
  for (; i < n; ++i) out[i] = a[i] * b[i];
}

void scale_avx2(const double* a, double alpha, double* out, size_t n) {
  const __m256d va = _mm256_set1_pd(alpha);
  size_t i = 0;
  for (; i + 4 <= n; i += 4) _mm256_storeu_pd(out + i, _mm256_mul_pd(_mm256_loadu_pd(a + i), va));
  for (; i < n; ++i) out[i] = a[i] * alpha;
}

void axpy_avx2(double alpha, const double* x, double* y, size_t n) {
  const __m256d va = _mm256_set1_pd(alpha);
  size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    __m256d vy = _mm256_loadu_pd(y + i);
    vy = _mm256_add_pd(vy, _mm256_mul_pd(va, _mm256_loadu_pd(x + i)));
    _mm256_storeu_pd(y + i, vy);
  }
  for (; i < n; ++i) y[i] += alpha * x[i];
}

}  // namespace

const KernelTable* avx2_table() {
  static const KernelTable t = {
      "avx2", matmul_avx2, matmul_at_b_avx2, add_avx2, sub_avx2,
      mul_avx2, scale_avx2, axpy_avx2,
  };
  return &t;
}

}  // namespace ng::kernels

#else

namespace ng::kernels {
const KernelTable* avx2_table() { return nullptr; }
}  // namespace ng::kernels

#endif
