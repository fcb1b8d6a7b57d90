#pragma once

#include <cstddef>
#include <string>
#include <vector>

namespace ng::kernels {

// Data-parallel f64 kernels behind a runtime-selected dispatch table.
//
// Two variants ship: a scalar reference implementation and an AVX2 one.
// Both are written with the same accumulation order (vectorization runs
// across independent output elements, never across a reduction), so the
// variants produce bit-identical results. The equivalence suite asserts
// exact equality; selecting a different table can never change a run's
// output bytes.
//
// Matmul layouts (row-major):
//   matmul      C[m,n] (+)= A[m,k] * B[k,n]
//   matmul_at_b C[k,n] (+)= A^T    * B       with A stored [m,k], B [m,n]
struct KernelTable {
  const char* name;
  void (*matmul)(const double* a, const double* b, double* c, int m, int k, int n, bool accumulate);
  void (*matmul_at_b)(const double* a, const double* b, double* c, int m, int k, int n, bool accumulate);
  void (*add)(const double* a, const double* b, double* out, size_t n);
  void (*sub)(const double* a, const double* b, double* out, size_t n);
  void (*mul)(const double* a, const double* b, double* out, size_t n);
  void (*scale)(const double* a, double alpha, double* out, size_t n);
  void (*axpy)(double alpha, const double* x, double* y, size_t n);  // y += alpha*x
};

const KernelTable& scalar_table();
bool avx2_supported();           // compiled in AND runtime CPU support
const KernelTable* avx2_table(); // nullptr when not compiled in

// The active table. Picked once per process: NEUROGATE_KERNELS=scalar|avx2
// overrides, otherwise the widest supported variant wins. Thread-safe.
const KernelTable& active();

// C[m,n] (+)= A[m,k] * B^T with B stored [n,k]. Composed from an exact
// transpose plus the active matmul, so it inherits bit-stability.
void matmul_a_bt(const double* a, const double* b, double* c, int m, int k, int n, bool accumulate);

// Names of every variant usable on this machine.
std::vector<std::string> available();

}  // namespace ng::kernels
