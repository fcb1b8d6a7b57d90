#include "ng/kernels.hpp"

#include <cstdlib>
#include <stdexcept>

#if defined(__x86_64__) || defined(_M_X64)
#include <cpuid.h>
#endif

namespace ng::kernels {
namespace {

bool cpu_has_avx2() {
#if defined(__x86_64__) || defined(_M_X64)
  unsigned int eax = 0, ebx = 0, ecx = 0, edx = 0;
  if (!__get_cpuid_count(7, 0, &eax, &ebx, &ecx, &edx)) return false;
  return (ebx & (1u << 5)) != 0;  // CPUID.(EAX=7,ECX=0):EBX.AVX2
#else
  return false;
#endif
}

const KernelTable& select() {
  const char* want = std::getenv("NEUROGATE_KERNELS");
  if (want != nullptr) {
    std::string w(want);
    if (w == "scalar") return scalar_table();
    if (w == "avx2") {
      if (!avx2_supported()) throw std::runtime_error("NEUROGATE_KERNELS=avx2 but AVX2 is unavailable");
      return *avx2_table();
    }
    throw std::runtime_error("NEUROGATE_KERNELS must be 'scalar' or 'avx2', got '" + w + "'");
  }
  if (avx2_supported()) return *avx2_table();
  return scalar_table();
}

}  // namespace

bool avx2_supported() { return avx2_table() != nullptr && cpu_has_avx2(); }

const KernelTable& active() {
  static const KernelTable& t = select();
  return t;
}

std::vector<std::string> available() {
  std::vector<std::string> out = {"scalar"};
  if (avx2_supported()) out.emplace_back("avx2");
  return out;
}

void matmul_a_bt(const double* a, const double* b, double* c, int m, int k, int n, bool accumulate) {
  std::vector<double> bt(static_cast<size_t>(k) * static_cast<size_t>(n));
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < k; ++j)
      bt[static_cast<size_t>(j) * n + i] = b[static_cast<size_t>(i) * k + j];
  active().matmul(a, bt.data(), c, m, k, n, accumulate);
}

}  // namespace ng::kernels
