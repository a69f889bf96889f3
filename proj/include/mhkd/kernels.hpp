#pragma once

// Arithmetic inner loops shared by the tensor ops. Each kernel has a scalar
// reference implementation plus SIMD variants (AVX2+FMA on x86-64, NEON on
// AArch64); the variant is picked once at startup from CPUID, overridable
// with MHKD_KERNELS=scalar|avx2|neon or set_isa().

#include <cstddef>
#include <string_view>

namespace mhkd::kernels {

enum class Isa { kScalar, kAvx2, kNeon };
enum class Trans { kNo, kYes };

std::string_view isa_name(Isa isa);
Isa parse_isa(std::string_view name);
bool isa_supported(Isa isa);
Isa active_isa();
// Throws ConfigError if the ISA is not supported on this machine/build.
void set_isa(Isa isa);

class ScopedIsa {
 public:
  explicit ScopedIsa(Isa isa) : previous_(active_isa()) { set_isa(isa); }
  ~ScopedIsa() { set_isa(previous_); }
  ScopedIsa(const ScopedIsa&) = delete;
  ScopedIsa& operator=(const ScopedIsa&) = delete;

 private:
  Isa previous_;
};

// Row-major C[m,n] = op(A)[m,k] * op(B)[k,n], added onto C when accumulate.
// op(A) is A (lda >= k) or A^T with A stored [k,m] (lda >= m); likewise B.
template <typename T>
void gemm(Trans trans_a, Trans trans_b, int m, int n, int k, const T* a, int lda,
          const T* b, int ldb, T* c, int ldc, bool accumulate);

// Momentum SGD: v = momentum*v + (g + weight_decay*p); p -= lr*v.
template <typename T>
void sgd_momentum(T* param, const T* grad, T* velocity, std::size_t n, T lr, T momentum,
                  T weight_decay);

}  // namespace mhkd::kernels
