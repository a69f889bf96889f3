#pragma once

#include <cstddef>

namespace mhkd::kernels::detail {

// C[m,n] += A[m,k] * B[k,n], all row-major with explicit leading dimensions.
template <typename T>
using GemmNN = void (*)(int m, int n, int k, const T* a, int lda, const T* b, int ldb, T* c,
                        int ldc);

template <typename T>
using SgdMomentum = void (*)(T* param, const T* grad, T* velocity, std::size_t n, T lr,
                             T momentum, T weight_decay);

// Same contract, except B is given transposed: B[k,n] lives at b[j*ldb + p].
template <typename T>
using GemmNT = GemmNN<T>;

struct KernelTable {
  GemmNN<float> gemm_f32;
  GemmNN<double> gemm_f64;
  SgdMomentum<float> sgd_f32;
  SgdMomentum<double> sgd_f64;
  // Optional; when null the dispatcher transposes B itself.
  GemmNT<float> gemm_nt_f32 = nullptr;
  GemmNT<double> gemm_nt_f64 = nullptr;
};

const KernelTable& scalar_table();
#if defined(MHKD_HAVE_AVX2)
const KernelTable& avx2_table();
#endif
#if defined(MHKD_HAVE_NEON)
const KernelTable& neon_table();
#endif

}  // namespace mhkd::kernels::detail
