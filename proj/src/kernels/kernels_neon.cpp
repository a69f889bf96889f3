// AArch64 Advanced SIMD variant. Built only when targeting aarch64.

#include <arm_neon.h>

#include <algorithm>

#include "kernel_table.hpp"

namespace mhkd::kernels::detail {
namespace {

struct F32 {
  using T = float;
  using V = float32x4_t;
  static constexpr int kWidth = 4;
  static V set1(T x) { return vdupq_n_f32(x); }
  static V load(const T* p) { return vld1q_f32(p); }
  static void store(T* p, V v) { vst1q_f32(p, v); }
  static V fmadd(V a, V b, V c) { return vfmaq_f32(c, a, b); }
  static V add(V a, V b) { return vaddq_f32(a, b); }
  static V mul(V a, V b) { return vmulq_f32(a, b); }
  static V sub(V a, V b) { return vsubq_f32(a, b); }
};

struct F64 {
  using T = double;
  using V = float64x2_t;
  static constexpr int kWidth = 2;
  static V set1(T x) { return vdupq_n_f64(x); }
  static V load(const T* p) { return vld1q_f64(p); }
  static void store(T* p, V v) { vst1q_f64(p, v); }
  static V fmadd(V a, V b, V c) { return vfmaq_f64(c, a, b); }
  static V add(V a, V b) { return vaddq_f64(a, b); }
  static V mul(V a, V b) { return vmulq_f64(a, b); }
  static V sub(V a, V b) { return vsubq_f64(a, b); }
};

constexpr int kRows = 4;

template <class Tr, int kR>
void rows(int n, int k, const typename Tr::T* a, int lda, const typename Tr::T* b, int ldb,
          typename Tr::T* c, int ldc) {
  constexpr int w = Tr::kWidth;
  int j = 0;
  for (; j + w <= n; j += w) {
    typename Tr::V acc[kR];
    for (int r = 0; r < kR; ++r) acc[r] = Tr::load(c + r * ldc + j);
    for (int p = 0; p < k; ++p) {
      const auto bv = Tr::load(b + static_cast<std::ptrdiff_t>(p) * ldb + j);
      for (int r = 0; r < kR; ++r) acc[r] = Tr::fmadd(Tr::set1(a[r * lda + p]), bv, acc[r]);
    }
    for (int r = 0; r < kR; ++r) Tr::store(c + r * ldc + j, acc[r]);
  }
  for (; j < n; ++j) {
    for (int r = 0; r < kR; ++r) {
      auto sum = c[r * ldc + j];
      for (int p = 0; p < k; ++p) sum += a[r * lda + p] * b[static_cast<std::ptrdiff_t>(p) * ldb + j];
      c[r * ldc + j] = sum;
    }
  }
}

template <class Tr>
void gemm_nn(int m, int n, int k, const typename Tr::T* a, int lda, const typename Tr::T* b,
             int ldb, typename Tr::T* c, int ldc) {
  int i = 0;
  for (; i + kRows <= m; i += kRows) {
    rows<Tr, kRows>(n, k, a + static_cast<std::ptrdiff_t>(i) * lda, lda, b, ldb,
                    c + static_cast<std::ptrdiff_t>(i) * ldc, ldc);
  }
  for (; i < m; ++i) {
    rows<Tr, 1>(n, k, a + static_cast<std::ptrdiff_t>(i) * lda, lda, b, ldb,
                c + static_cast<std::ptrdiff_t>(i) * ldc, ldc);
  }
}

template <class Tr>
void sgd_momentum(typename Tr::T* param, const typename Tr::T* grad, typename Tr::T* velocity,
                  std::size_t n, typename Tr::T lr, typename Tr::T momentum,
                  typename Tr::T weight_decay) {
  const auto vlr = Tr::set1(lr);
  const auto vmom = Tr::set1(momentum);
  const auto vwd = Tr::set1(weight_decay);
  std::size_t i = 0;
  for (; i + Tr::kWidth <= n; i += Tr::kWidth) {
    const auto p = Tr::load(param + i);
    const auto g = Tr::add(Tr::load(grad + i), Tr::mul(vwd, p));
    const auto v = Tr::add(Tr::mul(vmom, Tr::load(velocity + i)), g);
    Tr::store(velocity + i, v);
    Tr::store(param + i, Tr::sub(p, Tr::mul(vlr, v)));
  }
  for (; i < n; ++i) {
    const auto g = grad[i] + weight_decay * param[i];
    velocity[i] = momentum * velocity[i] + g;
    param[i] -= lr * velocity[i];
  }
}

}  // namespace

const KernelTable& neon_table() {
  static const KernelTable table{&gemm_nn<F32>, &gemm_nn<F64>, &sgd_momentum<F32>,
                                 &sgd_momentum<F64>};
  return table;
}

}  // namespace mhkd::kernels::detail
