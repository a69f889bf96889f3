// Compiled with -mavx2 -mfma; only reached after a CPUID check.

#include <immintrin.h>

#include <algorithm>
#include <cstdint>
#include <vector>

#include "kernel_table.hpp"

namespace mhkd::kernels::detail {
namespace {

struct F32 {
  using T = float;
  using V = __m256;
  static constexpr int kWidth = 8;
  static V zero() { return _mm256_setzero_ps(); }
  static V set1(T x) { return _mm256_set1_ps(x); }
  static V load(const T* p) { return _mm256_loadu_ps(p); }
  static void store(T* p, V v) { _mm256_storeu_ps(p, v); }
  static V fmadd(V a, V b, V c) { return _mm256_fmadd_ps(a, b, c); }
  static V add(V a, V b) { return _mm256_add_ps(a, b); }
  static V mul(V a, V b) { return _mm256_mul_ps(a, b); }
  static V sub(V a, V b) { return _mm256_sub_ps(a, b); }
  static __m256i mask(int count) {
    alignas(32) static const std::int32_t table[16] = {-1, -1, -1, -1, -1, -1, -1, -1,
                                                       0,  0,  0,  0,  0,  0,  0,  0};
    return _mm256_loadu_si256(reinterpret_cast<const __m256i*>(table + 8 - count));
  }
  static V maskload(const T* p, __m256i m) { return _mm256_maskload_ps(p, m); }
  static void maskstore(T* p, __m256i m, V v) { _mm256_maskstore_ps(p, m, v); }
};

struct F64 {
  using T = double;
  using V = __m256d;
  static constexpr int kWidth = 4;
  static V zero() { return _mm256_setzero_pd(); }
  static V set1(T x) { return _mm256_set1_pd(x); }
  static V load(const T* p) { return _mm256_loadu_pd(p); }
  static void store(T* p, V v) { _mm256_storeu_pd(p, v); }
  static V fmadd(V a, V b, V c) { return _mm256_fmadd_pd(a, b, c); }
  static V add(V a, V b) { return _mm256_add_pd(a, b); }
  static V mul(V a, V b) { return _mm256_mul_pd(a, b); }
  static V sub(V a, V b) { return _mm256_sub_pd(a, b); }
  static __m256i mask(int count) {
    alignas(32) static const std::int64_t table[8] = {-1, -1, -1, -1, 0, 0, 0, 0};
    return _mm256_loadu_si256(reinterpret_cast<const __m256i*>(table + 4 - count));
  }
  static V maskload(const T* p, __m256i m) { return _mm256_maskload_pd(p, m); }
  static void maskstore(T* p, __m256i m, V v) { _mm256_maskstore_pd(p, m, v); }
};

constexpr int kMaxRows = 6;
constexpr int kBlockK = 256;
constexpr int kBlockN = 512;

// B is repacked per (kBlockK x kBlockN) block into column panels of
// 2*width entries, [panel][p][2*width], zero-padded past the last column, so
// the inner loop streams contiguous memory however wide B is.
template <class Tr, bool kTransB>
void pack_b(int kc, int nc, const typename Tr::T* b, int ldb, typename Tr::T* out) {
  constexpr int nr = 2 * Tr::kWidth;
  for (int j = 0; j < nc; j += nr) {
    const int valid = std::min(nr, nc - j);
    if constexpr (kTransB) {
      for (int q = 0; q < nr; ++q) {
        const auto* src = b + static_cast<std::ptrdiff_t>(j + q) * ldb;
        for (int p = 0; p < kc; ++p) out[p * nr + q] = q < valid ? src[p] : 0;
      }
      out += static_cast<std::ptrdiff_t>(kc) * nr;
    } else {
      for (int p = 0; p < kc; ++p) {
        const auto* src = b + static_cast<std::ptrdiff_t>(p) * ldb + j;
        int q = 0;
        for (; q < valid; ++q) out[q] = src[q];
        for (; q < nr; ++q) out[q] = 0;
        out += nr;
      }
    }
  }
}

// Splits `total` into ceil(total/limit) near-equal blocks; returns block i's start.
inline int even_split(int total, int blocks, int i) {
  return static_cast<int>(static_cast<long long>(total) * i / blocks);
}

// kRows x (2*width) register tile of C; only the first `valid` columns exist.
template <class Tr, int kRows>
inline void tile(int kc, const typename Tr::T* a, int lda, const typename Tr::T* panel,
                 typename Tr::T* c, int ldc, int valid) {
  using V = typename Tr::V;
  constexpr int w = Tr::kWidth;
  const bool full = valid == 2 * w;
  const __m256i m0 = Tr::mask(std::min(valid, w));
  const __m256i m1 = Tr::mask(std::clamp(valid - w, 0, w));
  V acc[kRows][2];
  for (int r = 0; r < kRows; ++r) {
    const auto* src = c + static_cast<std::ptrdiff_t>(r) * ldc;
    acc[r][0] = full ? Tr::load(src) : Tr::maskload(src, m0);
    acc[r][1] = full ? Tr::load(src + w) : Tr::maskload(src + w, m1);
  }
  for (int p = 0; p < kc; ++p) {
    const V b0 = Tr::load(panel + p * 2 * w);
    const V b1 = Tr::load(panel + p * 2 * w + w);
    for (int r = 0; r < kRows; ++r) {
      const V av = Tr::set1(a[static_cast<std::ptrdiff_t>(r) * lda + p]);
      acc[r][0] = Tr::fmadd(av, b0, acc[r][0]);
      acc[r][1] = Tr::fmadd(av, b1, acc[r][1]);
    }
  }
  for (int r = 0; r < kRows; ++r) {
    auto* dst = c + static_cast<std::ptrdiff_t>(r) * ldc;
    if (full) {
      Tr::store(dst, acc[r][0]);
      Tr::store(dst + w, acc[r][1]);
    } else {
      Tr::maskstore(dst, m0, acc[r][0]);
      Tr::maskstore(dst + w, m1, acc[r][1]);
    }
  }
}

template <class Tr, int kRows>
void row_panel(int kc, int nc, const typename Tr::T* a, int lda, const typename Tr::T* packed,
               typename Tr::T* c, int ldc) {
  constexpr int nr = 2 * Tr::kWidth;
  for (int j = 0; j < nc; j += nr) {
    tile<Tr, kRows>(kc, a, lda, packed + static_cast<std::ptrdiff_t>(j) * kc, c + j, ldc,
                    std::min(nr, nc - j));
  }
}

template <class Tr, bool kTransB>
void gemm_packed(int m, int n, int k, const typename Tr::T* a, int lda, const typename Tr::T* b,
                 int ldb, typename Tr::T* c, int ldc) {
  constexpr int nr = 2 * Tr::kWidth;
  thread_local std::vector<typename Tr::T> packed;
  packed.resize(static_cast<std::size_t>(kBlockK) * (kBlockN + nr));
  // Near-equal row and depth blocks avoid a thin leftover tile or k-slice.
  const int row_tiles = (m + kMaxRows - 1) / kMaxRows;
  const int k_blocks = (k + kBlockK - 1) / kBlockK;
  for (int kb = 0; kb < k_blocks; ++kb) {
    const int p0 = even_split(k, k_blocks, kb);
    const int kc = even_split(k, k_blocks, kb + 1) - p0;
    for (int j0 = 0; j0 < n; j0 += kBlockN) {
      const int nc = std::min(kBlockN, n - j0);
      const auto* bp = kTransB ? b + static_cast<std::ptrdiff_t>(j0) * ldb + p0
                               : b + static_cast<std::ptrdiff_t>(p0) * ldb + j0;
      pack_b<Tr, kTransB>(kc, nc, bp, ldb, packed.data());
      for (int t = 0; t < row_tiles; ++t) {
        const int i = even_split(m, row_tiles, t);
        const int rows = even_split(m, row_tiles, t + 1) - i;
        const auto* ap = a + static_cast<std::ptrdiff_t>(i) * lda + p0;
        auto* cp = c + static_cast<std::ptrdiff_t>(i) * ldc + j0;
        switch (rows) {
          case 6: row_panel<Tr, 6>(kc, nc, ap, lda, packed.data(), cp, ldc); break;
          case 5: row_panel<Tr, 5>(kc, nc, ap, lda, packed.data(), cp, ldc); break;
          case 4: row_panel<Tr, 4>(kc, nc, ap, lda, packed.data(), cp, ldc); break;
          case 3: row_panel<Tr, 3>(kc, nc, ap, lda, packed.data(), cp, ldc); break;
          case 2: row_panel<Tr, 2>(kc, nc, ap, lda, packed.data(), cp, ldc); break;
          default: row_panel<Tr, 1>(kc, nc, ap, lda, packed.data(), cp, ldc); break;
        }
      }
    }
  }
}

template <class Tr>
void gemm_nn(int m, int n, int k, const typename Tr::T* a, int lda, const typename Tr::T* b,
             int ldb, typename Tr::T* c, int ldc) {
  gemm_packed<Tr, false>(m, n, k, a, lda, b, ldb, c, ldc);
}

template <class Tr>
void gemm_nt(int m, int n, int k, const typename Tr::T* a, int lda, const typename Tr::T* b,
             int ldb, typename Tr::T* c, int ldc) {
  gemm_packed<Tr, true>(m, n, k, a, lda, b, ldb, c, ldc);
}

// Separate mul/add (no FMA) so results match the scalar reference bit for bit.
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

const KernelTable& avx2_table() {
  static const KernelTable table{&gemm_nn<F32>, &gemm_nn<F64>, &sgd_momentum<F32>,
                                 &sgd_momentum<F64>, &gemm_nt<F32>, &gemm_nt<F64>};
  return table;
}

}  // namespace mhkd::kernels::detail
