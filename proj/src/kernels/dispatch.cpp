#include <algorithm>
#include <atomic>
#include <cstdlib>
#include <cstring>
#include <string>
#include <type_traits>
#include <vector>

#include "kernel_table.hpp"
#include "mhkd/errors.hpp"
#include "mhkd/kernels.hpp"

namespace mhkd::kernels {
namespace {

using detail::KernelTable;

const KernelTable& table_for(Isa isa) {
  switch (isa) {
#if defined(MHKD_HAVE_AVX2)
    case Isa::kAvx2: return detail::avx2_table();
#endif
#if defined(MHKD_HAVE_NEON)
    case Isa::kNeon: return detail::neon_table();
#endif
    default: return detail::scalar_table();
  }
}

Isa best_isa() {
  if (isa_supported(Isa::kAvx2)) return Isa::kAvx2;
  if (isa_supported(Isa::kNeon)) return Isa::kNeon;
  return Isa::kScalar;
}

Isa initial_isa() {
  if (const char* env = std::getenv("MHKD_KERNELS"); env != nullptr && *env != '\0') {
    const Isa requested = parse_isa(env);
    if (!isa_supported(requested)) {
      throw ConfigError("MHKD_KERNELS=" + std::string(env) + " is not supported on this machine");
    }
    return requested;
  }
  return best_isa();
}

struct State {
  std::atomic<Isa> isa{initial_isa()};
  std::atomic<const KernelTable*> table{&table_for(isa.load())};
};

State& state() {
  static State s;
  return s;
}

template <typename T>
const T* pack_transposed(const T* src, int ld, int rows, int cols, std::vector<T>& buffer) {
  // src holds the [cols, rows] matrix; produce its [rows, cols] transpose.
  buffer.resize(static_cast<std::size_t>(rows) * cols);
  constexpr int kBlock = 32;
  for (int c0 = 0; c0 < cols; c0 += kBlock) {
    for (int r0 = 0; r0 < rows; r0 += kBlock) {
      const int c1 = std::min(cols, c0 + kBlock);
      const int r1 = std::min(rows, r0 + kBlock);
      for (int c = c0; c < c1; ++c) {
        const T* s = src + static_cast<std::ptrdiff_t>(c) * ld;
        for (int r = r0; r < r1; ++r) buffer[static_cast<std::size_t>(r) * cols + c] = s[r];
      }
    }
  }
  return buffer.data();
}

template <typename T>
detail::GemmNN<T> gemm_kernel(const KernelTable& t) {
  if constexpr (std::is_same_v<T, float>) {
    return t.gemm_f32;
  } else {
    return t.gemm_f64;
  }
}

template <typename T>
detail::GemmNT<T> gemm_nt_kernel(const KernelTable& t) {
  if constexpr (std::is_same_v<T, float>) {
    return t.gemm_nt_f32;
  } else {
    return t.gemm_nt_f64;
  }
}

}  // namespace

std::string_view isa_name(Isa isa) {
  switch (isa) {
    case Isa::kAvx2: return "avx2";
    case Isa::kNeon: return "neon";
    default: return "scalar";
  }
}

Isa parse_isa(std::string_view name) {
  if (name == "scalar") return Isa::kScalar;
  if (name == "avx2") return Isa::kAvx2;
  if (name == "neon") return Isa::kNeon;
  throw ConfigError("unknown kernel ISA '" + std::string(name) + "' (scalar|avx2|neon)");
}

bool isa_supported(Isa isa) {
  switch (isa) {
    case Isa::kScalar: return true;
    case Isa::kAvx2:
#if defined(MHKD_HAVE_AVX2)
      return __builtin_cpu_supports("avx2") && __builtin_cpu_supports("fma");
#else
      return false;
#endif
    case Isa::kNeon:
#if defined(MHKD_HAVE_NEON)
      return true;
#else
      return false;
#endif
  }
  return false;
}

Isa active_isa() { return state().isa.load(); }

void set_isa(Isa isa) {
  if (!isa_supported(isa)) {
    throw ConfigError("kernel ISA '" + std::string(isa_name(isa)) + "' is not supported here");
  }
  state().isa.store(isa);
  state().table.store(&table_for(isa));
}

template <typename T>
void gemm(Trans trans_a, Trans trans_b, int m, int n, int k, const T* a, int lda, const T* b,
          int ldb, T* c, int ldc, bool accumulate) {
  if (m <= 0 || n <= 0) return;
  if (!accumulate) {
    for (int i = 0; i < m; ++i) {
      std::memset(c + static_cast<std::ptrdiff_t>(i) * ldc, 0, sizeof(T) * n);
    }
  }
  if (k <= 0) return;
  thread_local std::vector<T> pack_a;
  thread_local std::vector<T> pack_b;
  if (trans_a == Trans::kYes) {
    a = pack_transposed(a, lda, m, k, pack_a);
    lda = k;
  }
  const KernelTable& table = *state().table.load();
  if (trans_b == Trans::kYes) {
    if (auto nt = gemm_nt_kernel<T>(table)) {
      nt(m, n, k, a, lda, b, ldb, c, ldc);
      return;
    }
    b = pack_transposed(b, ldb, k, n, pack_b);
    ldb = n;
  }
  gemm_kernel<T>(table)(m, n, k, a, lda, b, ldb, c, ldc);
}

template <typename T>
void sgd_momentum(T* param, const T* grad, T* velocity, std::size_t n, T lr, T momentum,
                  T weight_decay) {
  const KernelTable& t = *state().table.load();
  if constexpr (std::is_same_v<T, float>) {
    t.sgd_f32(param, grad, velocity, n, lr, momentum, weight_decay);
  } else {
    t.sgd_f64(param, grad, velocity, n, lr, momentum, weight_decay);
  }
}

template void gemm<float>(Trans, Trans, int, int, int, const float*, int, const float*, int,
                          float*, int, bool);
template void gemm<double>(Trans, Trans, int, int, int, const double*, int, const double*, int,
                           double*, int, bool);
template void sgd_momentum<float>(float*, const float*, float*, std::size_t, float, float, float);
template void sgd_momentum<double>(double*, const double*, double*, std::size_t, double, double,
                                   double);

}  // namespace mhkd::kernels
