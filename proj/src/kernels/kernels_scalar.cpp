#include "kernel_table.hpp"

namespace mhkd::kernels::detail {
namespace {

template <typename T>
void gemm_nn(int m, int n, int k, const T* a, int lda, const T* b, int ldb, T* c, int ldc) {
  for (int i = 0; i < m; ++i) {
    T* crow = c + static_cast<std::ptrdiff_t>(i) * ldc;
    for (int p = 0; p < k; ++p) {
      const T aip = a[static_cast<std::ptrdiff_t>(i) * lda + p];
      const T* brow = b + static_cast<std::ptrdiff_t>(p) * ldb;
      for (int j = 0; j < n; ++j) crow[j] += aip * brow[j];
    }
  }
}

template <typename T>
void sgd_momentum(T* param, const T* grad, T* velocity, std::size_t n, T lr, T momentum,
                  T weight_decay) {
  for (std::size_t i = 0; i < n; ++i) {
    const T g = grad[i] + weight_decay * param[i];
    velocity[i] = momentum * velocity[i] + g;
    param[i] -= lr * velocity[i];
  }
}

}  // namespace

const KernelTable& scalar_table() {
  static const KernelTable table{&gemm_nn<float>, &gemm_nn<double>, &sgd_momentum<float>,
                                 &sgd_momentum<double>};
  return table;
}

}  // namespace mhkd::kernels::detail
