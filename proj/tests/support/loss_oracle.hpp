#pragma once

// Closed-form loss references in long double, sharing no code with the
// library: softmax, KL(p_T || p_S) scaled by tau^2, and cross-entropy, all
// batch-averaged.

#include <algorithm>
#include <cmath>
#include <vector>

#include "mhkd/tensor.hpp"

namespace mhkd::testing {

inline std::vector<long double> ref_softmax(const double* z, int k, double tau) {
  long double m = -1e300L;
  for (int i = 0; i < k; ++i) m = std::max<long double>(m, z[i] / tau);
  std::vector<long double> p(k);
  long double s = 0;
  for (int i = 0; i < k; ++i) s += p[i] = std::exp(z[i] / tau - m);
  for (auto& v : p) v /= s;
  return p;
}

inline double ref_kl(const Tensor<double>& t, const Tensor<double>& s, double tau) {
  const int b = t.dim(0), k = t.dim(1);
  long double total = 0;
  for (int i = 0; i < b; ++i) {
    auto pt = ref_softmax(t.ptr() + i * k, k, tau), ps = ref_softmax(s.ptr() + i * k, k, tau);
    for (int j = 0; j < k; ++j) total += pt[j] * (std::log(pt[j]) - std::log(ps[j]));
  }
  return static_cast<double>(tau * tau * total / b);
}

inline double ref_ce(const Tensor<double>& s, const std::vector<int>& y) {
  const int b = s.dim(0), k = s.dim(1);
  long double total = 0;
  for (int i = 0; i < b; ++i) total -= std::log(ref_softmax(s.ptr() + i * k, k, 1.0)[y[i]]);
  return static_cast<double>(total / b);
}

inline double ref_ohkd(const Tensor<double>& t, const Tensor<double>& s, const std::vector<int>& y,
                       double tau, double alpha) {
  return alpha * ref_kl(t, s, tau) + (1.0 - alpha) * ref_ce(s, y);
}

}  // namespace mhkd::testing
