#pragma once

// Central finite differences, the oracle every backward() is checked against.

#include <algorithm>
#include <cmath>
#include <functional>

#include "mhkd/errors.hpp"
#include "mhkd/tensor.hpp"

namespace mhkd {

template <typename T>
Tensor<T> finite_difference_grad(const std::function<T(const Tensor<T>&)>& f,
                                 const Tensor<T>& x, T h) {
  if (!(h > T{0})) throw ConfigError("finite_difference_grad: step must be positive");
  Tensor<T> probe = x.detach();
  Tensor<T> grad(x.shape());
  for (std::size_t i = 0; i < probe.numel(); ++i) {
    const T original = probe.data()[i];
    probe.data()[i] = original + h;
    const T plus = f(probe);
    probe.data()[i] = original - h;
    const T minus = f(probe);
    probe.data()[i] = original;
    grad.data()[i] = (plus - minus) / (T{2} * h);
  }
  return grad;
}

// ||a - b||_2 / max(||a||_2, ||b||_2); 0 when both vanish.
template <typename T>
double relative_error(std::span<const T> a, std::span<const T> b) {
  if (a.size() != b.size()) throw DimensionError("relative_error: size mismatch");
  double diff = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = static_cast<double>(a[i]) - static_cast<double>(b[i]);
    diff += d * d;
    na += static_cast<double>(a[i]) * a[i];
    nb += static_cast<double>(b[i]) * b[i];
  }
  const double denom = std::sqrt(std::max(na, nb));
  return denom == 0.0 ? std::sqrt(diff) : std::sqrt(diff) / denom;
}

}  // namespace mhkd
