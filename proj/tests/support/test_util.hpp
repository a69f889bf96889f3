#pragma once

#include <cstdint>
#include <cstring>
#include <span>
#include <vector>

#include "mhkd/rng.hpp"
#include "mhkd/tensor.hpp"

namespace mhkd::testing {

template <typename T>
Tensor<T> random_tensor(Rng& rng, Shape shape, double lo = -1.0, double hi = 1.0,
                        bool requires_grad = false) {
  Tensor<T> t(std::move(shape));
  for (T& v : t.data()) v = static_cast<T>(rng.uniform(lo, hi));
  t.set_requires_grad(requires_grad);
  return t;
}

template <typename T>
Tensor<T> normal_tensor(Rng& rng, Shape shape, double stddev = 1.0) {
  Tensor<T> t(std::move(shape));
  for (T& v : t.data()) v = static_cast<T>(stddev * rng.normal());
  return t;
}

inline int rand_int(Rng& rng, int lo, int hi) {  // inclusive
  return lo + static_cast<int>(rng.below(static_cast<std::uint64_t>(hi - lo + 1)));
}

template <typename T>
bool bit_equal(std::span<const T> a, std::span<const T> b) {
  if (a.size() != b.size()) return false;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (std::memcmp(&a[i], &b[i], sizeof(T)) != 0) return false;
  }
  return true;
}

}  // namespace mhkd::testing
