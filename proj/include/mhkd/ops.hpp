#pragma once

// Differentiable tensor ops. Every op takes the tape first; pass nullptr to
// evaluate without recording (inference, frozen networks).

#include <span>

#include "mhkd/tensor.hpp"

namespace mhkd {

enum class Mode { kTrain, kEval };

// x [B,Ci,H,W], weight [Co,Ci,kH,kW], bias [Co] or undefined -> [B,Co,H',W'].
template <typename T>
Tensor<T> conv2d(GradTape<T>* tape, const Tensor<T>& x, const Tensor<T>& weight,
                 const Tensor<T>& bias, int stride, int padding);

struct BatchNormOptions {
  double momentum = 0.1;
  double epsilon = 1e-5;
};

// Per-channel normalization over (B,H,W). Train mode normalizes with batch
// statistics and updates the running mean / unbiased variance in place.
template <typename T>
Tensor<T> batchnorm2d(GradTape<T>* tape, const Tensor<T>& x, const Tensor<T>& gamma,
                      const Tensor<T>& beta, Tensor<T>& running_mean, Tensor<T>& running_var,
                      Mode mode, BatchNormOptions options = {});

template <typename T>
Tensor<T> relu(GradTape<T>* tape, const Tensor<T>& x);

// x [B,Fin], weight [Fout,Fin], bias [Fout] or undefined -> [B,Fout].
template <typename T>
Tensor<T> linear(GradTape<T>* tape, const Tensor<T>& x, const Tensor<T>& weight,
                 const Tensor<T>& bias);

template <typename T>
Tensor<T> global_avg_pool(GradTape<T>* tape, const Tensor<T>& x);

template <typename T>
Tensor<T> max_pool2d(GradTape<T>* tape, const Tensor<T>& x, int window, int stride);

template <typename T>
Tensor<T> add(GradTape<T>* tape, const Tensor<T>& a, const Tensor<T>& b);

template <typename T>
Tensor<T> mul(GradTape<T>* tape, const Tensor<T>& a, const Tensor<T>& b);

template <typename T>
Tensor<T> scale(GradTape<T>* tape, const Tensor<T>& x, T factor);

template <typename T>
Tensor<T> sum(GradTape<T>* tape, const Tensor<T>& x);

template <typename T>
Tensor<T> mean(GradTape<T>* tape, const Tensor<T>& x);

}  // namespace mhkd
