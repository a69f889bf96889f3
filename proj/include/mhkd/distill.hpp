#pragma once

// Auxiliary classifier heads and the distillation losses:
//   L_KL   = tau^2 * KL(softmax(t/tau) || softmax(s/tau))      (batch mean)
//   L_OHKD = alpha * L_KL + (1 - alpha) * CE(y, s)             (one head)
//   L_KD   = L_OHKD evaluated on the final network logits
//   L_MHKD = beta * sum_j L_OHKD^(j) + L_KD                    (D heads)
// Teacher logits are constants in every KL term.

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "mhkd/nn.hpp"
#include "mhkd/tensor.hpp"

namespace mhkd {

struct AuxHeadSpec {
  int num_conv = 2;         // N_c
  int num_fc = 2;           // N_f
  int conv_channels = 256;  // kernels per head conv
  int kernel = 3;
  int fc_hidden = 128;      // width of the hidden FC layers
  int num_classes = 10;     // K

  bool operator==(const AuxHeadSpec&) const = default;
};

void validate(const AuxHeadSpec& spec, const TaskSpec& task);

// N_c x [conv k x k, stride 2, BN, ReLU] -> global average pool ->
// (N_f - 1) x [FC, ReLU] -> FC to K logits.
template <typename T>
class AuxHead {
 public:
  AuxHead(const AuxHeadSpec& spec, int in_channels, std::uint64_t seed);

  Tensor<T> forward(GradTape<T>* tape, const Tensor<T>& feature, Mode mode);
  Tensor<T> infer(const Tensor<T>& feature) const;

  std::vector<Parameter<T>> parameters(const std::string& prefix = "head") const;
  std::vector<NamedTensor<T>> buffers(const std::string& prefix = "head") const;
  std::size_t count_params() const;
  AuxHead clone() const;

  const AuxHeadSpec& spec() const { return spec_; }
  int in_channels() const { return in_channels_; }

 private:
  Tensor<T> run(GradTape<T>* tape, const Tensor<T>& feature, Mode mode) const;

  AuxHeadSpec spec_;
  int in_channels_;
  std::vector<ConvBlock<T>> convs_;
  std::vector<Tensor<T>> fc_weights_, fc_biases_;
};

struct DistillConfig {
  double temperature = 4.0;  // tau
  double alpha = 0.9;
  double beta = 0.5;
  std::vector<int> head_units = {1, 2, 3};  // D = head_units.size()
  double kd_alpha = 0.9;

  bool operator==(const DistillConfig&) const = default;
};

void validate(const DistillConfig& cfg, int num_units);

struct HeadLoss {
  double l_kl = 0.0;
  double l_ce = 0.0;
  double l_ohkd = 0.0;
};

struct LossReport {
  double l_ce_final = 0.0;
  double l_kl_final = 0.0;
  double l_kd = 0.0;
  std::vector<HeadLoss> per_head;
  double l_mhkd = 0.0;
  std::vector<double> head_accuracies;  // student heads on the current batch
};

// beta * sum(per_head.l_ohkd) + l_kd, recomputed in double.
double recompose_mhkd(const LossReport& report, double beta);
// Throws ContractError if the report violates the recomposition invariant
// (1e-6 relative) or has a negative component.
void check_report(const LossReport& report, double beta, double rel_tol = 1e-6);

// Row-wise softmax(logits / tau), max-subtracted. Not recorded on any tape.
template <typename T>
Tensor<T> softmax_t(const Tensor<T>& logits, T tau);
template <typename T>
Tensor<T> log_softmax_t(const Tensor<T>& logits, T tau);

template <typename T>
Tensor<T> kl_div_loss(GradTape<T>* tape, const Tensor<T>& teacher_logits,
                      const Tensor<T>& student_logits, T tau);

template <typename T>
Tensor<T> cross_entropy_loss(GradTape<T>* tape, const Tensor<T>& logits,
                             std::span<const int> labels);

template <typename T>
struct LossTerm {
  Tensor<T> loss;
  HeadLoss parts;
};

template <typename T>
LossTerm<T> ohkd_loss(GradTape<T>* tape, const Tensor<T>& teacher_head_logits,
                      const Tensor<T>& student_head_logits, std::span<const int> labels, T tau,
                      T alpha);

template <typename T>
LossTerm<T> kd_loss(GradTape<T>* tape, const Tensor<T>& teacher_logits,
                    const Tensor<T>& student_logits, std::span<const int> labels, T tau,
                    T kd_alpha);

template <typename T>
Tensor<T> teacher_head_loss(GradTape<T>* tape, const Tensor<T>& teacher_head_logits,
                            std::span<const int> labels);

template <typename T>
struct MhkdResult {
  Tensor<T> loss;  // L_MHKD
  LossReport report;
  std::vector<Tensor<T>> teacher_head_logits;  // recorded; feed teacher_head_loss
  std::vector<Tensor<T>> student_head_logits;
};

// Runs every head (train mode) on its tap and assembles L_MHKD. Taps must be
// aligned with cfg.head_units; heads_t[j]/heads_s[j] belong to head_units[j].
template <typename T>
MhkdResult<T> mhkd_loss(GradTape<T>* tape, std::span<const FeatureMap<T>> taps_t,
                        std::span<const FeatureMap<T>> taps_s, std::span<AuxHead<T>> heads_t,
                        std::span<AuxHead<T>> heads_s, const Tensor<T>& final_t,
                        const Tensor<T>& final_s, std::span<const int> labels,
                        const DistillConfig& cfg);

// Fraction of rows whose argmax equals the label.
template <typename T>
double batch_accuracy(const Tensor<T>& logits, std::span<const int> labels);

extern template class AuxHead<float>;
extern template class AuxHead<double>;

}  // namespace mhkd
