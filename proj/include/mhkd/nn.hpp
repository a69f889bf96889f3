#pragma once

// Unit-structured convolutional networks. A network is a sequence of units
// (conv layers followed by optional max-pool downsampling), then global
// average pooling and one fully-connected classifier. Features can be tapped
// at the end of any unit, after its last activation and downsampling.

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "mhkd/ops.hpp"
#include "mhkd/rng.hpp"
#include "mhkd/tensor.hpp"

namespace mhkd {

enum class Activation { kRelu, kNone };

struct ConvLayerSpec {
  int out_channels = 0;
  int in_channels = 0;
  int kernel_h = 3;
  int kernel_w = 3;
  int stride = 1;
  int padding = 1;
  bool has_bn = true;
  Activation activation = Activation::kRelu;

  bool operator==(const ConvLayerSpec&) const = default;
};

struct UnitSpec {
  std::vector<ConvLayerSpec> layers;
  int pool_window = 0;  // 0: no downsampling at the end of the unit
  int pool_stride = 0;

  bool operator==(const UnitSpec&) const = default;
};

struct NetworkSpec {
  std::string name;
  std::vector<UnitSpec> units;

  int input_channels() const;
  int output_channels() const;  // features entering the classifier
  int unit_channels(int unit_index) const;  // 1-based
  bool operator==(const NetworkSpec&) const = default;
};

struct TaskSpec {
  int num_classes = 10;
  int channels = 3;
  int height = 32;
  int width = 32;

  bool operator==(const TaskSpec&) const = default;
};

inline constexpr int kMinUnits = 3;

// Throws ConfigError describing the first violated invariant.
void validate(const NetworkSpec& spec, const TaskSpec& task);
void validate(const TaskSpec& task);

// Units of `convs_per_unit` 3x3 conv+BN+ReLU layers, each unit ending in a
// 2x2/2 max-pool.
NetworkSpec plain_cnn_spec(std::string name, std::span<const int> widths, int convs_per_unit,
                           int input_channels = 3);
NetworkSpec tiny_teacher_spec();  // "TinyT": widths 32/64/128, two convs per unit
NetworkSpec tiny_student_spec();  // "TinyS": widths 16/32/64, one conv per unit
// Looks up "TinyT" / "TinyS"; throws ConfigError for unknown names.
NetworkSpec preset_network(const std::string& name);

// [C,H,W] of the tap at the end of `unit_index` (1-based), from geometry alone.
Shape feature_shape(const NetworkSpec& spec, const TaskSpec& task, int unit_index);

enum class FeatureSource { kTeacher, kStudent };

template <typename T>
struct FeatureMap {
  Tensor<T> tensor;
  int unit_index = 0;
  FeatureSource source = FeatureSource::kStudent;
};

template <typename T>
struct Parameter {
  std::string name;
  Tensor<T> tensor;
  bool decay = true;  // weight decay applies (conv/FC weights only)
};

template <typename T>
struct NamedTensor {
  std::string name;
  Tensor<T> tensor;
};

template <typename T>
struct ForwardResult {
  Tensor<T> logits;
  std::vector<FeatureMap<T>> taps;
};

template <typename T>
struct ConvBlock {
  ConvLayerSpec spec;
  Tensor<T> weight, bias;
  Tensor<T> gamma, beta;                // empty when !spec.has_bn
  Tensor<T> running_mean, running_var;  // idem

  Tensor<T> forward(GradTape<T>* tape, const Tensor<T>& x, Mode mode, int stride,
                    int padding) const;
  void collect(const std::string& prefix, std::vector<Parameter<T>>& params,
               std::vector<NamedTensor<T>>& buffers) const;
};

// He-style init: N(0, 2/fan_in) weights, zero biases, BN gamma=1 beta=0.
template <typename T>
ConvBlock<T> make_conv_block(const ConvLayerSpec& spec, Rng& rng);

template <typename T>
class Network {
 public:
  Network(NetworkSpec spec, TaskSpec task, std::uint64_t seed);

  // `tap_units` are 1-based unit indices. Train mode uses batch statistics and
  // updates BN running stats; eval mode leaves all state untouched.
  ForwardResult<T> forward_with_taps(GradTape<T>* tape, const Tensor<T>& input,
                                     std::span<const int> tap_units, Mode mode,
                                     FeatureSource source = FeatureSource::kStudent);
  // Eval-mode inference; never mutates the network.
  ForwardResult<T> infer(const Tensor<T>& input, std::span<const int> tap_units = {},
                         FeatureSource source = FeatureSource::kStudent) const;

  std::vector<Parameter<T>> parameters() const;
  std::vector<NamedTensor<T>> buffers() const;  // BN running statistics
  std::size_t count_params() const;
  void set_requires_grad(bool value);

  // Deep copy (tensors are shared handles, so plain copies alias).
  Network clone() const;

  const NetworkSpec& spec() const { return spec_; }
  const TaskSpec& task() const { return task_; }

 private:
  ForwardResult<T> run(GradTape<T>* tape, const Tensor<T>& input, std::span<const int> tap_units,
                       Mode mode, FeatureSource source) const;

  NetworkSpec spec_;
  TaskSpec task_;
  std::vector<std::vector<ConvBlock<T>>> units_;
  Tensor<T> fc_weight_, fc_bias_;
};

// 100 * (1 - student / teacher).
double compression_percent(std::size_t student_params, std::size_t teacher_params);

extern template class Network<float>;
extern template class Network<double>;

}  // namespace mhkd
