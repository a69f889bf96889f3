#include "mhkd/nn.hpp"

#include <algorithm>
#include <cmath>

#include "mhkd/errors.hpp"

namespace mhkd {

int NetworkSpec::input_channels() const {
  return units.empty() || units.front().layers.empty() ? 0 : units.front().layers.front().in_channels;
}

int NetworkSpec::output_channels() const {
  return units.empty() || units.back().layers.empty() ? 0 : units.back().layers.back().out_channels;
}

int NetworkSpec::unit_channels(int unit_index) const {
  if (unit_index < 1 || unit_index > static_cast<int>(units.size())) {
    throw RangeError("unit index " + std::to_string(unit_index) + " outside [1, " +
                     std::to_string(units.size()) + "]");
  }
  return units[unit_index - 1].layers.back().out_channels;
}

void validate(const TaskSpec& task) {
  if (task.num_classes < 2) {
    throw ConfigError("task needs K >= 2 classes, got " + std::to_string(task.num_classes));
  }
  if (task.channels < 1 || task.height < 1 || task.width < 1) {
    throw ConfigError("task input shape must be positive");
  }
}

void validate(const NetworkSpec& spec, const TaskSpec& task) {
  validate(task);
  const std::string where = "network '" + spec.name + "': ";
  if (static_cast<int>(spec.units.size()) < kMinUnits) {
    throw ConfigError(where + "needs at least " + std::to_string(kMinUnits) + " units, got " +
                      std::to_string(spec.units.size()));
  }
  int channels = task.channels;
  int h = task.height, w = task.width;
  for (std::size_t u = 0; u < spec.units.size(); ++u) {
    const UnitSpec& unit = spec.units[u];
    const std::string uw = where + "unit " + std::to_string(u + 1) + ": ";
    if (unit.layers.empty()) throw ConfigError(uw + "has no layers");
    for (const ConvLayerSpec& l : unit.layers) {
      if (l.out_channels < 1 || l.in_channels < 1 || l.kernel_h < 1 || l.kernel_w < 1) {
        throw ConfigError(uw + "conv dimensions must be >= 1");
      }
      if (l.stride < 1 || l.padding < 0) throw ConfigError(uw + "invalid stride/padding");
      if (l.in_channels != channels) {
        throw ConfigError(uw + "conv expects " + std::to_string(l.in_channels) +
                          " input channels but receives " + std::to_string(channels));
      }
      if (l.stride != 1 || 2 * l.padding != l.kernel_h - 1 || 2 * l.padding != l.kernel_w - 1) {
        throw ConfigError(uw + "conv layers inside a unit must preserve spatial size "
                               "(stride 1, 'same' padding); downsample with the unit's pool");
      }
      channels = l.out_channels;
    }
    if (unit.pool_window < 0 || (unit.pool_window > 0 && unit.pool_stride < 1)) {
      throw ConfigError(uw + "invalid pooling");
    }
    if (unit.pool_window > 0) {
      if (unit.pool_window > h || unit.pool_window > w) {
        throw ConfigError(uw + "pool window larger than the " + std::to_string(h) + "x" +
                          std::to_string(w) + " feature map");
      }
      h = (h - unit.pool_window) / unit.pool_stride + 1;
      w = (w - unit.pool_window) / unit.pool_stride + 1;
    }
  }
}

NetworkSpec plain_cnn_spec(std::string name, std::span<const int> widths, int convs_per_unit,
                           int input_channels) {
  NetworkSpec spec;
  spec.name = std::move(name);
  int in = input_channels;
  for (int width : widths) {
    UnitSpec unit;
    for (int l = 0; l < convs_per_unit; ++l) {
      ConvLayerSpec conv;
      conv.in_channels = in;
      conv.out_channels = width;
      unit.layers.push_back(conv);
      in = width;
    }
    unit.pool_window = 2;
    unit.pool_stride = 2;
    spec.units.push_back(std::move(unit));
  }
  return spec;
}

NetworkSpec tiny_teacher_spec() {
  static constexpr int kWidths[] = {32, 64, 128};
  return plain_cnn_spec("TinyT", kWidths, 2);
}

NetworkSpec tiny_student_spec() {
  static constexpr int kWidths[] = {16, 32, 64};
  return plain_cnn_spec("TinyS", kWidths, 1);
}

NetworkSpec preset_network(const std::string& name) {
  if (name == "TinyT") return tiny_teacher_spec();
  if (name == "TinyS") return tiny_student_spec();
  throw ConfigError("unknown network preset '" + name + "' (known: TinyT, TinyS)");
}

Shape feature_shape(const NetworkSpec& spec, const TaskSpec& task, int unit_index) {
  if (unit_index < 1 || unit_index > static_cast<int>(spec.units.size())) {
    throw RangeError("tap unit " + std::to_string(unit_index) + " outside [1, " +
                     std::to_string(spec.units.size()) + "]");
  }
  int h = task.height, w = task.width;
  for (int u = 0; u < unit_index; ++u) {
    const UnitSpec& unit = spec.units[u];
    if (unit.pool_window > 0) {
      h = (h - unit.pool_window) / unit.pool_stride + 1;
      w = (w - unit.pool_window) / unit.pool_stride + 1;
    }
  }
  return Shape{spec.unit_channels(unit_index), h, w};
}

double compression_percent(std::size_t student_params, std::size_t teacher_params) {
  if (teacher_params == 0) throw ConfigError("compression_percent: teacher has no parameters");
  return 100.0 * (1.0 - static_cast<double>(student_params) / static_cast<double>(teacher_params));
}

// ---------------------------------------------------------------------------

template <typename T>
ConvBlock<T> make_conv_block(const ConvLayerSpec& spec, Rng& rng) {
  ConvBlock<T> block;
  block.spec = spec;
  const int fan_in = spec.in_channels * spec.kernel_h * spec.kernel_w;
  const double stddev = std::sqrt(2.0 / fan_in);
  block.weight = Tensor<T>(Shape{spec.out_channels, spec.in_channels, spec.kernel_h, spec.kernel_w});
  for (T& v : block.weight.data()) v = static_cast<T>(stddev * rng.normal());
  block.bias = Tensor<T>(Shape{spec.out_channels});
  if (spec.has_bn) {
    block.gamma = Tensor<T>(Shape{spec.out_channels}, T{1});
    block.beta = Tensor<T>(Shape{spec.out_channels});
    block.running_mean = Tensor<T>(Shape{spec.out_channels});
    block.running_var = Tensor<T>(Shape{spec.out_channels}, T{1});
  }
  for (Tensor<T>* t : {&block.weight, &block.bias, &block.gamma, &block.beta}) {
    if (t->defined()) t->set_requires_grad(true);
  }
  return block;
}

template <typename T>
Tensor<T> ConvBlock<T>::forward(GradTape<T>* tape, const Tensor<T>& x, Mode mode, int stride,
                                int padding) const {
  Tensor<T> y = conv2d(tape, x, weight, bias, stride, padding);
  if (spec.has_bn) {
    Tensor<T> rm = running_mean, rv = running_var;  // handles; written only in train mode
    y = batchnorm2d(tape, y, gamma, beta, rm, rv, mode);
  }
  if (spec.activation == Activation::kRelu) y = relu(tape, y);
  return y;
}

template <typename T>
void ConvBlock<T>::collect(const std::string& prefix, std::vector<Parameter<T>>& params,
                           std::vector<NamedTensor<T>>& buffers) const {
  params.push_back({prefix + ".weight", weight, true});
  params.push_back({prefix + ".bias", bias, false});
  if (spec.has_bn) {
    params.push_back({prefix + ".bn.gamma", gamma, false});
    params.push_back({prefix + ".bn.beta", beta, false});
    buffers.push_back({prefix + ".bn.running_mean", running_mean});
    buffers.push_back({prefix + ".bn.running_var", running_var});
  }
}

template <typename T>
Network<T>::Network(NetworkSpec spec, TaskSpec task, std::uint64_t seed)
    : spec_(std::move(spec)), task_(task) {
  validate(spec_, task_);
  Rng rng(seed);
  for (const UnitSpec& unit : spec_.units) {
    std::vector<ConvBlock<T>> blocks;
    for (const ConvLayerSpec& l : unit.layers) blocks.push_back(make_conv_block<T>(l, rng));
    units_.push_back(std::move(blocks));
  }
  const int fin = spec_.output_channels();
  const double stddev = std::sqrt(2.0 / fin);
  fc_weight_ = Tensor<T>(Shape{task_.num_classes, fin});
  for (T& v : fc_weight_.data()) v = static_cast<T>(stddev * rng.normal());
  fc_bias_ = Tensor<T>(Shape{task_.num_classes});
  fc_weight_.set_requires_grad(true);
  fc_bias_.set_requires_grad(true);
}

template <typename T>
ForwardResult<T> Network<T>::run(GradTape<T>* tape, const Tensor<T>& input,
                                 std::span<const int> tap_units, Mode mode,
                                 FeatureSource source) const {
  if (input.ndim() != 4 || input.dim(1) != task_.channels) {
    throw DimensionError("network '" + spec_.name + "': expected input [B," +
                         std::to_string(task_.channels) + ",H,W], got " +
                         shape_str(input.shape()));
  }
  const int num_units = static_cast<int>(units_.size());
  for (int t : tap_units) {
    if (t < 1 || t > num_units) {
      throw RangeError("tap unit " + std::to_string(t) + " outside [1, " +
                       std::to_string(num_units) + "] for network '" + spec_.name + "'");
    }
  }
  ForwardResult<T> result;
  Tensor<T> x = input;
  for (int u = 0; u < num_units; ++u) {
    for (const ConvBlock<T>& block : units_[u]) {
      x = block.forward(tape, x, mode, block.spec.stride, block.spec.padding);
    }
    const UnitSpec& unit = spec_.units[u];
    if (unit.pool_window > 0) x = max_pool2d(tape, x, unit.pool_window, unit.pool_stride);
    for (int t : tap_units) {
      if (t == u + 1) result.taps.push_back(FeatureMap<T>{x, u + 1, source});
    }
  }
  x = global_avg_pool(tape, x);
  result.logits = linear(tape, x, fc_weight_, fc_bias_);
  return result;
}

template <typename T>
ForwardResult<T> Network<T>::forward_with_taps(GradTape<T>* tape, const Tensor<T>& input,
                                               std::span<const int> tap_units, Mode mode,
                                               FeatureSource source) {
  return run(tape, input, tap_units, mode, source);
}

template <typename T>
ForwardResult<T> Network<T>::infer(const Tensor<T>& input, std::span<const int> tap_units,
                                   FeatureSource source) const {
  return run(nullptr, input, tap_units, Mode::kEval, source);
}

template <typename T>
std::vector<Parameter<T>> Network<T>::parameters() const {
  std::vector<Parameter<T>> params;
  std::vector<NamedTensor<T>> buffers;
  for (std::size_t u = 0; u < units_.size(); ++u) {
    for (std::size_t l = 0; l < units_[u].size(); ++l) {
      units_[u][l].collect("unit" + std::to_string(u + 1) + ".conv" + std::to_string(l + 1),
                           params, buffers);
    }
  }
  params.push_back({"classifier.weight", fc_weight_, true});
  params.push_back({"classifier.bias", fc_bias_, false});
  return params;
}

template <typename T>
std::vector<NamedTensor<T>> Network<T>::buffers() const {
  std::vector<Parameter<T>> params;
  std::vector<NamedTensor<T>> buffers;
  for (std::size_t u = 0; u < units_.size(); ++u) {
    for (std::size_t l = 0; l < units_[u].size(); ++l) {
      units_[u][l].collect("unit" + std::to_string(u + 1) + ".conv" + std::to_string(l + 1),
                           params, buffers);
    }
  }
  return buffers;
}

template <typename T>
std::size_t Network<T>::count_params() const {
  std::size_t n = 0;
  for (const Parameter<T>& p : parameters()) n += p.tensor.numel();
  return n;
}

template <typename T>
void Network<T>::set_requires_grad(bool value) {
  for (Parameter<T>& p : parameters()) p.tensor.set_requires_grad(value);
}

template <typename T>
Network<T> Network<T>::clone() const {
  Network copy = *this;
  auto deep = [](Tensor<T>& t) {
    if (!t.defined()) return;
    const bool rg = t.requires_grad();
    t = t.detach();
    t.set_requires_grad(rg);
  };
  for (auto& unit : copy.units_) {
    for (ConvBlock<T>& b : unit) {
      for (Tensor<T>* t : {&b.weight, &b.bias, &b.gamma, &b.beta, &b.running_mean, &b.running_var}) {
        deep(*t);
      }
    }
  }
  deep(copy.fc_weight_);
  deep(copy.fc_bias_);
  return copy;
}

template ConvBlock<float> make_conv_block<float>(const ConvLayerSpec&, Rng&);
template ConvBlock<double> make_conv_block<double>(const ConvLayerSpec&, Rng&);
template struct ConvBlock<float>;
template struct ConvBlock<double>;
template class Network<float>;
template class Network<double>;

}  // namespace mhkd
