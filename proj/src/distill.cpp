#include "mhkd/distill.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "mhkd/errors.hpp"
#include "mhkd/ops.hpp"
#include "mhkd/rng.hpp"

namespace mhkd {

void validate(const AuxHeadSpec& spec, const TaskSpec& task) {
  if (spec.num_conv < 0) throw ConfigError("aux head: num_conv must be >= 0");
  if (spec.num_fc < 1) throw ConfigError("aux head: num_fc must be >= 1");
  if (spec.conv_channels < 1 || spec.kernel < 1 || spec.fc_hidden < 1) {
    throw ConfigError("aux head: conv_channels, kernel and fc_hidden must be >= 1");
  }
  if (spec.num_classes != task.num_classes) {
    throw ConfigError("aux head: K=" + std::to_string(spec.num_classes) +
                      " does not match the task's K=" + std::to_string(task.num_classes));
  }
}

void validate(const DistillConfig& cfg, int num_units) {
  if (!(cfg.temperature > 0.0)) throw ConfigError("distill: temperature must be > 0");
  if (!(cfg.alpha >= 0.0 && cfg.alpha <= 1.0)) throw ConfigError("distill: alpha must be in [0,1]");
  if (!(cfg.kd_alpha >= 0.0 && cfg.kd_alpha <= 1.0)) {
    throw ConfigError("distill: kd_alpha must be in [0,1]");
  }
  if (!(cfg.beta >= 0.0)) throw ConfigError("distill: beta must be >= 0");
  for (std::size_t i = 0; i < cfg.head_units.size(); ++i) {
    const int u = cfg.head_units[i];
    if (u < 1 || u > num_units) {
      throw ConfigError("distill: head unit " + std::to_string(u) + " outside [1, " +
                        std::to_string(num_units) + "]");
    }
    if (std::count(cfg.head_units.begin(), cfg.head_units.end(), u) > 1) {
      throw ConfigError("distill: head unit " + std::to_string(u) + " listed twice");
    }
  }
}

double recompose_mhkd(const LossReport& report, double beta) {
  double sum = 0.0;
  for (const HeadLoss& h : report.per_head) sum += h.l_ohkd;
  return beta * sum + report.l_kd;
}

void check_report(const LossReport& report, double beta, double rel_tol) {
  const double expected = recompose_mhkd(report, beta);
  const double scale = std::max({std::abs(expected), std::abs(report.l_mhkd), 1e-12});
  if (!(std::abs(expected - report.l_mhkd) <= rel_tol * scale)) {
    throw ContractError("loss report does not recompose: l_mhkd=" + std::to_string(report.l_mhkd) +
                        " vs beta*sum(l_ohkd)+l_kd=" + std::to_string(expected));
  }
  // KL terms can come out a few ulps below zero in floating point.
  const double slack = -1e-6 * std::max(1.0, std::abs(report.l_mhkd));
  auto nonneg = [&](double v, const char* what) {
    if (!(v >= slack)) throw ContractError(std::string("negative loss component ") + what);
  };
  nonneg(report.l_ce_final, "l_ce_final");
  nonneg(report.l_kl_final, "l_kl_final");
  nonneg(report.l_kd, "l_kd");
  nonneg(report.l_mhkd, "l_mhkd");
  for (const HeadLoss& h : report.per_head) {
    nonneg(h.l_kl, "head l_kl");
    nonneg(h.l_ce, "head l_ce");
    nonneg(h.l_ohkd, "head l_ohkd");
  }
}

namespace {

template <typename T>
void require_logits(const Tensor<T>& logits, const char* op) {
  if (!logits.defined() || logits.ndim() != 2) {
    throw DimensionError(std::string(op) + ": logits must be [B,K], got " +
                         (logits.defined() ? shape_str(logits.shape()) : "<undefined>"));
  }
}

// log softmax of one row of logits / tau.
template <typename T>
void log_softmax_row(const T* z, int k, T tau, T* out) {
  T mx = -std::numeric_limits<T>::infinity();
  for (int j = 0; j < k; ++j) mx = std::max(mx, z[j] / tau);
  T s{0};
  for (int j = 0; j < k; ++j) s += std::exp(z[j] / tau - mx);
  const T log_norm = mx + std::log(s);
  for (int j = 0; j < k; ++j) out[j] = z[j] / tau - log_norm;
}

}  // namespace

template <typename T>
Tensor<T> log_softmax_t(const Tensor<T>& logits, T tau) {
  require_logits(logits, "log_softmax_t");
  if (!(tau > T{0})) throw ConfigError("softmax temperature must be > 0");
  Tensor<T> out(logits.shape());
  const int b = logits.dim(0), k = logits.dim(1);
  for (int i = 0; i < b; ++i) {
    log_softmax_row(logits.ptr() + static_cast<std::size_t>(i) * k, k, tau,
                    out.ptr() + static_cast<std::size_t>(i) * k);
  }
  return out;
}

template <typename T>
Tensor<T> softmax_t(const Tensor<T>& logits, T tau) {
  Tensor<T> out = log_softmax_t(logits, tau);
  for (T& v : out.data()) v = std::exp(v);
  return out;
}

template <typename T>
Tensor<T> kl_div_loss(GradTape<T>* tape, const Tensor<T>& teacher_logits,
                      const Tensor<T>& student_logits, T tau) {
  require_logits(teacher_logits, "kl_div_loss");
  require_logits(student_logits, "kl_div_loss");
  if (teacher_logits.shape() != student_logits.shape()) {
    throw DimensionError("kl_div_loss: teacher " + shape_str(teacher_logits.shape()) +
                         " vs student " + shape_str(student_logits.shape()));
  }
  const int b = student_logits.dim(0), k = student_logits.dim(1);
  const Tensor<T> log_pt = log_softmax_t(teacher_logits, tau);
  const Tensor<T> log_ps = log_softmax_t(student_logits, tau);
  T total{0};
  for (std::size_t i = 0; i < log_pt.numel(); ++i) {
    const T pt = std::exp(log_pt.ptr()[i]);
    total += pt * (log_pt.ptr()[i] - log_ps.ptr()[i]);
  }
  Tensor<T> out = Tensor<T>::scalar(tau * tau * total / static_cast<T>(b));
  if (should_record(tape, student_logits)) {
    tape->record(out, [student_logits, out, log_pt, log_ps, tau, b, k]() mutable {
      // d/ds = tau^2/B * (p_s - p_t) / tau
      const T g = out.grad()[0] * tau / static_cast<T>(b);
      auto ds = student_logits.mutable_grad();
      for (std::size_t i = 0; i < static_cast<std::size_t>(b) * k; ++i) {
        ds[i] += g * (std::exp(log_ps.ptr()[i]) - std::exp(log_pt.ptr()[i]));
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> cross_entropy_loss(GradTape<T>* tape, const Tensor<T>& logits,
                             std::span<const int> labels) {
  require_logits(logits, "cross_entropy_loss");
  const int b = logits.dim(0), k = logits.dim(1);
  if (static_cast<int>(labels.size()) != b) {
    throw DimensionError("cross_entropy_loss: " + std::to_string(labels.size()) +
                         " labels for batch of " + std::to_string(b));
  }
  for (int i = 0; i < b; ++i) {
    if (labels[i] < 0 || labels[i] >= k) {
      throw DataError("cross_entropy_loss: label " + std::to_string(labels[i]) + " at row " +
                      std::to_string(i) + " outside [0, " + std::to_string(k) + ")");
    }
  }
  const Tensor<T> log_p = log_softmax_t(logits, T{1});
  T total{0};
  for (int i = 0; i < b; ++i) total -= log_p.ptr()[static_cast<std::size_t>(i) * k + labels[i]];
  Tensor<T> out = Tensor<T>::scalar(total / static_cast<T>(b));
  if (should_record(tape, logits)) {
    std::vector<int> y(labels.begin(), labels.end());
    tape->record(out, [logits, out, log_p, y = std::move(y), b, k]() mutable {
      const T g = out.grad()[0] / static_cast<T>(b);
      auto dz = logits.mutable_grad();
      for (int i = 0; i < b; ++i) {
        for (int j = 0; j < k; ++j) {
          const std::size_t idx = static_cast<std::size_t>(i) * k + j;
          dz[idx] += g * (std::exp(log_p.ptr()[idx]) - (j == y[i] ? T{1} : T{0}));
        }
      }
    });
  }
  return out;
}

template <typename T>
LossTerm<T> ohkd_loss(GradTape<T>* tape, const Tensor<T>& teacher_head_logits,
                      const Tensor<T>& student_head_logits, std::span<const int> labels, T tau,
                      T alpha) {
  if (!(alpha >= T{0} && alpha <= T{1})) throw ConfigError("ohkd_loss: alpha must be in [0,1]");
  Tensor<T> kl = kl_div_loss(tape, teacher_head_logits, student_head_logits, tau);
  Tensor<T> ce = cross_entropy_loss(tape, student_head_logits, labels);
  Tensor<T> loss = add(tape, scale(tape, kl, alpha), scale(tape, ce, T{1} - alpha));
  return {loss, HeadLoss{static_cast<double>(kl.item()), static_cast<double>(ce.item()),
                         static_cast<double>(loss.item())}};
}

template <typename T>
LossTerm<T> kd_loss(GradTape<T>* tape, const Tensor<T>& teacher_logits,
                    const Tensor<T>& student_logits, std::span<const int> labels, T tau,
                    T kd_alpha) {
  return ohkd_loss(tape, teacher_logits, student_logits, labels, tau, kd_alpha);
}

template <typename T>
Tensor<T> teacher_head_loss(GradTape<T>* tape, const Tensor<T>& teacher_head_logits,
                            std::span<const int> labels) {
  return cross_entropy_loss(tape, teacher_head_logits, labels);
}

template <typename T>
MhkdResult<T> mhkd_loss(GradTape<T>* tape, std::span<const FeatureMap<T>> taps_t,
                        std::span<const FeatureMap<T>> taps_s, std::span<AuxHead<T>> heads_t,
                        std::span<AuxHead<T>> heads_s, const Tensor<T>& final_t,
                        const Tensor<T>& final_s, std::span<const int> labels,
                        const DistillConfig& cfg) {
  const std::size_t d = cfg.head_units.size();
  if (taps_t.size() != d || taps_s.size() != d || heads_t.size() != d || heads_s.size() != d) {
    throw ConfigError("mhkd_loss: D=" + std::to_string(d) + " heads configured but got " +
                      std::to_string(taps_t.size()) + " teacher taps, " +
                      std::to_string(taps_s.size()) + " student taps, " +
                      std::to_string(heads_t.size()) + "/" + std::to_string(heads_s.size()) +
                      " heads");
  }
  const T tau = static_cast<T>(cfg.temperature);
  MhkdResult<T> result;
  Tensor<T> head_sum;
  for (std::size_t j = 0; j < d; ++j) {
    if (taps_t[j].unit_index != cfg.head_units[j] || taps_s[j].unit_index != cfg.head_units[j]) {
      throw ConfigError("mhkd_loss: tap " + std::to_string(j) + " is from units " +
                        std::to_string(taps_t[j].unit_index) + "/" +
                        std::to_string(taps_s[j].unit_index) + ", expected unit " +
                        std::to_string(cfg.head_units[j]));
    }
    // The teacher tap is cut from its backbone: teacher heads learn from
    // their own CE, the frozen backbone never sees a gradient.
    Tensor<T> zt = heads_t[j].forward(tape, taps_t[j].tensor.detach(), Mode::kTrain);
    Tensor<T> zs = heads_s[j].forward(tape, taps_s[j].tensor, Mode::kTrain);
    LossTerm<T> term = ohkd_loss(tape, zt.detach(), zs, labels, tau, static_cast<T>(cfg.alpha));
    head_sum = head_sum.defined() ? add(tape, head_sum, term.loss) : term.loss;
    result.report.per_head.push_back(term.parts);
    result.report.head_accuracies.push_back(batch_accuracy(zs, labels));
    result.teacher_head_logits.push_back(zt);
    result.student_head_logits.push_back(zs);
  }
  LossTerm<T> kd = kd_loss(tape, final_t.detach(), final_s, labels, tau, static_cast<T>(cfg.kd_alpha));
  result.loss = d == 0 ? kd.loss
                       : add(tape, scale(tape, head_sum, static_cast<T>(cfg.beta)), kd.loss);
  result.report.l_ce_final = kd.parts.l_ce;
  result.report.l_kl_final = kd.parts.l_kl;
  result.report.l_kd = kd.parts.l_ohkd;
  result.report.l_mhkd = result.loss.item();
  return result;
}

template <typename T>
double batch_accuracy(const Tensor<T>& logits, std::span<const int> labels) {
  require_logits(logits, "batch_accuracy");
  const int b = logits.dim(0), k = logits.dim(1);
  if (b == 0) return 0.0;
  int correct = 0;
  for (int i = 0; i < b; ++i) {
    const T* row = logits.ptr() + static_cast<std::size_t>(i) * k;
    const int pred = static_cast<int>(std::max_element(row, row + k) - row);
    correct += pred == labels[i];
  }
  return static_cast<double>(correct) / b;
}

// ---------------------------------------------------------------------------

template <typename T>
AuxHead<T>::AuxHead(const AuxHeadSpec& spec, int in_channels, std::uint64_t seed)
    : spec_(spec), in_channels_(in_channels) {
  if (in_channels < 1) throw ConfigError("aux head: in_channels must be >= 1");
  if (spec.num_conv < 0 || spec.num_fc < 1 || spec.conv_channels < 1 || spec.kernel < 1 ||
      spec.fc_hidden < 1 || spec.num_classes < 2) {
    throw ConfigError("aux head: invalid spec");
  }
  Rng rng(seed);
  int channels = in_channels;
  for (int c = 0; c < spec.num_conv; ++c) {
    ConvLayerSpec conv;
    conv.in_channels = channels;
    conv.out_channels = spec.conv_channels;
    conv.kernel_h = conv.kernel_w = spec.kernel;
    conv.stride = 2;
    conv.padding = spec.kernel / 2;
    convs_.push_back(make_conv_block<T>(conv, rng));
    channels = spec.conv_channels;
  }
  int fin = channels;
  for (int f = 0; f < spec.num_fc; ++f) {
    const int fout = f + 1 == spec.num_fc ? spec.num_classes : spec.fc_hidden;
    Tensor<T> w(Shape{fout, fin});
    const double stddev = std::sqrt(2.0 / fin);
    for (T& v : w.data()) v = static_cast<T>(stddev * rng.normal());
    w.set_requires_grad(true);
    Tensor<T> b(Shape{fout});
    b.set_requires_grad(true);
    fc_weights_.push_back(w);
    fc_biases_.push_back(b);
    fin = fout;
  }
}

template <typename T>
Tensor<T> AuxHead<T>::run(GradTape<T>* tape, const Tensor<T>& feature, Mode mode) const {
  if (feature.ndim() != 4 || feature.dim(1) != in_channels_) {
    throw DimensionError("aux head: expected feature [B," + std::to_string(in_channels_) +
                         ",H,W], got " + shape_str(feature.shape()));
  }
  Tensor<T> x = feature;
  for (const ConvBlock<T>& conv : convs_) x = conv.forward(tape, x, mode, conv.spec.stride, conv.spec.padding);
  x = global_avg_pool(tape, x);
  for (std::size_t f = 0; f < fc_weights_.size(); ++f) {
    x = linear(tape, x, fc_weights_[f], fc_biases_[f]);
    if (f + 1 < fc_weights_.size()) x = relu(tape, x);
  }
  return x;
}

template <typename T>
Tensor<T> AuxHead<T>::forward(GradTape<T>* tape, const Tensor<T>& feature, Mode mode) {
  return run(tape, feature, mode);
}

template <typename T>
Tensor<T> AuxHead<T>::infer(const Tensor<T>& feature) const {
  return run(nullptr, feature, Mode::kEval);
}

template <typename T>
std::vector<Parameter<T>> AuxHead<T>::parameters(const std::string& prefix) const {
  std::vector<Parameter<T>> params;
  std::vector<NamedTensor<T>> buffers;
  for (std::size_t c = 0; c < convs_.size(); ++c) {
    convs_[c].collect(prefix + ".conv" + std::to_string(c + 1), params, buffers);
  }
  for (std::size_t f = 0; f < fc_weights_.size(); ++f) {
    params.push_back({prefix + ".fc" + std::to_string(f + 1) + ".weight", fc_weights_[f], true});
    params.push_back({prefix + ".fc" + std::to_string(f + 1) + ".bias", fc_biases_[f], false});
  }
  return params;
}

template <typename T>
std::vector<NamedTensor<T>> AuxHead<T>::buffers(const std::string& prefix) const {
  std::vector<Parameter<T>> params;
  std::vector<NamedTensor<T>> buffers;
  for (std::size_t c = 0; c < convs_.size(); ++c) {
    convs_[c].collect(prefix + ".conv" + std::to_string(c + 1), params, buffers);
  }
  return buffers;
}

template <typename T>
std::size_t AuxHead<T>::count_params() const {
  std::size_t n = 0;
  for (const Parameter<T>& p : parameters()) n += p.tensor.numel();
  return n;
}

template <typename T>
AuxHead<T> AuxHead<T>::clone() const {
  AuxHead copy = *this;
  auto deep = [](Tensor<T>& t) {
    if (!t.defined()) return;
    const bool rg = t.requires_grad();
    t = t.detach();
    t.set_requires_grad(rg);
  };
  for (ConvBlock<T>& b : copy.convs_) {
    for (Tensor<T>* t : {&b.weight, &b.bias, &b.gamma, &b.beta, &b.running_mean, &b.running_var}) {
      deep(*t);
    }
  }
  for (Tensor<T>& t : copy.fc_weights_) deep(t);
  for (Tensor<T>& t : copy.fc_biases_) deep(t);
  return copy;
}

#define MHKD_INSTANTIATE_DISTILL(T)                                                              \
  template class AuxHead<T>;                                                                     \
  template Tensor<T> softmax_t(const Tensor<T>&, T);                                             \
  template Tensor<T> log_softmax_t(const Tensor<T>&, T);                                         \
  template Tensor<T> kl_div_loss(GradTape<T>*, const Tensor<T>&, const Tensor<T>&, T);           \
  template Tensor<T> cross_entropy_loss(GradTape<T>*, const Tensor<T>&, std::span<const int>);   \
  template LossTerm<T> ohkd_loss(GradTape<T>*, const Tensor<T>&, const Tensor<T>&,               \
                                 std::span<const int>, T, T);                                    \
  template LossTerm<T> kd_loss(GradTape<T>*, const Tensor<T>&, const Tensor<T>&,                 \
                               std::span<const int>, T, T);                                      \
  template Tensor<T> teacher_head_loss(GradTape<T>*, const Tensor<T>&, std::span<const int>);    \
  template MhkdResult<T> mhkd_loss(GradTape<T>*, std::span<const FeatureMap<T>>,                 \
                                   std::span<const FeatureMap<T>>, std::span<AuxHead<T>>,        \
                                   std::span<AuxHead<T>>, const Tensor<T>&, const Tensor<T>&,    \
                                   std::span<const int>, const DistillConfig&);                  \
  template double batch_accuracy(const Tensor<T>&, std::span<const int>);

MHKD_INSTANTIATE_DISTILL(float)
MHKD_INSTANTIATE_DISTILL(double)

}  // namespace mhkd
