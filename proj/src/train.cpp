#include "mhkd/train.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <sstream>

#include "mhkd/errors.hpp"
#include "mhkd/kernels.hpp"

namespace mhkd {

void validate(const OptimConfig& cfg) {
  auto fail = [](const std::string& what) { throw ConfigError("optim: " + what); };
  if (!(cfg.lr > 0.0) || !std::isfinite(cfg.lr)) fail("lr must be positive");
  if (!(cfg.momentum >= 0.0 && cfg.momentum < 1.0)) fail("momentum must lie in [0,1)");
  if (!(cfg.weight_decay >= 0.0) || !std::isfinite(cfg.weight_decay))
    fail("weight_decay must be non-negative");
  if (!(cfg.lr_gamma > 0.0 && cfg.lr_gamma <= 1.0)) fail("lr_gamma must lie in (0,1]");
  if (cfg.epochs < 1) fail("epochs must be >= 1");
  if (cfg.batch_size < 2) fail("batch_size must be >= 2 (train-mode batchnorm)");
  for (std::size_t i = 0; i < cfg.lr_milestones.size(); ++i) {
    int m = cfg.lr_milestones[i];
    if (m < 1 || m >= cfg.epochs) fail("lr_milestones must lie in [1, epochs)");
    if (i > 0 && m <= cfg.lr_milestones[i - 1]) fail("lr_milestones must be strictly increasing");
  }
}

double lr_at(const OptimConfig& cfg, int epoch) {
  if (epoch < 0 || epoch >= cfg.epochs)
    throw RangeError("lr_at: epoch " + std::to_string(epoch) + " outside [0, " +
                     std::to_string(cfg.epochs) + ")");
  double lr = cfg.lr;
  for (int m : cfg.lr_milestones)
    if (m <= epoch) lr *= cfg.lr_gamma;
  return lr;
}

template <typename T>
void sgd_step(Parameter<T>& param, std::span<const T> grad, std::span<T> velocity,
              const OptimConfig& cfg, double lr) {
  std::size_t n = param.tensor.numel();
  if (grad.size() != n || velocity.size() != n)
    throw ContractError("sgd_step: '" + param.name + "' has " + std::to_string(n) +
                        " values but grad " + std::to_string(grad.size()) + " and velocity " +
                        std::to_string(velocity.size()));
  T wd = param.decay ? static_cast<T>(cfg.weight_decay) : T{0};
  kernels::sgd_momentum(param.tensor.ptr(), grad.data(), velocity.data(), n, static_cast<T>(lr),
                        static_cast<T>(cfg.momentum), wd);
}

template <typename T>
Sgd<T>::Sgd(std::vector<Parameter<T>> params) : params_(std::move(params)) {
  std::size_t largest = 0;
  for (const auto& p : params_) {
    velocity_.emplace_back(p.tensor.numel(), T{0});
    largest = std::max(largest, p.tensor.numel());
  }
  zeros_.assign(largest, T{0});
}

template <typename T>
void Sgd<T>::zero_grad() {
  for (auto& p : params_) p.tensor.zero_grad();
}

template <typename T>
void Sgd<T>::step(const OptimConfig& cfg, double lr) {
  for (std::size_t i = 0; i < params_.size(); ++i) {
    auto& p = params_[i];
    std::span<const T> g = p.tensor.has_grad()
                               ? p.tensor.grad()
                               : std::span<const T>(zeros_.data(), p.tensor.numel());
    sgd_step<T>(p, g, velocity_[i], cfg, lr);
  }
}

template void sgd_step<float>(Parameter<float>&, std::span<const float>, std::span<float>,
                              const OptimConfig&, double);
template void sgd_step<double>(Parameter<double>&, std::span<const double>, std::span<double>,
                               const OptimConfig&, double);
template class Sgd<float>;
template class Sgd<double>;

SeedStreams SeedStreams::from(std::uint64_t run_seed) {
  SeedStreams s;
  s.init = derive_seed(run_seed, 101);
  s.shuffle = derive_seed(run_seed, 102);
  s.augment = derive_seed(run_seed, 103);
  s.heads = derive_seed(run_seed, 104);
  return s;
}

std::uint64_t SeedStreams::head_seed(FeatureSource source, int unit) const {
  std::uint64_t side = source == FeatureSource::kTeacher ? 0 : 1;
  return derive_seed(heads, side * 1000 + static_cast<std::uint64_t>(unit));
}

namespace {

std::string describe(const LossReport& r) {
  std::ostringstream os;
  os << "l_mhkd=" << r.l_mhkd << " l_kd=" << r.l_kd << " l_ce_final=" << r.l_ce_final
     << " l_kl_final=" << r.l_kl_final;
  for (std::size_t j = 0; j < r.per_head.size(); ++j)
    os << " head" << j << "{kl=" << r.per_head[j].l_kl << " ce=" << r.per_head[j].l_ce
       << " ohkd=" << r.per_head[j].l_ohkd << "}";
  return os.str();
}

// Per-epoch augmentation stream, so an epoch's batches depend only on
// (seed, epoch).
LabeledBatch prepare(const LabeledBatch& batch, const TrainOptions& opt, Rng& rng,
                     std::span<const float> fill) {
  if (!opt.augment_enabled) return batch;
  return augment(batch, rng, opt.augment, fill);
}

template <typename Net>
void keep_best(TrainHistory& h, const EpochRecord& rec, const Net& net, Net& best) {
  if (h.best_epoch < 0 || rec.test_acc > h.best_test_acc) {
    h.best_test_acc = rec.test_acc;
    h.best_epoch = rec.epoch;
    best = net.clone();
  }
}

std::vector<std::vector<float>> copy_velocity(const Sgd<float>& opt) { return opt.velocity(); }

}  // namespace

SupervisedResult train_supervised(const NetworkSpec& spec, const TaskSpec& task,
                                  const DatasetPair& data, const TrainOptions& options) {
  validate(options.optim);
  validate(spec, task);
  if (data.train.num_classes != task.num_classes)
    throw ConfigError("train: dataset has " + std::to_string(data.train.num_classes) +
                      " classes, network expects " + std::to_string(task.num_classes));
  const auto seeds = SeedStreams::from(options.seed);
  Network<float> net(spec, task, seeds.init);
  Network<float> best = net.clone();
  Sgd<float> opt(net.parameters());
  const auto fill = black_level(data.train.norm);

  TrainHistory hist;
  long long step = 0;
  for (int epoch = 0; epoch < options.optim.epochs; ++epoch) {
    const double lr = lr_at(options.optim, epoch);
    Rng aug_rng(derive_seed(seeds.augment, static_cast<std::uint64_t>(epoch)));
    BatchStream stream(data.train, options.optim.batch_size, seeds.shuffle, epoch);
    double loss_sum = 0.0;
    int steps = 0, batch_index = -1;
    while (auto raw = stream.next()) {
      ++batch_index;
      if (raw->labels.size() < 2) {
        ++hist.skipped_batches;
        continue;
      }
      LabeledBatch batch = prepare(*raw, options, aug_rng, fill);
      GradTape<float> tape;
      auto fwd = net.forward_with_taps(&tape, batch.images, {}, Mode::kTrain);
      auto loss = cross_entropy_loss(&tape, fwd.logits, std::span<const int>(batch.labels));
      const double value = loss.item();
      LossReport report;
      report.l_ce_final = value;
      if (!std::isfinite(value))
        throw DivergenceError("train: non-finite loss at epoch " + std::to_string(epoch) +
                              " step " + std::to_string(step) + ": " + describe(report));
      opt.zero_grad();
      tape.backward(loss);
      opt.step(options.optim, lr);
      if (options.record_steps) hist.steps.push_back({epoch, static_cast<int>(step), batch_index, report});
      loss_sum += value;
      ++steps;
      ++step;
    }
    EpochRecord rec;
    rec.epoch = epoch;
    rec.lr = lr;
    rec.train_loss = steps ? loss_sum / steps : 0.0;
    rec.test_acc = evaluate(net, data.test, options.eval_batch_size);
    keep_best(hist, rec, net, best);
    hist.epochs.push_back(rec);
    if (options.on_epoch) options.on_epoch(rec);
  }

  TrainState state{options.optim.epochs, step, options.seed, seeds, copy_velocity(opt)};
  return {std::move(net), std::move(best), std::move(hist), std::move(state)};
}

DistillResult train_student_mhkd(const Network<float>& teacher, const NetworkSpec& student_spec,
                                 const DistillConfig& cfg, const AuxHeadSpec& head_spec,
                                 const DatasetPair& data, const TrainOptions& options) {
  validate(options.optim);
  const TaskSpec& task = teacher.task();
  validate(student_spec, task);
  const int units = static_cast<int>(std::min(teacher.spec().units.size(), student_spec.units.size()));
  validate(cfg, units);
  if (!cfg.head_units.empty()) validate(head_spec, task);
  if (data.train.num_classes != task.num_classes)
    throw ConfigError("distill: dataset has " + std::to_string(data.train.num_classes) +
                      " classes, teacher expects " + std::to_string(task.num_classes));

  const auto seeds = SeedStreams::from(options.seed);
  Network<float> student(student_spec, task, seeds.init);
  Network<float> best = student.clone();

  std::vector<AuxHead<float>> heads_t, heads_s;
  for (int u : cfg.head_units) {
    heads_t.emplace_back(head_spec, teacher.spec().unit_channels(u),
                         seeds.head_seed(FeatureSource::kTeacher, u));
    heads_s.emplace_back(head_spec, student_spec.unit_channels(u),
                         seeds.head_seed(FeatureSource::kStudent, u));
  }

  auto params = student.parameters();
  for (std::size_t j = 0; j < heads_s.size(); ++j) {
    auto p = heads_s[j].parameters("head_s" + std::to_string(cfg.head_units[j]));
    params.insert(params.end(), p.begin(), p.end());
  }
  for (std::size_t j = 0; j < heads_t.size(); ++j) {
    auto p = heads_t[j].parameters("head_t" + std::to_string(cfg.head_units[j]));
    params.insert(params.end(), p.begin(), p.end());
  }
  Sgd<float> opt(std::move(params));
  const auto fill = black_level(data.train.norm);
  const std::size_t D = cfg.head_units.size();

  TrainHistory hist;
  long long step = 0;
  for (int epoch = 0; epoch < options.optim.epochs; ++epoch) {
    const double lr = lr_at(options.optim, epoch);
    Rng aug_rng(derive_seed(seeds.augment, static_cast<std::uint64_t>(epoch)));
    BatchStream stream(data.train, options.optim.batch_size, seeds.shuffle, epoch);
    double mhkd_sum = 0.0, kd_sum = 0.0;
    std::vector<double> head_sum(D, 0.0);
    int steps = 0, batch_index = -1;
    while (auto raw = stream.next()) {
      ++batch_index;
      if (raw->labels.size() < 2) {
        ++hist.skipped_batches;
        continue;
      }
      LabeledBatch batch = prepare(*raw, options, aug_rng, fill);
      std::span<const int> labels(batch.labels);

      auto fwd_t = teacher.infer(batch.images, cfg.head_units, FeatureSource::kTeacher);
      GradTape<float> tape;
      auto fwd_s = student.forward_with_taps(&tape, batch.images, cfg.head_units, Mode::kTrain,
                                             FeatureSource::kStudent);
      auto m = mhkd_loss<float>(&tape, fwd_t.taps, fwd_s.taps, heads_t, heads_s, fwd_t.logits,
                                fwd_s.logits, labels, cfg);
      Tensor<float> objective = m.loss;
      for (const auto& zt : m.teacher_head_logits)
        objective = add(&tape, objective, teacher_head_loss(&tape, zt, labels));

      if (!std::isfinite(objective.item()) || !std::isfinite(m.report.l_mhkd))
        throw DivergenceError("distill: non-finite loss at epoch " + std::to_string(epoch) +
                              " step " + std::to_string(step) + ": " + describe(m.report));
      check_report(m.report, cfg.beta);

      opt.zero_grad();
      tape.backward(objective);
      opt.step(options.optim, lr);

      mhkd_sum += m.report.l_mhkd;
      kd_sum += m.report.l_kd;
      for (std::size_t j = 0; j < D; ++j) head_sum[j] += m.report.per_head[j].l_ohkd;
      if (options.record_steps)
        hist.steps.push_back({epoch, static_cast<int>(step), batch_index, std::move(m.report)});
      ++steps;
      ++step;
    }
    EpochRecord rec;
    rec.epoch = epoch;
    rec.lr = lr;
    const double denom = steps ? steps : 1;
    rec.train_loss = mhkd_sum / denom;
    rec.l_kd = kd_sum / denom;
    for (double s : head_sum) rec.l_ohkd_head.push_back(s / denom);
    rec.test_acc = evaluate(student, data.test, options.eval_batch_size);
    if (D > 0)
      rec.head_acc = evaluate_heads(student, heads_s, cfg.head_units, data.test,
                                    options.eval_batch_size);
    keep_best(hist, rec, student, best);
    hist.epochs.push_back(rec);
    if (options.on_epoch) options.on_epoch(rec);
  }

  TrainState state{options.optim.epochs, step, options.seed, seeds, copy_velocity(opt)};
  return {std::move(student), std::move(best), std::move(heads_t), std::move(heads_s),
          std::move(hist), std::move(state)};
}

double evaluate(const Network<float>& net, const Dataset& ds, int batch_size) {
  if (ds.size() == 0) throw DataError("evaluate: empty dataset '" + ds.name + "'");
  BatchStream stream(ds, batch_size, 0, 0, /*shuffle=*/false);
  std::size_t correct = 0;
  while (auto batch = stream.next()) {
    auto fwd = net.infer(batch->images);
    double acc = batch_accuracy(fwd.logits, std::span<const int>(batch->labels));
    correct += static_cast<std::size_t>(std::llround(acc * static_cast<double>(batch->labels.size())));
  }
  return static_cast<double>(correct) / static_cast<double>(ds.size());
}

std::vector<double> evaluate_heads(const Network<float>& net, std::span<const AuxHead<float>> heads,
                                   std::span<const int> head_units, const Dataset& ds,
                                   int batch_size) {
  if (heads.size() != head_units.size())
    throw ConfigError("evaluate_heads: " + std::to_string(heads.size()) + " heads for " +
                      std::to_string(head_units.size()) + " tap units");
  std::vector<std::size_t> correct(heads.size(), 0);
  BatchStream stream(ds, batch_size, 0, 0, /*shuffle=*/false);
  while (auto batch = stream.next()) {
    auto fwd = net.infer(batch->images, head_units);
    for (std::size_t j = 0; j < heads.size(); ++j) {
      auto logits = heads[j].infer(fwd.taps[j].tensor);
      double acc = batch_accuracy(logits, std::span<const int>(batch->labels));
      correct[j] += static_cast<std::size_t>(std::llround(acc * static_cast<double>(batch->labels.size())));
    }
  }
  std::vector<double> out;
  for (auto c : correct) out.push_back(static_cast<double>(c) / static_cast<double>(ds.size()));
  return out;
}

SeedSummary summarize(std::span<const double> values) {
  SeedSummary s;
  s.n = static_cast<int>(values.size());
  if (s.n == 0) return s;
  s.mean = std::accumulate(values.begin(), values.end(), 0.0) / s.n;
  if (s.n > 1) {
    double ss = 0.0;
    for (double v : values) ss += (v - s.mean) * (v - s.mean);
    s.stddev = std::sqrt(ss / (s.n - 1));
  }
  return s;
}

std::string format_summary(const SeedSummary& s) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.2f (%.2f)", 100.0 * s.mean, 100.0 * s.stddev);
  return buf;
}

}  // namespace mhkd
