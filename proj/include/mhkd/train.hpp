#pragma once

// SGD with momentum, the step schedule, and the two training procedures:
// supervised cross-entropy (teacher pretraining and the student baseline) and
// MHKD distillation of a student against a frozen teacher.

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "mhkd/data.hpp"
#include "mhkd/distill.hpp"
#include "mhkd/nn.hpp"

namespace mhkd {

struct OptimConfig {
  double lr = 0.05;
  double momentum = 0.9;
  double weight_decay = 5e-4;
  std::vector<int> lr_milestones = {15, 22, 27};
  double lr_gamma = 0.1;
  int epochs = 30;
  int batch_size = 64;

  bool operator==(const OptimConfig&) const = default;
};

void validate(const OptimConfig& cfg);

// lr * gamma^(number of milestones <= epoch); epoch is 0-based.
double lr_at(const OptimConfig& cfg, int epoch);

// v <- momentum*v + grad + wd*param; param <- param - lr*v. Weight decay is
// skipped for parameters flagged decay=false. Throws ContractError when the
// three buffers disagree in size.
template <typename T>
void sgd_step(Parameter<T>& param, std::span<const T> grad, std::span<T> velocity,
              const OptimConfig& cfg, double lr);

// Owns one velocity buffer per parameter.
template <typename T>
class Sgd {
 public:
  explicit Sgd(std::vector<Parameter<T>> params);
  void zero_grad();
  // Parameters that received no gradient this step are stepped with zeros.
  void step(const OptimConfig& cfg, double lr);

  const std::vector<Parameter<T>>& params() const { return params_; }
  std::vector<std::vector<T>>& velocity() { return velocity_; }
  const std::vector<std::vector<T>>& velocity() const { return velocity_; }

 private:
  std::vector<Parameter<T>> params_;
  std::vector<std::vector<T>> velocity_;
  std::vector<T> zeros_;
};

// Independent seed streams of one run. Heads draw from their own stream, so
// adding or removing heads never shifts backbone init, shuffling or
// augmentation.
struct SeedStreams {
  std::uint64_t init = 0, shuffle = 0, augment = 0, heads = 0;
  static SeedStreams from(std::uint64_t run_seed);
  std::uint64_t head_seed(FeatureSource source, int unit) const;
};

struct EpochRecord {
  int epoch = 0;
  double lr = 0.0;
  double train_loss = 0.0;          // mean objective of the trained network
  std::optional<double> l_kd;       // distillation runs only
  std::vector<double> l_ohkd_head;  // per head, mean over the epoch's steps
  std::vector<double> head_acc;     // student heads, test split, eval mode
  double test_acc = 0.0;
};

struct StepRecord {
  int epoch = 0;
  int step = 0;
  int batch = 0;
  LossReport report;  // for supervised runs only l_ce_final is set
};

struct TrainHistory {
  std::vector<EpochRecord> epochs;
  std::vector<StepRecord> steps;
  int skipped_batches = 0;  // batches of one image, which train-mode BN cannot take
  double best_test_acc = 0.0;
  int best_epoch = -1;
};

struct TrainOptions {
  OptimConfig optim;
  AugmentPolicy augment;
  bool augment_enabled = true;
  std::uint64_t seed = 0;
  bool record_steps = true;
  int eval_batch_size = 250;
  std::function<void(const EpochRecord&)> on_epoch;  // progress hook
};

// Training state carried into checkpoints.
struct TrainState {
  int epoch = 0;  // epochs completed
  long long step = 0;
  std::uint64_t run_seed = 0;
  SeedStreams seeds;
  std::vector<std::vector<float>> velocity;  // parameter order of the optimizer
};

struct SupervisedResult {
  Network<float> model;  // final epoch
  Network<float> best;   // best test accuracy
  TrainHistory history;
  TrainState state;
};

// Plain cross-entropy training from a seeded init.
SupervisedResult train_supervised(const NetworkSpec& spec, const TaskSpec& task,
                                  const DatasetPair& data, const TrainOptions& options);

struct DistillResult {
  Network<float> student;  // final epoch
  Network<float> best;
  std::vector<AuxHead<float>> heads_teacher, heads_student;  // aligned with head_units
  TrainHistory history;
  TrainState state;
};

// MHKD: frozen teacher (eval mode, no tape) provides taps and logits; the
// student backbone, student heads and teacher heads are optimized against
// L_MHKD + sum_j CE(teacher head j). Throws DivergenceError on a non-finite
// objective, naming the last LossReport.
DistillResult train_student_mhkd(const Network<float>& teacher, const NetworkSpec& student_spec,
                                 const DistillConfig& cfg, const AuxHeadSpec& head_spec,
                                 const DatasetPair& data, const TrainOptions& options);

// Top-1 accuracy in eval mode over the whole split.
double evaluate(const Network<float>& net, const Dataset& ds, int batch_size = 250);
// Top-1 of each head on its tap of `net`, eval mode.
std::vector<double> evaluate_heads(const Network<float>& net, std::span<const AuxHead<float>> heads,
                                   std::span<const int> head_units, const Dataset& ds,
                                   int batch_size = 250);

struct SeedSummary {
  double mean = 0.0;
  double stddev = 0.0;  // sample std (n-1); 0 for a single seed
  int n = 0;
};

SeedSummary summarize(std::span<const double> values);
// "75.28 (0.26)": accuracies given as fractions, printed in percent.
std::string format_summary(const SeedSummary& s);

}  // namespace mhkd
