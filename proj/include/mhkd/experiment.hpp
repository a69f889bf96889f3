#pragma once

// Experiment orchestration behind the CLI subcommands. Output layout under the
// configured output directory:
//
//   teacher/seed_<s>/         teacher.ckpt (final), teacher_best.ckpt, metrics.csv, steps.csv
//   baseline/seed_<s>/        student.ckpt, metrics.csv, steps.csv       (student, CE only)
//   <method>/seed_<s>/        student.ckpt (with heads and training state),
//                             student_deploy.ckpt (network only), metrics.csv, steps.csv
//   <stage>/manifest.cfg      resolved configuration of that stage
//   summary.csv, summary.md   one row per method, merged across commands
//
// <method> is "kd" (beta = 0 or no heads), "mhkd", or "head-1", "head-1+2+3", ...
// in ablation mode.

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "mhkd/config.hpp"
#include "mhkd/report.hpp"

namespace mhkd {

struct RunOptions {
  std::optional<std::uint64_t> seed_override;
  std::optional<std::filesystem::path> output_dir;
  std::ostream* log = nullptr;  // progress lines; null for silence
};

// Exit codes shared by every subcommand.
enum ExitCode : int {
  kExitOk = 0,
  kExitFailure = 1,
  kExitConfig = 2,
  kExitData = 3,
  kExitCheckpoint = 4,
  kExitDivergence = 5,
};

// Seeds and output directory after applying RunOptions.
std::vector<std::uint64_t> effective_seeds(const ExperimentConfig& cfg, const RunOptions& opt);
std::filesystem::path effective_output(const ExperimentConfig& cfg, const RunOptions& opt);

// Method label and directory name for a distillation run.
std::string method_label(const DistillConfig& cfg);
std::string method_dir(const std::string& label);
// "Head-1", "Head-1+2+3".
std::string ablation_label(const std::vector<int>& head_units);

// Progress lines label head accuracies by unit, "h<unit>".
TrainOptions train_options(const ExperimentConfig& cfg, const OptimConfig& optim,
                           std::uint64_t seed, std::ostream* log, const std::string& tag,
                           const std::vector<int>& head_units = {});

// Library entry points; they throw the typed errors of the lower layers.
SummaryRow run_teacher(const ExperimentConfig& cfg, const DatasetPair& data,
                       const std::vector<std::uint64_t>& seeds, const std::filesystem::path& out,
                       std::ostream* log);
SummaryRow run_baseline(const ExperimentConfig& cfg, const DatasetPair& data,
                        const std::vector<std::uint64_t>& seeds, const std::filesystem::path& out,
                        std::ostream* log);
SummaryRow run_distill(const ExperimentConfig& cfg, const DistillConfig& distill,
                       const std::string& label, const Network<float>& teacher,
                       const DatasetPair& data, const std::vector<std::uint64_t>& seeds,
                       const std::filesystem::path& out, std::ostream* log);

// Inserts or replaces rows (by method) in <dir>/summary.csv and rewrites summary.md.
void merge_summary(const std::filesystem::path& dir, const std::vector<SummaryRow>& rows);

// Subcommands; errors are reported on `err` and mapped to an ExitCode.
int cmd_train_teacher(const std::filesystem::path& config, const RunOptions& opt, std::ostream& err);
int cmd_baseline(const std::filesystem::path& config, const RunOptions& opt, std::ostream& err);
int cmd_distill(const std::filesystem::path& config, const std::filesystem::path& teacher_ckpt,
                bool ablation, const RunOptions& opt, std::ostream& err);
int cmd_eval(const std::filesystem::path& checkpoint, const std::filesystem::path& config,
             const std::optional<std::filesystem::path>& reference, std::ostream& out,
             std::ostream& err);
int cmd_report(const std::filesystem::path& run_dir, std::ostream& out, std::ostream& err);

}  // namespace mhkd
