// mhkd: train a teacher, distill students, evaluate checkpoints, and render
// run reports. See README.md for the workflow.

#include <iostream>
#include <optional>
#include <string>

#include "CLI11.hpp"
#include "mhkd/experiment.hpp"
#include "mhkd/kernels.hpp"

int main(int argc, char** argv) {
  CLI::App app{"Multi-head knowledge distillation experiments"};
  app.require_subcommand(1);

  std::string config, teacher_ckpt, checkpoint, reference, run_dir, output_dir;
  std::optional<std::uint64_t> seed_override;
  bool ablation = false, quiet = false;

  auto add_common = [&](CLI::App* cmd) {
    cmd->add_option("--config", config, "experiment config file")->required()->check(CLI::ExistingFile);
    cmd->add_option("--seed-override", seed_override, "run this single seed instead of the config's");
    cmd->add_option("--output-dir", output_dir, "override [experiment] output_dir");
    cmd->add_flag("--quiet", quiet, "no per-epoch progress");
  };

  auto* teacher = app.add_subcommand("train-teacher", "train the teacher with cross-entropy");
  add_common(teacher);
  auto* baseline = app.add_subcommand("baseline", "train the student alone with cross-entropy");
  add_common(baseline);
  auto* distill = app.add_subcommand("distill", "distill the student from a trained teacher");
  add_common(distill);
  distill->add_option("--teacher-ckpt", teacher_ckpt, "teacher checkpoint")
      ->required()
      ->check(CLI::ExistingFile);
  distill->add_flag("--ablation", ablation, "run each head placement of [experiment] ablation");

  auto* eval = app.add_subcommand("eval", "top-1 accuracy and size of a checkpoint");
  eval->add_option("--checkpoint", checkpoint, "checkpoint to evaluate")->required()->check(CLI::ExistingFile);
  eval->add_option("--config", config, "config whose [data] test split is used")
      ->required()
      ->check(CLI::ExistingFile);
  eval->add_option("--reference", reference, "reference checkpoint for compression %")
      ->check(CLI::ExistingFile);

  auto* report = app.add_subcommand("report", "SVG curves and markdown summary of a run directory");
  report->add_option("run_dir", run_dir, "output directory of a run")->required();

  CLI11_PARSE(app, argc, argv);

  mhkd::RunOptions opt;
  opt.seed_override = seed_override;
  if (!output_dir.empty()) opt.output_dir = output_dir;
  opt.log = quiet ? nullptr : &std::cerr;
  if (!quiet && !report->parsed() && !eval->parsed())
    std::cerr << "kernels: " << mhkd::kernels::isa_name(mhkd::kernels::active_isa()) << std::endl;

  if (teacher->parsed()) return mhkd::cmd_train_teacher(config, opt, std::cerr);
  if (baseline->parsed()) return mhkd::cmd_baseline(config, opt, std::cerr);
  if (distill->parsed()) return mhkd::cmd_distill(config, teacher_ckpt, ablation, opt, std::cerr);
  if (eval->parsed()) {
    std::optional<std::filesystem::path> ref;
    if (!reference.empty()) ref = reference;
    return mhkd::cmd_eval(checkpoint, config, ref, std::cout, std::cerr);
  }
  return mhkd::cmd_report(run_dir, std::cout, std::cerr);
}
