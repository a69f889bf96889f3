#include "mhkd/experiment.hpp"

#include <chrono>
#include <cstdio>
#include <fstream>
#include <ostream>

#include "mhkd/checkpoint.hpp"
#include "mhkd/errors.hpp"

namespace mhkd {

namespace fs = std::filesystem;

std::vector<std::uint64_t> effective_seeds(const ExperimentConfig& cfg, const RunOptions& opt) {
  if (opt.seed_override) return {*opt.seed_override};
  return cfg.seeds;
}

fs::path effective_output(const ExperimentConfig& cfg, const RunOptions& opt) {
  return opt.output_dir ? *opt.output_dir : fs::path(cfg.output_dir);
}

std::string method_label(const DistillConfig& cfg) {
  return cfg.beta == 0.0 || cfg.head_units.empty() ? "KD" : "MHKD";
}

std::string method_dir(const std::string& label) {
  std::string out;
  for (char c : label) out += static_cast<char>(c >= 'A' && c <= 'Z' ? c - 'A' + 'a' : c);
  return out;
}

std::string ablation_label(const std::vector<int>& head_units) {
  std::string s = "Head-";
  for (std::size_t i = 0; i < head_units.size(); ++i)
    s += (i ? "+" : "") + std::to_string(head_units[i]);
  return s;
}

TrainOptions train_options(const ExperimentConfig& cfg, const OptimConfig& optim,
                           std::uint64_t seed, std::ostream* log, const std::string& tag,
                           const std::vector<int>& head_units) {
  TrainOptions t;
  t.optim = optim;
  t.augment = cfg.augment.policy;
  t.augment_enabled = cfg.augment.enabled;
  t.seed = seed;
  t.eval_batch_size = cfg.eval_batch_size;
  if (log) {
    auto start = std::make_shared<std::chrono::steady_clock::time_point>(std::chrono::steady_clock::now());
    const int epochs = optim.epochs;
    t.on_epoch = [log, tag, start, epochs, head_units](const EpochRecord& e) {
      double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - *start).count();
      char buf[256];
      std::snprintf(buf, sizeof buf, "[%s] epoch %d/%d lr %.3g loss %.4f test %.2f%% (%.0f s)",
                    tag.c_str(), e.epoch + 1, epochs, e.lr, e.train_loss, 100.0 * e.test_acc, secs);
      *log << buf;
      for (std::size_t j = 0; j < e.head_acc.size(); ++j) {
        const int unit = j < head_units.size() ? head_units[j] : static_cast<int>(j) + 1;
        std::snprintf(buf, sizeof buf, " h%d %.1f%%", unit, 100.0 * e.head_acc[j]);
        *log << buf;
      }
      *log << std::endl;
    };
  }
  return t;
}

namespace {

fs::path seed_dir(const fs::path& out, const std::string& stage, std::uint64_t seed) {
  return out / stage / ("seed_" + std::to_string(seed));
}

void write_manifest(const ExperimentConfig& cfg, const std::vector<std::uint64_t>& seeds,
                    const fs::path& out, const fs::path& file) {
  ExperimentConfig resolved = cfg;
  resolved.seeds = seeds;
  resolved.output_dir = out.generic_string();
  fs::create_directories(file.parent_path());
  std::ofstream(file, std::ios::binary | std::ios::trunc) << manifest(resolved);
}

}  // namespace

SummaryRow run_teacher(const ExperimentConfig& cfg, const DatasetPair& data,
                       const std::vector<std::uint64_t>& seeds, const fs::path& out,
                       std::ostream* log) {
  write_manifest(cfg, seeds, out, out / "teacher" / "manifest.cfg");
  SummaryRow row{"Teacher baseline", {}, {}, {}};
  for (auto seed : seeds) {
    auto dir = seed_dir(out, "teacher", seed);
    auto r = train_supervised(cfg.teacher.spec, cfg.task(), data,
                              train_options(cfg, cfg.teacher_optim, seed, log,
                                            "teacher seed " + std::to_string(seed)));
    save_checkpoint({r.model, std::nullopt, r.state}, dir / "teacher.ckpt");
    save_checkpoint({r.best, std::nullopt, std::nullopt}, dir / "teacher_best.ckpt");
    write_metrics_csv(dir / "metrics.csv", r.history, {});
    write_steps_csv(dir / "steps.csv", r.history, {});
    row.seeds.push_back(seed);
    row.final_acc.push_back(r.history.epochs.back().test_acc);
    row.best_acc.push_back(r.history.best_test_acc);
  }
  return row;
}

SummaryRow run_baseline(const ExperimentConfig& cfg, const DatasetPair& data,
                        const std::vector<std::uint64_t>& seeds, const fs::path& out,
                        std::ostream* log) {
  write_manifest(cfg, seeds, out, out / "baseline" / "manifest.cfg");
  SummaryRow row{"Student baseline", {}, {}, {}};
  for (auto seed : seeds) {
    auto dir = seed_dir(out, "baseline", seed);
    auto r = train_supervised(cfg.student.spec, cfg.task(), data,
                              train_options(cfg, cfg.optim, seed, log,
                                            "baseline seed " + std::to_string(seed)));
    save_checkpoint({r.model, std::nullopt, r.state}, dir / "student.ckpt");
    write_metrics_csv(dir / "metrics.csv", r.history, {});
    write_steps_csv(dir / "steps.csv", r.history, {});
    row.seeds.push_back(seed);
    row.final_acc.push_back(r.history.epochs.back().test_acc);
    row.best_acc.push_back(r.history.best_test_acc);
  }
  return row;
}

SummaryRow run_distill(const ExperimentConfig& cfg, const DistillConfig& distill,
                       const std::string& label, const Network<float>& teacher,
                       const DatasetPair& data, const std::vector<std::uint64_t>& seeds,
                       const fs::path& out, std::ostream* log) {
  const std::string stage = method_dir(label);
  ExperimentConfig staged = cfg;
  staged.distill = distill;
  write_manifest(staged, seeds, out, out / stage / "manifest.cfg");
  SummaryRow row{label, {}, {}, {}};
  for (auto seed : seeds) {
    auto dir = seed_dir(out, stage, seed);
    auto r = train_student_mhkd(teacher, cfg.student.spec, distill, cfg.head,
                                data, train_options(cfg, cfg.optim, seed, log,
                                                    stage + " seed " + std::to_string(seed),
                                                    distill.head_units));
    Checkpoint full{r.student, std::nullopt, r.state};
    if (!distill.head_units.empty())
      full.heads = HeadBundle{cfg.head, distill.head_units, r.heads_teacher, r.heads_student};
    save_checkpoint(full, dir / "student.ckpt");
    save_checkpoint(strip_heads(full), dir / "student_deploy.ckpt");
    write_metrics_csv(dir / "metrics.csv", r.history, distill.head_units);
    write_steps_csv(dir / "steps.csv", r.history, distill.head_units);
    row.seeds.push_back(seed);
    row.final_acc.push_back(r.history.epochs.back().test_acc);
    row.best_acc.push_back(r.history.best_test_acc);
  }
  return row;
}

void merge_summary(const fs::path& dir, const std::vector<SummaryRow>& rows) {
  std::vector<SummaryRow> all;
  if (fs::exists(dir / "summary.csv")) all = read_summary(dir / "summary.csv");
  for (const auto& r : rows) {
    auto it = std::find_if(all.begin(), all.end(), [&](const SummaryRow& x) { return x.method == r.method; });
    if (it == all.end()) all.push_back(r);
    else *it = r;
  }
  write_summary(dir, all);
}

namespace {

// Runs `body`, mapping the library's typed errors to exit codes.
template <typename Fn>
int guarded(std::ostream& err, Fn&& body) {
  try {
    return body();
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const DataError& e) {
    err << "data error: " << e.what() << "\n";
    return kExitData;
  } catch (const CheckpointError& e) {
    err << "checkpoint error: " << e.what() << "\n";
    return kExitCheckpoint;
  } catch (const DivergenceError& e) {
    err << "training diverged: " << e.what() << "\n";
    return kExitDivergence;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitFailure;
  }
}

Network<float> load_teacher(const fs::path& file, const ExperimentConfig& cfg) {
  auto ckpt = load_checkpoint(file);
  if (ckpt.network.task() != cfg.task())
    throw CheckpointError(file.string() + ": teacher task does not match the configured dataset");
  if (ckpt.network.spec() != cfg.teacher.spec)
    throw CheckpointError(file.string() + ": teacher architecture '" + ckpt.network.spec().name +
                          "' differs from [teacher] in the config");
  return std::move(ckpt.network);
}

}  // namespace

int cmd_train_teacher(const fs::path& config, const RunOptions& opt, std::ostream& err) {
  return guarded(err, [&] {
    auto cfg = parse_config(config);
    auto data = load_dataset(cfg.data);
    auto out = effective_output(cfg, opt);
    auto row = run_teacher(cfg, data, effective_seeds(cfg, opt), out, opt.log);
    merge_summary(out, {row});
    return kExitOk;
  });
}

int cmd_baseline(const fs::path& config, const RunOptions& opt, std::ostream& err) {
  return guarded(err, [&] {
    auto cfg = parse_config(config);
    auto data = load_dataset(cfg.data);
    auto out = effective_output(cfg, opt);
    auto row = run_baseline(cfg, data, effective_seeds(cfg, opt), out, opt.log);
    merge_summary(out, {row});
    return kExitOk;
  });
}

int cmd_distill(const fs::path& config, const fs::path& teacher_ckpt, bool ablation,
                const RunOptions& opt, std::ostream& err) {
  return guarded(err, [&] {
    auto cfg = parse_config(config);
    auto teacher = load_teacher(teacher_ckpt, cfg);
    auto data = load_dataset(cfg.data);
    auto out = effective_output(cfg, opt);
    auto seeds = effective_seeds(cfg, opt);
    std::vector<SummaryRow> rows;
    if (ablation) {
      auto groups = cfg.ablation;
      if (groups.empty()) groups = {{1}, {2}, {3}, {1, 2, 3}};
      for (const auto& g : groups) {
        DistillConfig d = cfg.distill;
        d.head_units = g;
        validate(d, static_cast<int>(std::min(cfg.teacher.spec.units.size(), cfg.student.spec.units.size())));
        rows.push_back(run_distill(cfg, d, ablation_label(g), teacher, data, seeds, out, opt.log));
      }
      std::ofstream(out / "ablation.md", std::ios::binary | std::ios::trunc)
          << "# Head placement ablation\n\n" << summary_markdown(rows);
    } else {
      rows.push_back(run_distill(cfg, cfg.distill, method_label(cfg.distill), teacher, data, seeds,
                                 out, opt.log));
    }
    merge_summary(out, rows);
    if (opt.log)
      for (const auto& r : rows)
        *opt.log << r.method << ": " << format_summary(summarize(r.final_acc)) << std::endl;
    return kExitOk;
  });
}

int cmd_eval(const fs::path& checkpoint, const fs::path& config,
             const std::optional<fs::path>& reference, std::ostream& out, std::ostream& err) {
  return guarded(err, [&] {
    auto ckpt = load_checkpoint(checkpoint);
    auto cfg = parse_config(config);
    if (ckpt.network.task() != cfg.task())
      throw CheckpointError(checkpoint.string() + ": task does not match the configured dataset");
    auto data = load_dataset(cfg.data);
    double acc = evaluate(ckpt.network, data.test, cfg.eval_batch_size);
    const auto params = ckpt.network.count_params();
    char buf[160];
    std::snprintf(buf, sizeof buf, "accuracy: %.4f (%zu test images)\n", acc, data.test.size());
    out << "checkpoint: " << checkpoint.string() << "\n"
        << "network: " << ckpt.network.spec().name << "\n"
        << buf << "params: " << params << "\n";
    if (ckpt.heads) {
      auto head_acc = evaluate_heads(ckpt.network, ckpt.heads->student, ckpt.heads->units, data.test,
                                     cfg.eval_batch_size);
      for (std::size_t j = 0; j < head_acc.size(); ++j) {
        std::snprintf(buf, sizeof buf, "head%d_accuracy: %.4f\n", ckpt.heads->units[j], head_acc[j]);
        out << buf;
      }
    }
    if (reference) {
      auto ref = load_checkpoint(*reference);
      auto ref_params = ref.network.count_params();
      std::snprintf(buf, sizeof buf, "compression: %.2f%% vs %zu params (%s)\n",
                    compression_percent(params, ref_params), ref_params,
                    ref.network.spec().name.c_str());
      out << buf;
    }
    return kExitOk;
  });
}

int cmd_report(const fs::path& run_dir, std::ostream& out, std::ostream& err) {
  return guarded(err, [&] {
    for (const auto& p : generate_report(run_dir)) out << p.string() << "\n";
    return kExitOk;
  });
}

}  // namespace mhkd
