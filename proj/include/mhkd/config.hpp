#pragma once

// Experiment configuration: an INI file with sections, one `key = value` per
// line and `;` comments. Every section is optional except the keys marked
// required below; everything else has a default that the manifest spells out.
//
//   [experiment] name*, seeds, output_dir, ablation, eval_batch_size
//   [data]       source* (synth|cifar10|cifar100), dir, train_subset, test_subset,
//                synth_classes, synth_train_per_class, synth_test_per_class,
//                synth_difficulty, synth_seed
//   [teacher]    network* (TinyT|TinyS|plain), widths, convs_per_unit
//   [student]    same keys as [teacher]
//   [distill]    temperature, alpha, beta, head_units, kd_alpha
//   [head]       num_conv, num_fc, conv_channels, kernel, fc_hidden
//   [optim]      lr, momentum, weight_decay, lr_milestones, lr_gamma, epochs, batch_size
//   [teacher_optim] same keys as [optim]; unset keys fall back to [optim]
//   [augment]    enabled, pad, crop, hflip_prob
//   [fixed]      constants of the architecture, echoed by the manifest
//
// Lists are comma separated. `ablation` is a `|`-separated list of head-unit
// lists, e.g. `1 | 2 | 3 | 1,2,3`.

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "mhkd/data.hpp"
#include "mhkd/distill.hpp"
#include "mhkd/nn.hpp"
#include "mhkd/train.hpp"

namespace mhkd {

enum class DataSource { kSynth, kCifar10, kCifar100 };

std::string to_string(DataSource source);

struct DataConfig {
  DataSource source = DataSource::kSynth;
  std::string dir;  // empty: MHKD_DATA_DIR
  std::size_t train_subset = 0;  // 0: whole split
  std::size_t test_subset = 0;
  SynthOptions synth;
};

struct NetworkChoice {
  std::string network;      // preset name or "plain"
  std::vector<int> widths;  // plain only
  int convs_per_unit = 1;   // plain only
  NetworkSpec spec;         // resolved
};

struct AugmentConfig {
  bool enabled = true;
  AugmentPolicy policy;
};

struct ExperimentConfig {
  std::string name;
  std::vector<std::uint64_t> seeds = {0, 1, 2};
  std::string output_dir;  // empty: runs/<name>
  std::vector<std::vector<int>> ablation;
  int eval_batch_size = 250;
  DataConfig data;
  NetworkChoice teacher, student;
  DistillConfig distill;
  AuxHeadSpec head;
  OptimConfig optim;
  OptimConfig teacher_optim;
  AugmentConfig augment;

  TaskSpec task() const;
};

// Throws ConfigError as "<origin>:<line>: [section] key: problem"; problems
// with no line (a missing required key) name the section and key.
ExperimentConfig parse_config(const std::filesystem::path& file);
ExperimentConfig parse_config_text(const std::string& text, const std::string& origin = "<config>");

// Fully resolved configuration in the same grammar, every default explicit.
// parse_config_text(manifest(c)) reproduces c.
std::string manifest(const ExperimentConfig& config);

// Directory with CIFAR files: cfg.dir, else $MHKD_DATA_DIR, else empty.
std::filesystem::path data_root(const DataConfig& cfg);

// Loads or generates the configured dataset pair; subsets use take_balanced.
DatasetPair load_dataset(const DataConfig& cfg);

}  // namespace mhkd
