#pragma once

// Image datasets: CIFAR binary ingestion, a seeded synthetic generator,
// augmentation and epoch batching. Images are stored as raw bytes in CIFAR
// plane order (R, G, B planes of H*W, row-major) and normalized only when a
// batch is materialized, so ingestion stays lossless.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "mhkd/rng.hpp"
#include "mhkd/tensor.hpp"

namespace mhkd {

enum class Split { kTrain, kTest };
enum class CifarVariant { kCifar10, kCifar100 };

struct Normalization {
  std::vector<double> mean;    // per channel, on the [0,1] scale
  std::vector<double> stddev;  // per channel, > 0
};

struct Dataset {
  std::string name;
  Split split = Split::kTrain;
  int num_classes = 0;
  int channels = 3, height = 32, width = 32;
  std::vector<std::uint8_t> pixels;  // size() * image_bytes()
  std::vector<int> labels;
  std::vector<int> coarse_labels;  // CIFAR-100 superclass; empty otherwise
  Normalization norm;

  std::size_t size() const { return labels.size(); }
  std::size_t image_bytes() const { return static_cast<std::size_t>(channels) * height * width; }
  const std::uint8_t* image(std::size_t i) const { return pixels.data() + i * image_bytes(); }
};

struct DatasetPair {
  Dataset train, test;
};

struct LabeledBatch {
  Tensor<float> images;  // [B,C,H,W], normalized
  std::vector<int> labels;
};

// Per-channel mean and population std over the whole split, [0,1] scale.
Normalization compute_normalization(const Dataset& ds);

// Throws DataError unless labels lie in [0,K), std > 0 and sizes agree.
void validate(const Dataset& ds);

// ---- CIFAR binary ------------------------------------------------------

inline constexpr std::size_t kCifarImageBytes = 3 * 32 * 32;
std::size_t cifar_record_bytes(CifarVariant variant);
int cifar_num_classes(CifarVariant variant);
CifarVariant parse_cifar_variant(const std::string& name);

// Parses one binary file. `expected_records` = 0 accepts any whole count.
// Errors name the file and the byte offset of the offending record.
Dataset parse_cifar_file(const std::filesystem::path& file, CifarVariant variant,
                         std::size_t expected_records = 0);

// Reads the official file set (data_batch_{1..5}.bin + test_batch.bin, or
// train.bin + test.bin) from `dir` or its standard extracted subdirectory.
// Normalization comes from the train split and is shared by the test split.
DatasetPair load_cifar(const std::filesystem::path& dir, CifarVariant variant);

// Writes `ds` in the CIFAR record layout. For CIFAR-100 the coarse label is
// taken from ds.coarse_labels, or 0 when there are none.
void export_cifar(const Dataset& ds, const std::filesystem::path& file, CifarVariant variant);

// Deterministic class-balanced prefix: the first n/K records of each class in
// file order. Normalization is recomputed on the result.
Dataset take_balanced(const Dataset& ds, std::size_t n);

// ---- synthetic ---------------------------------------------------------

struct SynthOptions {
  int num_classes = 10;
  int train_per_class = 100;
  int test_per_class = 20;
  double difficulty = 0.5;  // 0: clean prototypes, 1: heavy nuisance
  std::uint64_t seed = 0;
};

// Class-conditional 32x32x3 images: each class owns a prototype built from
// oriented gratings, a colour tint and a blob. Samples are shifted, mixed
// with another class's prototype and noised, all scaled by `difficulty`.
DatasetPair synth_dataset(const SynthOptions& options);

// ---- batching and augmentation ----------------------------------------

// Normalized copies of the selected images.
LabeledBatch make_batch(const Dataset& ds, std::span<const std::size_t> indices);
// Normalized image back to bytes (rounded); inverse of make_batch.
std::vector<std::uint8_t> denormalize(const Dataset& ds, const Tensor<float>& images, int index);

struct AugmentPolicy {
  int pad = 4;
  int crop = 32;
  double hflip_prob = 0.5;
};

// Zero-pad, random crop, random horizontal flip, per image. `fill` holds the
// per-channel value written into the padding; empty means 0.0.
LabeledBatch augment(const LabeledBatch& batch, Rng& rng, const AugmentPolicy& policy,
                     std::span<const float> fill = {});
// The normalized value of a black pixel, per channel: the padding value that
// matches padding raw images with zeros.
std::vector<float> black_level(const Normalization& norm);

// Epoch order derived from (shuffle_seed, epoch); batches in that order, the
// last one possibly partial.
std::vector<std::size_t> epoch_permutation(std::size_t n, std::uint64_t shuffle_seed, int epoch);

class BatchStream {
 public:
  BatchStream(const Dataset& ds, int batch_size, std::uint64_t shuffle_seed, int epoch,
              bool shuffle = true);
  std::optional<LabeledBatch> next();
  std::size_t num_batches() const;

 private:
  const Dataset* ds_;
  int batch_size_;
  std::vector<std::size_t> order_;
  std::size_t cursor_ = 0;
};

}  // namespace mhkd
