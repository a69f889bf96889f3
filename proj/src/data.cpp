#include "mhkd/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iterator>
#include <numbers>

#include "mhkd/errors.hpp"

namespace mhkd {

namespace fs = std::filesystem;

Normalization compute_normalization(const Dataset& ds) {
  const std::size_t plane = static_cast<std::size_t>(ds.height) * ds.width;
  Normalization norm;
  for (int c = 0; c < ds.channels; ++c) {
    // Byte histogram: exact sums, independent of summation order.
    std::vector<std::uint64_t> hist(256, 0);
    for (std::size_t i = 0; i < ds.size(); ++i) {
      const std::uint8_t* p = ds.image(i) + c * plane;
      for (std::size_t k = 0; k < plane; ++k) ++hist[p[k]];
    }
    const double count = static_cast<double>(ds.size() * plane);
    double mean = 0.0;
    for (int v = 0; v < 256; ++v) mean += static_cast<double>(hist[v]) * (v / 255.0);
    mean = count > 0 ? mean / count : 0.0;
    double var = 0.0;
    for (int v = 0; v < 256; ++v) var += static_cast<double>(hist[v]) * std::pow(v / 255.0 - mean, 2);
    var = count > 0 ? var / count : 0.0;
    norm.mean.push_back(mean);
    // A constant channel would divide by zero; fall back to unit scale.
    norm.stddev.push_back(var > 0.0 ? std::sqrt(var) : 1.0);
  }
  return norm;
}

void validate(const Dataset& ds) {
  const std::string where = "dataset '" + ds.name + "': ";
  if (ds.num_classes < 2) throw DataError(where + "needs K >= 2");
  if (ds.pixels.size() != ds.size() * ds.image_bytes()) {
    throw DataError(where + "pixel buffer does not match " + std::to_string(ds.size()) + " images");
  }
  for (std::size_t i = 0; i < ds.labels.size(); ++i) {
    if (ds.labels[i] < 0 || ds.labels[i] >= ds.num_classes) {
      throw DataError(where + "label " + std::to_string(ds.labels[i]) + " of record " +
                      std::to_string(i) + " outside [0," + std::to_string(ds.num_classes) + ")");
    }
  }
  if (static_cast<int>(ds.norm.mean.size()) != ds.channels ||
      static_cast<int>(ds.norm.stddev.size()) != ds.channels) {
    throw DataError(where + "normalization must have one entry per channel");
  }
  for (double s : ds.norm.stddev) {
    if (!(s > 0.0)) throw DataError(where + "normalization std must be > 0");
  }
}

// ---- CIFAR ---------------------------------------------------------------

std::size_t cifar_record_bytes(CifarVariant variant) {
  return variant == CifarVariant::kCifar10 ? 1 + kCifarImageBytes : 2 + kCifarImageBytes;
}

int cifar_num_classes(CifarVariant variant) { return variant == CifarVariant::kCifar10 ? 10 : 100; }

CifarVariant parse_cifar_variant(const std::string& name) {
  if (name == "cifar10") return CifarVariant::kCifar10;
  if (name == "cifar100") return CifarVariant::kCifar100;
  throw ConfigError("unknown CIFAR variant '" + name + "' (cifar10|cifar100)");
}

namespace {

std::vector<std::uint8_t> read_file(const fs::path& file) {
  std::ifstream in(file, std::ios::binary);
  if (!in) throw IngestionError("cannot open '" + file.string() + "'");
  return std::vector<std::uint8_t>(std::istreambuf_iterator<char>(in), {});
}

void append(Dataset& into, Dataset&& part) {
  into.pixels.insert(into.pixels.end(), part.pixels.begin(), part.pixels.end());
  into.labels.insert(into.labels.end(), part.labels.begin(), part.labels.end());
  into.coarse_labels.insert(into.coarse_labels.end(), part.coarse_labels.begin(), part.coarse_labels.end());
}

}  // namespace

Dataset parse_cifar_file(const fs::path& file, CifarVariant variant, std::size_t expected_records) {
  if (!fs::exists(file)) throw IngestionError("missing CIFAR file '" + file.string() + "'");
  const std::vector<std::uint8_t> bytes = read_file(file);
  const std::size_t rec = cifar_record_bytes(variant);
  const std::size_t whole = bytes.size() / rec;
  if (bytes.size() % rec != 0) {
    throw IngestionError("'" + file.string() + "': truncated record at byte offset " +
                         std::to_string(whole * rec) + " (" + std::to_string(bytes.size() % rec) +
                         " of " + std::to_string(rec) + " bytes present)");
  }
  if (expected_records != 0 && whole != expected_records) {
    throw IngestionError("'" + file.string() + "': expected " + std::to_string(expected_records) +
                         " records, found " + std::to_string(whole) + " (" +
                         std::to_string(bytes.size()) + " bytes)");
  }
  Dataset ds;
  ds.name = file.filename().string();
  ds.num_classes = cifar_num_classes(variant);
  ds.labels.resize(whole);
  if (variant == CifarVariant::kCifar100) ds.coarse_labels.resize(whole);
  ds.pixels.resize(whole * kCifarImageBytes);
  const std::size_t label_at = variant == CifarVariant::kCifar10 ? 0 : 1;  // fine label
  for (std::size_t r = 0; r < whole; ++r) {
    const std::uint8_t* p = bytes.data() + r * rec;
    const int label = p[label_at];
    if (label >= ds.num_classes) {
      throw IngestionError("'" + file.string() + "': label " + std::to_string(label) +
                           " out of range at byte offset " + std::to_string(r * rec + label_at));
    }
    ds.labels[r] = label;
    if (variant == CifarVariant::kCifar100) ds.coarse_labels[r] = p[0];
    std::copy_n(p + rec - kCifarImageBytes, kCifarImageBytes, ds.pixels.data() + r * kCifarImageBytes);
  }
  return ds;
}

DatasetPair load_cifar(const fs::path& dir, CifarVariant variant) {
  const bool ten = variant == CifarVariant::kCifar10;
  fs::path root = dir;
  const fs::path nested = dir / (ten ? "cifar-10-batches-bin" : "cifar-100-binary");
  if (fs::is_directory(nested)) root = nested;

  DatasetPair out;
  const std::string tag = ten ? "cifar10" : "cifar100";
  out.train.name = tag + "/train";
  out.test.name = tag + "/test";
  out.train.split = Split::kTrain;
  out.test.split = Split::kTest;
  out.train.num_classes = out.test.num_classes = cifar_num_classes(variant);
  if (ten) {
    for (int b = 1; b <= 5; ++b) {
      append(out.train, parse_cifar_file(root / ("data_batch_" + std::to_string(b) + ".bin"), variant, 10000));
    }
    append(out.test, parse_cifar_file(root / "test_batch.bin", variant, 10000));
  } else {
    append(out.train, parse_cifar_file(root / "train.bin", variant, 50000));
    append(out.test, parse_cifar_file(root / "test.bin", variant, 10000));
  }
  out.train.norm = compute_normalization(out.train);
  out.test.norm = out.train.norm;
  validate(out.train);
  validate(out.test);
  return out;
}

void export_cifar(const Dataset& ds, const fs::path& file, CifarVariant variant) {
  if (ds.channels != 3 || ds.height != 32 || ds.width != 32) {
    throw DataError("export_cifar: only 3x32x32 images fit the CIFAR layout");
  }
  if (ds.num_classes > cifar_num_classes(variant)) {
    throw DataError("export_cifar: " + std::to_string(ds.num_classes) + " classes do not fit " +
                    (variant == CifarVariant::kCifar10 ? "cifar10" : "cifar100"));
  }
  if (!ds.coarse_labels.empty() && ds.coarse_labels.size() != ds.size()) {
    throw DataError("export_cifar: coarse labels do not match " + std::to_string(ds.size()) + " images");
  }
  std::ofstream out(file, std::ios::binary);
  if (!out) throw DataError("export_cifar: cannot write '" + file.string() + "'");
  for (std::size_t i = 0; i < ds.size(); ++i) {
    if (variant == CifarVariant::kCifar100)
      out.put(static_cast<char>(ds.coarse_labels.empty() ? 0 : ds.coarse_labels[i]));
    out.put(static_cast<char>(ds.labels[i]));
    out.write(reinterpret_cast<const char*>(ds.image(i)), static_cast<std::streamsize>(kCifarImageBytes));
  }
  if (!out) throw DataError("export_cifar: write failed for '" + file.string() + "'");
}

Dataset take_balanced(const Dataset& ds, std::size_t n) {
  const std::size_t per_class = n / ds.num_classes;
  if (per_class == 0) throw ConfigError("take_balanced: " + std::to_string(n) + " < K");
  Dataset out = ds;
  out.pixels.clear();
  out.labels.clear();
  out.coarse_labels.clear();
  std::vector<std::size_t> taken(ds.num_classes, 0);
  for (std::size_t i = 0; i < ds.size(); ++i) {
    const int y = ds.labels[i];
    if (taken[y] == per_class) continue;
    ++taken[y];
    out.labels.push_back(y);
    if (!ds.coarse_labels.empty()) out.coarse_labels.push_back(ds.coarse_labels[i]);
    out.pixels.insert(out.pixels.end(), ds.image(i), ds.image(i) + ds.image_bytes());
  }
  for (int c = 0; c < ds.num_classes; ++c) {
    if (taken[c] < per_class) {
      throw DataError("take_balanced: class " + std::to_string(c) + " has only " +
                      std::to_string(taken[c]) + " records, need " + std::to_string(per_class));
    }
  }
  out.norm = compute_normalization(out);
  return out;
}

// ---- synthetic -----------------------------------------------------------

namespace {

struct Prototype {
  double freq[2], angle[2], phase[2], amp[2];
  double tint[3][2];
  double blob_x, blob_y, blob_sigma, blob_color[3];
};

Prototype make_prototype(Rng& rng) {
  Prototype p{};
  for (int g = 0; g < 2; ++g) {
    p.freq[g] = rng.uniform(1.0, 4.0) * 2.0 * std::numbers::pi / 32.0;
    p.angle[g] = rng.uniform(0.0, std::numbers::pi);
    p.phase[g] = rng.uniform(0.0, 2.0 * std::numbers::pi);
    p.amp[g] = g == 0 ? 0.22 : 0.12;
    for (int c = 0; c < 3; ++c) p.tint[c][g] = rng.uniform(-1.0, 1.0);
  }
  p.blob_x = rng.uniform(8.0, 24.0);
  p.blob_y = rng.uniform(8.0, 24.0);
  p.blob_sigma = rng.uniform(3.0, 6.0);
  for (double& c : p.blob_color) c = rng.uniform(-0.3, 0.3);
  return p;
}

// Prototype value around mid-grey, sampled at (x - dx, y - dy).
double prototype_at(const Prototype& p, int channel, double x, double y) {
  double v = 0.0;
  for (int g = 0; g < 2; ++g) {
    const double u = x * std::cos(p.angle[g]) + y * std::sin(p.angle[g]);
    v += p.amp[g] * p.tint[channel][g] * std::cos(p.freq[g] * u + p.phase[g]);
  }
  const double r2 = (x - p.blob_x) * (x - p.blob_x) + (y - p.blob_y) * (y - p.blob_y);
  v += p.blob_color[channel] * std::exp(-r2 / (2.0 * p.blob_sigma * p.blob_sigma));
  return v;
}

void render(const std::vector<Prototype>& protos, int label, double difficulty, Rng& rng,
            std::uint8_t* out) {
  const int max_shift = static_cast<int>(std::lround(8.0 * difficulty));
  auto shift = [&] { return static_cast<double>(static_cast<int>(rng.below(2 * max_shift + 1)) - max_shift); };
  const double dx = shift(), dy = shift();
  int other = static_cast<int>(rng.below(protos.size() - 1));
  if (other >= label) ++other;
  const double mix = difficulty * rng.uniform(0.0, 0.7);
  const double ox = shift(), oy = shift();
  const double contrast = 1.0 + difficulty * rng.uniform(-0.5, 0.5);
  const double brightness = difficulty * rng.uniform(-0.1, 0.1);
  const double sigma = 0.02 + 0.25 * difficulty;
  for (int c = 0; c < 3; ++c) {
    for (int y = 0; y < 32; ++y) {
      for (int x = 0; x < 32; ++x) {
        double v = (1.0 - mix) * prototype_at(protos[label], c, x - dx, y - dy) +
                   mix * prototype_at(protos[other], c, x - ox, y - oy);
        v = 0.5 + brightness + contrast * v + sigma * rng.normal();
        out[(c * 32 + y) * 32 + x] = static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
      }
    }
  }
}

Dataset render_split(const std::vector<Prototype>& protos, int per_class, double difficulty,
                     std::uint64_t seed, Split split) {
  Dataset ds;
  ds.name = split == Split::kTrain ? "synth/train" : "synth/test";
  ds.split = split;
  ds.num_classes = static_cast<int>(protos.size());
  const std::size_t n = static_cast<std::size_t>(per_class) * protos.size();
  ds.labels.resize(n);
  ds.pixels.resize(n * ds.image_bytes());
  Rng rng(seed);
  // Interleaved classes: record i has label i mod K.
  for (std::size_t i = 0; i < n; ++i) {
    ds.labels[i] = static_cast<int>(i % protos.size());
    render(protos, ds.labels[i], difficulty, rng, ds.pixels.data() + i * ds.image_bytes());
  }
  return ds;
}

}  // namespace

DatasetPair synth_dataset(const SynthOptions& o) {
  if (o.num_classes < 2) throw ConfigError("synth_dataset: K must be >= 2");
  if (o.train_per_class < 1 || o.test_per_class < 1) {
    throw ConfigError("synth_dataset: per-class counts must be >= 1");
  }
  if (!(o.difficulty >= 0.0 && o.difficulty <= 1.0)) {
    throw ConfigError("synth_dataset: difficulty must be in [0,1]");
  }
  Rng proto_rng(derive_seed(o.seed, 1));
  std::vector<Prototype> protos;
  for (int c = 0; c < o.num_classes; ++c) protos.push_back(make_prototype(proto_rng));
  DatasetPair out{render_split(protos, o.train_per_class, o.difficulty, derive_seed(o.seed, 2), Split::kTrain),
                  render_split(protos, o.test_per_class, o.difficulty, derive_seed(o.seed, 3), Split::kTest)};
  out.train.norm = compute_normalization(out.train);
  out.test.norm = out.train.norm;
  return out;
}

// ---- batching --------------------------------------------------------------

LabeledBatch make_batch(const Dataset& ds, std::span<const std::size_t> indices) {
  const int b = static_cast<int>(indices.size());
  LabeledBatch batch{Tensor<float>(Shape{b, ds.channels, ds.height, ds.width}), {}};
  batch.labels.reserve(indices.size());
  const std::size_t plane = static_cast<std::size_t>(ds.height) * ds.width;
  float* dst = batch.images.ptr();
  for (int i = 0; i < b; ++i) {
    const std::size_t idx = indices[i];
    if (idx >= ds.size()) throw RangeError("make_batch: index " + std::to_string(idx) + " out of range");
    batch.labels.push_back(ds.labels[idx]);
    const std::uint8_t* src = ds.image(idx);
    for (int c = 0; c < ds.channels; ++c) {
      const double m = ds.norm.mean[c], s = ds.norm.stddev[c];
      for (std::size_t k = 0; k < plane; ++k) {
        *dst++ = static_cast<float>((src[c * plane + k] / 255.0 - m) / s);
      }
    }
  }
  return batch;
}

std::vector<std::uint8_t> denormalize(const Dataset& ds, const Tensor<float>& images, int index) {
  const std::size_t plane = static_cast<std::size_t>(ds.height) * ds.width;
  std::vector<std::uint8_t> out(ds.image_bytes());
  const float* src = images.ptr() + static_cast<std::size_t>(index) * ds.image_bytes();
  for (int c = 0; c < ds.channels; ++c) {
    for (std::size_t k = 0; k < plane; ++k) {
      const double v = (src[c * plane + k] * ds.norm.stddev[c] + ds.norm.mean[c]) * 255.0;
      out[c * plane + k] = static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 255.0)));
    }
  }
  return out;
}

std::vector<float> black_level(const Normalization& norm) {
  std::vector<float> fill;
  for (std::size_t c = 0; c < norm.mean.size(); ++c) {
    fill.push_back(static_cast<float>(-norm.mean[c] / norm.stddev[c]));
  }
  return fill;
}

LabeledBatch augment(const LabeledBatch& batch, Rng& rng, const AugmentPolicy& policy,
                     std::span<const float> fill) {
  if (policy.pad < 0) throw ConfigError("augment: pad must be >= 0");
  const Tensor<float>& in = batch.images;
  const int b = in.dim(0), ch = in.dim(1), h = in.dim(2), w = in.dim(3);
  if (policy.crop > h + 2 * policy.pad || policy.crop > w + 2 * policy.pad) {
    throw ConfigError("augment: crop " + std::to_string(policy.crop) + " exceeds padded image");
  }
  if (!fill.empty() && static_cast<int>(fill.size()) != ch) {
    throw DimensionError("augment: fill needs one value per channel");
  }
  const int crop = policy.crop;
  LabeledBatch out{Tensor<float>(Shape{b, ch, crop, crop}), batch.labels};
  for (int i = 0; i < b; ++i) {
    // Offsets into the padded image; drawn even when there is only one choice
    // so the stream position does not depend on the policy.
    const int oy = static_cast<int>(rng.below(static_cast<std::uint64_t>(h + 2 * policy.pad - crop + 1)));
    const int ox = static_cast<int>(rng.below(static_cast<std::uint64_t>(w + 2 * policy.pad - crop + 1)));
    const bool flip = rng.bernoulli(policy.hflip_prob);
    for (int c = 0; c < ch; ++c) {
      const float pad_value = fill.empty() ? 0.0f : fill[c];
      const float* src = in.ptr() + (static_cast<std::size_t>(i) * ch + c) * h * w;
      float* dst = out.images.ptr() + (static_cast<std::size_t>(i) * ch + c) * crop * crop;
      for (int y = 0; y < crop; ++y) {
        const int sy = y + oy - policy.pad;
        for (int x = 0; x < crop; ++x) {
          const int sx = (flip ? crop - 1 - x : x) + ox - policy.pad;
          dst[y * crop + x] = (sy >= 0 && sy < h && sx >= 0 && sx < w) ? src[sy * w + sx] : pad_value;
        }
      }
    }
  }
  return out;
}

std::vector<std::size_t> epoch_permutation(std::size_t n, std::uint64_t shuffle_seed, int epoch) {
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  Rng rng(derive_seed(shuffle_seed, static_cast<std::uint64_t>(epoch)));
  for (std::size_t i = n; i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
  return order;
}

BatchStream::BatchStream(const Dataset& ds, int batch_size, std::uint64_t shuffle_seed, int epoch,
                         bool shuffle)
    : ds_(&ds), batch_size_(batch_size) {
  if (batch_size < 1) throw ConfigError("batch size must be >= 1");
  if (shuffle) {
    order_ = epoch_permutation(ds.size(), shuffle_seed, epoch);
  } else {
    order_.resize(ds.size());
    for (std::size_t i = 0; i < order_.size(); ++i) order_[i] = i;
  }
}

std::size_t BatchStream::num_batches() const {
  return (order_.size() + batch_size_ - 1) / batch_size_;
}

std::optional<LabeledBatch> BatchStream::next() {
  if (cursor_ >= order_.size()) return std::nullopt;
  const std::size_t count = std::min<std::size_t>(batch_size_, order_.size() - cursor_);
  LabeledBatch batch = make_batch(*ds_, std::span<const std::size_t>(order_).subspan(cursor_, count));
  cursor_ += count;
  return batch;
}

}  // namespace mhkd
