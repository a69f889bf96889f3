#pragma once

// Binary checkpoints. Layout, all integers little-endian:
//   "MHKDCKPT" u8 version
//   then tagged sections: u32 tag, u64 byte length, payload
//     ARCH  network spec and task
//     PARM  parameters: name, shape, decay flag, f32 values
//     BUFS  batchnorm running statistics
//     HEAD  optional auxiliary heads (training-resume only)
//     TRST  optional training state: counters, seeds, optimizer velocity
// Sections appear in that order; serialization is a pure function of the
// contents, so save -> load -> save reproduces the file byte for byte.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <vector>

#include "mhkd/distill.hpp"
#include "mhkd/nn.hpp"
#include "mhkd/train.hpp"

namespace mhkd {

inline constexpr std::uint8_t kCheckpointVersion = 1;

struct HeadBundle {
  AuxHeadSpec spec;
  std::vector<int> units;
  std::vector<AuxHead<float>> teacher, student;  // aligned with units
};

struct Checkpoint {
  Network<float> network;
  std::optional<HeadBundle> heads;
  std::optional<TrainState> state;
};

std::vector<std::uint8_t> serialize(const Checkpoint& ckpt);
// Throws CheckpointError on a bad magic, a version mismatch, truncation or
// inconsistent contents.
Checkpoint deserialize(std::span<const std::uint8_t> bytes);

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& file);
Checkpoint load_checkpoint(const std::filesystem::path& file);

// The deployable part: network only, heads and training state dropped.
Checkpoint strip_heads(const Checkpoint& ckpt);

}  // namespace mhkd
