#pragma once

#include <stdexcept>
#include <string>

namespace mhkd {

// Tensor shapes or dimensions that do not line up.
class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Hyperparameters, layer geometry or experiment configuration that cannot be realized.
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// API misuse: non-scalar loss passed to backward, mismatched optimizer buffers, ...
class ContractError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

// Index outside its valid range (tap units, labels).
class RangeError : public std::out_of_range {
 public:
  using std::out_of_range::out_of_range;
};

// Batch normalization in train mode with fewer than two values per channel.
class DegenerateBatchError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Malformed or inconsistent input data (labels, dataset files).
class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Dataset file parsing failures; the message names the file and byte offset.
class IngestionError : public DataError {
 public:
  using DataError::DataError;
};

// Training produced a non-finite loss.
class DivergenceError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Checkpoint files that cannot be read back.
class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace mhkd
