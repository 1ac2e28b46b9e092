// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "eavl/training.hpp"

namespace eavl {

inline constexpr std::uint32_t kCheckpointVersion = 1;

template <typename T>
struct NamedTensor {
  std::string name;
  Tensor<T> value;
};

/// Everything needed to resume training or rebuild the model.
template <typename T>
struct Checkpoint {
  TrainConfig config;
  std::size_t step = 0;
  std::string rng_state;
  std::vector<std::size_t> order;
  std::size_t cursor = 0;
  std::uint64_t adam_steps = 0;
  std::vector<NamedTensor<T>> params;
  std::vector<Tensor<T>> adam_m, adam_v;

  /// Model with the stored configuration and parameter values.
  EavlModel<T> restore_model() const;
};

//   "EAVC" | u32 version | u32 precision | config text | u64 step |
//   rng text | u64 n, u64 order[n] | u64 cursor | u64 adam steps |
//   u64 count | count x (name, value, m, v) | "END!"
template <typename T>
void save_checkpoint(const std::filesystem::path& path, const Checkpoint<T>& checkpoint);

/// Throws FormatError on a bad magic, a different format version, a precision
/// other than T's, or a truncated file.
template <typename T>
Checkpoint<T> load_checkpoint(const std::filesystem::path& path);

/// Precision tag of a checkpoint file without reading the payload.
io::Precision checkpoint_precision(const std::filesystem::path& path);

}  // namespace eavl
