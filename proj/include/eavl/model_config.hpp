// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <string>

namespace eavl {

/// Segmentation head variants. `full` is the dynamic-kernel aligner; the
/// others are the ablations it is compared against.
enum class Mode {
  full,          // per-query dynamic kernels weighted by query scores
  fixed_kernel,  // one learned 3x3 conv head on F_p, no per-query masks
  no_estimator,  // per-query masks summed without scores
  no_fvg,        // query language features not gated by the global vision feature
};

enum class KernelActivation { relu, identity };

std::string to_string(Mode m);
Mode parse_mode(const std::string& s);
std::string to_string(KernelActivation a);
KernelActivation parse_kernel_activation(const std::string& s);

struct ModelConfig {
  std::size_t width = 64;          // C: fusion / decoder width
  std::size_t text_width = 64;     // C': global language feature width
  std::size_t num_queries = 8;     // N_q
  std::size_t max_tokens = 17;     // L_max including SOS and EOS
  std::size_t heads = 4;
  std::size_t text_layers = 2;
  std::size_t decoder_layers = 2;
  std::size_t ffn_multiplier = 4;
  std::array<std::size_t, 4> backbone = {16, 32, 64, 64};  // stage output channels; last is C4
  std::size_t image_height = 64;
  std::size_t image_width = 64;
  std::size_t vocab_size = 0;      // 0: size of the synthetic grammar vocabulary
  Mode mode = Mode::full;
  KernelActivation kernel_activation = KernelActivation::relu;
  std::uint64_t init_seed = 0;

  /// Throws ConfigError on an unusable combination.
  void validate() const;

  std::size_t proj_channels() const { return width / 2; }  // Cp
  std::size_t kernel_scalars() const { return 9 * proj_channels() + 1; }
  std::size_t ffn_width() const { return ffn_multiplier * width; }
  /// Side of the stage-3 grid the fused tokens live on.
  std::size_t grid_height() const { return image_height / 8; }
  std::size_t grid_width() const { return image_width / 8; }
  std::size_t token_count() const { return grid_height() * grid_width(); }
  std::size_t mask_height() const { return 4 * grid_height(); }
  std::size_t mask_width() const { return 4 * grid_width(); }

  /// Desk-scale defaults (C=64, N_q=8, 64x64 images).
  static ModelConfig desk();
  /// Gradient-check scale (C=8, N_q=2, 16x16 images).
  static ModelConfig tiny();
};

}  // namespace eavl
