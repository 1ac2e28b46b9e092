// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <optional>
#include <string>

#include "eavl/encoders.hpp"

namespace eavl {

/// Normalised (x, y) grid in [-1, 1], channels-last [H x W x 2]. Channel 0
/// varies with the column, channel 1 with the row; a size-1 axis maps to 0.
template <typename T>
Tensor<T> coord_features(std::size_t height, std::size_t width);

template <typename T>
struct FusedFeatures {
  Var<T> stage4;      // F_m4 [H3 x W3 x C]
  Var<T> fused;       // F_m  [H3 x W3 x C]
  Var<T> integrated;  // F_inte [H3 x W3 x C]
  Var<T> tokens;      // F_vt [H3*W3 x C], row-major over positions
};

/// Multi-scale fusion of F_v2, F_v3, F_v4 into a stage-3 map, optionally
/// gated by the global language feature, then joined with coordinates and
/// flattened into tokens.
///
/// Channel bookkeeping: F_m4 has width C; each branch of F_m3 and F_m2
/// projects to C/2 so both concatenations are C wide; the aggregating 1x1
/// conv maps the 3C-wide [F_m2, F_m3, F_m4] to C; the integrating 1x1 conv
/// maps [F_m, F_coord] (C + 2, coordinates last) to C.
template <typename T>
class FusionNeck {
 public:
  FusionNeck() = default;
  /// `language_gated` selects the stage-4 fusion with F_tg; the ungated
  /// variant feeds the dense vision branch of the query generator.
  FusionNeck(ParameterStore<T>& store, const std::string& name, const ModelConfig& config, Rng& rng,
             bool language_gated);

  /// Up(ReLU(F_v4 W_v4) * ReLU(F_tg W_tg)), or Up(ReLU(F_v4 W_v4)) when ungated.
  Var<T> fuse_stage4(Tape<T>& tape, Var<T> v4, std::optional<Var<T>> text_global) const;

  /// F_m = Conv1x1([F_m2, F_m3, F_m4]).
  Var<T> fuse_multiscale(Tape<T>& tape, Var<T> m4, Var<T> v3, Var<T> v2) const;

  /// Returns {F_inte, F_vt}.
  std::pair<Var<T>, Var<T>> build_fvt(Tape<T>& tape, Var<T> fused) const;

  FusedFeatures<T> forward(Tape<T>& tape, const ImageFeatures<T>& image,
                           std::optional<Var<T>> text_global) const;

  bool language_gated() const { return gated_; }

 private:
  Conv2d<T> v4_;
  Linear<T> tg_;
  Conv2d<T> m4_, v3_, m3_, v2_;
  Conv2d<T> aggregate_, integrate_;
  bool gated_ = true;
};

}  // namespace eavl
