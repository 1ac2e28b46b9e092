// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <vector>

#include "eavl/fusion_neck.hpp"

namespace eavl {

template <typename T>
struct QuerySet {
  Var<T> queries;         // F_q  [N_q x C]
  Var<T> attention;       // A    [N_q x L]
  Var<T> dense;           // F_vd [N_q x H3*W3]
  Var<T> fused_language;  // F_tv [L x C]
};

/// Builds N_q queries, each an attention-weighted mix of the word features,
/// with the word weights of query n predicted from the n-th dense vision map.
template <typename T>
class QueryGenerator {
 public:
  QueryGenerator() = default;
  QueryGenerator(ParameterStore<T>& store, const ModelConfig& config, Rng& rng);

  /// Ungated neck (own parameters), three 3x3 convs C -> C/2 -> C/4 -> N_q
  /// with ReLU between, then each channel flattened: [N_q x H3*W3].
  Var<T> dense_vision(Tape<T>& tape, const ImageFeatures<T>& image) const;

  /// ReLU(F_t W_t) * ReLU(F_vg W_vg), the gate broadcast over token rows.
  /// Without the global feature (no_fvg ablation) the gate is dropped.
  Var<T> fuse_language_global(Tape<T>& tape, Var<T> text_tokens, std::optional<Var<T>> vision_global) const;

  /// Softmax over words of ReLU(F_vd W_vd) ReLU(F_tv W_a)^T; PAD columns are
  /// excluded and come out exactly 0.
  Var<T> attention_map(Tape<T>& tape, Var<T> dense, Var<T> fused_language,
                       const std::vector<bool>& token_valid) const;

  /// F_q = A ReLU(F_tv W_tv).
  Var<T> make_queries(Tape<T>& tape, Var<T> attention, Var<T> fused_language) const;

  QuerySet<T> forward(Tape<T>& tape, const ImageFeatures<T>& image, const TextFeatures<T>& text,
                      const std::vector<bool>& token_valid) const;

 private:
  FusionNeck<T> neck_;
  Conv2d<T> reduce1_, reduce2_, reduce3_;
  Linear<T> text_, vision_global_;
  Linear<T> dense_proj_, word_proj_, value_proj_;
  bool use_global_ = true;
};

}  // namespace eavl
