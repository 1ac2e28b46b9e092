// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <vector>

#include "eavl/nn.hpp"
#include "eavl/model_config.hpp"

namespace eavl {

/// Pre-norm transformer decoder over the visual tokens. Self-attention runs
/// over the N visual tokens; cross-attention takes its queries from the
/// visual tokens and its keys/values from the language queries F_q.
template <typename T>
class TransformerDecoder {
 public:
  TransformerDecoder() = default;
  TransformerDecoder(ParameterStore<T>& store, const ModelConfig& config, Rng& rng);

  /// visual: F_vt [N x C]; queries: F_q [N_q x C]. Returns F_s reshaped to
  /// [H3 x W3 x C] using the same row-major order as F_vt. When
  /// `cross_weights` is set, every layer's per-head [N x N_q] cross-attention
  /// matrices are appended.
  Var<T> decode(Tape<T>& tape, Var<T> visual, Var<T> queries, std::size_t grid_height, std::size_t grid_width,
                std::vector<Tensor<T>>* cross_weights = nullptr) const;

 private:
  struct Layer {
    LayerNorm<T> norm_self, norm_cross, norm_ffn;
    MultiHeadAttention<T> self_attn, cross_attn;
    FeedForward<T> ffn;
  };
  std::vector<Layer> layers_;
  LayerNorm<T> final_norm_;
};

/// A 3x3 single-output convolution synthesised from one query: 9*Cp weights
/// in (kernel row, kernel column, channel) order followed by one bias.
template <typename T>
struct DynamicKernel {
  Var<T> weights;  // [3 x 3 x Cp x 1]
  Var<T> bias;     // [1]
  std::size_t source_query = 0;

  std::size_t scalar_count() const { return weights.value().size() + bias.value().size(); }
};

/// Packs a kernel back into its flat 9*Cp + 1 parameter vector.
template <typename T>
Tensor<T> serialize_kernel(const DynamicKernel<T>& kernel);

template <typename T>
struct MaskBundle {
  Var<T> masks;       // [N_q x h x w] logits (one slice in fixed_kernel mode)
  Var<T> scores;      // [N_q]
  Var<T> prediction;  // y [h x w] logits
};

/// Segmentation stage: projects F_s to F_p, turns every query into a dynamic
/// kernel, convolves, scores the queries and aggregates the masks.
template <typename T>
class VisionLanguageAligner {
 public:
  VisionLanguageAligner() = default;
  VisionLanguageAligner(ParameterStore<T>& store, const ModelConfig& config, Rng& rng);

  /// Up(Conv3x3(Up(F_s))): [H3 x W3 x C] -> [4H3 x 4W3 x Cp].
  Var<T> project_fp(Tape<T>& tape, Var<T> decoded) const;

  /// F_pn = act(W_p F_qn + b), split into weights and bias.
  DynamicKernel<T> kernel_from_query(Tape<T>& tape, Var<T> query, std::size_t index) const;

  /// 3x3 convolution of F_p with the kernel, padding 1; returns [h x w] logits.
  Var<T> apply_dynamic_kernel(Tape<T>& tape, Var<T> fp, const DynamicKernel<T>& kernel) const;

  /// Softmax over queries of W_s MHSA(F_q).
  Var<T> score_queries(Tape<T>& tape, Var<T> queries) const;

  /// y = sum_n S_n mask_n; masks [N_q x h x w], scores [N_q].
  Var<T> aggregate(Tape<T>& tape, Var<T> masks, Var<T> scores) const;

  /// Single learned 3x3 conv on F_p (fixed_kernel ablation).
  Var<T> fixed_head(Tape<T>& tape, Var<T> fp) const;

  std::size_t proj_channels() const { return cp_; }

 private:
  Conv2d<T> fp_conv_;
  Linear<T> kernel_gen_;
  MultiHeadAttention<T> estimator_attn_;
  Linear<T> estimator_head_;
  Conv2d<T> fixed_;
  KernelActivation activation_ = KernelActivation::relu;
  std::size_t cp_ = 0;
};

}  // namespace eavl
