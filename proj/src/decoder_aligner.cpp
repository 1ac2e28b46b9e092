// SPDX-License-Identifier: Apache-2.0
#include "eavl/decoder_aligner.hpp"

namespace eavl {

template <typename T>
TransformerDecoder<T>::TransformerDecoder(ParameterStore<T>& store, const ModelConfig& config, Rng& rng) {
  const std::size_t c = config.width;
  for (std::size_t i = 0; i < config.decoder_layers; ++i) {
    const std::string p = "decoder.layer" + std::to_string(i);
    Layer l;
    l.norm_self = LayerNorm<T>(store, p + ".norm_self", c);
    l.self_attn = MultiHeadAttention<T>(store, p + ".self_attn", c, config.heads, rng);
    l.norm_cross = LayerNorm<T>(store, p + ".norm_cross", c);
    l.cross_attn = MultiHeadAttention<T>(store, p + ".cross_attn", c, config.heads, rng);
    l.norm_ffn = LayerNorm<T>(store, p + ".norm_ffn", c);
    l.ffn = FeedForward<T>(store, p + ".ffn", c, config.ffn_width(), rng);
    layers_.push_back(l);
  }
  final_norm_ = LayerNorm<T>(store, "decoder.final_norm", c);
}

template <typename T>
Var<T> TransformerDecoder<T>::decode(Tape<T>& tape, Var<T> visual, Var<T> queries, std::size_t grid_height,
                                     std::size_t grid_width, std::vector<Tensor<T>>* cross_weights) const {
  if (visual.dim(0) != grid_height * grid_width) {
    throw DimensionError("decode: " + to_string(visual.shape()) + " tokens do not fill a " +
                         std::to_string(grid_height) + "x" + std::to_string(grid_width) + " grid");
  }
  Var<T> x = visual;
  for (const Layer& l : layers_) {
    x = ops::add(x, l.self_attn.self(tape, l.norm_self(tape, x)));
    x = ops::add(x, l.cross_attn(tape, l.norm_cross(tape, x), queries, nullptr, cross_weights));
    x = ops::add(x, l.ffn(tape, l.norm_ffn(tape, x)));
  }
  x = final_norm_(tape, x);
  return ops::reshape(x, {grid_height, grid_width, x.dim(1)});
}

template <typename T>
Tensor<T> serialize_kernel(const DynamicKernel<T>& kernel) {
  const Tensor<T>& w = kernel.weights.value();
  Tensor<T> flat({w.size() + 1});
  std::copy(w.data().begin(), w.data().end(), flat.data().begin());
  flat[w.size()] = kernel.bias.value()[0];
  return flat;
}

template <typename T>
VisionLanguageAligner<T>::VisionLanguageAligner(ParameterStore<T>& store, const ModelConfig& config, Rng& rng)
    : activation_(config.kernel_activation), cp_(config.proj_channels()) {
  const std::size_t c = config.width;
  fp_conv_ = Conv2d<T>(store, "aligner.fp_conv", 3, c, cp_, rng);
  if (config.mode == Mode::fixed_kernel) {
    fixed_ = Conv2d<T>(store, "aligner.fixed_head", 3, cp_, 1, rng);
    return;
  }
  kernel_gen_ = Linear<T>(store, "aligner.kernel_gen", c, config.kernel_scalars(), rng);
  if (config.mode != Mode::no_estimator) {
    estimator_attn_ = MultiHeadAttention<T>(store, "aligner.estimator_attn", c, config.heads, rng);
    estimator_head_ = Linear<T>(store, "aligner.estimator_head", c, 1, rng, /*with_bias=*/false);
  }
}

template <typename T>
Var<T> VisionLanguageAligner<T>::project_fp(Tape<T>& tape, Var<T> decoded) const {
  return ops::upsample2x(fp_conv_(tape, ops::upsample2x(decoded)));
}

template <typename T>
DynamicKernel<T> VisionLanguageAligner<T>::kernel_from_query(Tape<T>& tape, Var<T> query, std::size_t index) const {
  Var<T> flat = kernel_gen_(tape, query);
  if (activation_ == KernelActivation::relu) flat = ops::relu(flat);
  DynamicKernel<T> k;
  k.weights = ops::slice_flat(flat, 0, {3, 3, cp_, 1});
  k.bias = ops::slice_flat(flat, 9 * cp_, {1});
  k.source_query = index;
  return k;
}

template <typename T>
Var<T> VisionLanguageAligner<T>::apply_dynamic_kernel(Tape<T>&, Var<T> fp, const DynamicKernel<T>& kernel) const {
  Var<T> mask = ops::conv2d(fp, kernel.weights, kernel.bias);
  return ops::reshape(mask, {mask.dim(0), mask.dim(1)});
}

template <typename T>
Var<T> VisionLanguageAligner<T>::score_queries(Tape<T>& tape, Var<T> queries) const {
  Var<T> logits = estimator_head_(tape, estimator_attn_.self(tape, queries));
  return ops::softmax(ops::reshape(logits, {queries.dim(0)}), 0);
}

template <typename T>
Var<T> VisionLanguageAligner<T>::aggregate(Tape<T>&, Var<T> masks, Var<T> scores) const {
  const std::size_t n = masks.dim(0), h = masks.dim(1), w = masks.dim(2);
  if (scores.value().size() != n) {
    throw DimensionError("aggregate: " + std::to_string(scores.value().size()) + " scores for " +
                         std::to_string(n) + " masks");
  }
  Var<T> y = ops::matmul(ops::reshape(scores, {1, n}), ops::reshape(masks, {n, h * w}));
  return ops::reshape(y, {h, w});
}

template <typename T>
Var<T> VisionLanguageAligner<T>::fixed_head(Tape<T>& tape, Var<T> fp) const {
  Var<T> mask = fixed_(tape, fp);
  return ops::reshape(mask, {mask.dim(0), mask.dim(1)});
}

template Tensor<float> serialize_kernel<float>(const DynamicKernel<float>&);
template Tensor<double> serialize_kernel<double>(const DynamicKernel<double>&);
template class TransformerDecoder<float>;
template class TransformerDecoder<double>;
template class VisionLanguageAligner<float>;
template class VisionLanguageAligner<double>;

}  // namespace eavl
