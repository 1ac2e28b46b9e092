// SPDX-License-Identifier: Apache-2.0
#include "eavl/query_generator.hpp"

#include <algorithm>

namespace eavl {

template <typename T>
QueryGenerator<T>::QueryGenerator(ParameterStore<T>& store, const ModelConfig& config, Rng& rng)
    : use_global_(config.mode != Mode::no_fvg) {
  const std::size_t c = config.width;
  const std::size_t c2 = std::max<std::size_t>(c / 2, 1);
  const std::size_t c4 = std::max<std::size_t>(c / 4, 1);
  neck_ = FusionNeck<T>(store, "qgen.neck", config, rng, /*language_gated=*/false);
  reduce1_ = Conv2d<T>(store, "qgen.reduce1", 3, c, c2, rng);
  reduce2_ = Conv2d<T>(store, "qgen.reduce2", 3, c2, c4, rng);
  reduce3_ = Conv2d<T>(store, "qgen.reduce3", 3, c4, config.num_queries, rng);
  text_ = Linear<T>(store, "qgen.text", c, c, rng);
  if (use_global_) vision_global_ = Linear<T>(store, "qgen.vision_global", c, c, rng);
  dense_proj_ = Linear<T>(store, "qgen.dense_proj", config.token_count(), c, rng);
  word_proj_ = Linear<T>(store, "qgen.word_proj", c, c, rng);
  value_proj_ = Linear<T>(store, "qgen.value_proj", c, c, rng);
}

template <typename T>
Var<T> QueryGenerator<T>::dense_vision(Tape<T>& tape, const ImageFeatures<T>& image) const {
  const FusedFeatures<T> f = neck_.forward(tape, image, std::nullopt);
  Var<T> x = ops::relu(reduce1_(tape, f.integrated));
  x = ops::relu(reduce2_(tape, x));
  x = reduce3_(tape, x);
  const std::size_t n = x.dim(0) * x.dim(1);
  return ops::transpose(ops::reshape(x, {n, x.dim(2)}));
}

template <typename T>
Var<T> QueryGenerator<T>::fuse_language_global(Tape<T>& tape, Var<T> text_tokens,
                                               std::optional<Var<T>> vision_global) const {
  Var<T> words = ops::relu(text_(tape, text_tokens));
  if (!use_global_) return words;
  if (!vision_global) throw ConfigError("query generator needs the global vision feature");
  return ops::mul_rowwise(words, ops::relu(vision_global_(tape, *vision_global)));
}

template <typename T>
Var<T> QueryGenerator<T>::attention_map(Tape<T>& tape, Var<T> dense, Var<T> fused_language,
                                        const std::vector<bool>& token_valid) const {
  Var<T> d = ops::relu(dense_proj_(tape, dense));
  Var<T> w = ops::relu(word_proj_(tape, fused_language));
  return ops::masked_softmax_rows(ops::matmul_nt(d, w), token_valid);
}

template <typename T>
Var<T> QueryGenerator<T>::make_queries(Tape<T>& tape, Var<T> attention, Var<T> fused_language) const {
  return ops::matmul(attention, ops::relu(value_proj_(tape, fused_language)));
}

template <typename T>
QuerySet<T> QueryGenerator<T>::forward(Tape<T>& tape, const ImageFeatures<T>& image, const TextFeatures<T>& text,
                                       const std::vector<bool>& token_valid) const {
  QuerySet<T> q;
  q.dense = dense_vision(tape, image);
  q.fused_language = fuse_language_global(tape, text.tokens, image.global);
  q.attention = attention_map(tape, q.dense, q.fused_language, token_valid);
  q.queries = make_queries(tape, q.attention, q.fused_language);
  return q;
}

template class QueryGenerator<float>;
template class QueryGenerator<double>;

}  // namespace eavl
