// SPDX-License-Identifier: Apache-2.0
#include "eavl/model.hpp"

#include <algorithm>

namespace eavl {

template <typename T>
EavlModel<T>::EavlModel(const ModelConfig& config) : config_(config) {
  config_.validate();
  if (config_.vocab_size == 0) config_.vocab_size = Vocabulary::synthetic().size();
  Rng rng(config_.init_seed);
  text_ = TextEncoder<T>(store_, config_, rng);
  image_ = ImageEncoder<T>(store_, config_, rng);
  neck_ = FusionNeck<T>(store_, "neck", config_, rng, /*language_gated=*/true);
  qgen_ = QueryGenerator<T>(store_, config_, rng);
  decoder_ = TransformerDecoder<T>(store_, config_, rng);
  aligner_ = VisionLanguageAligner<T>(store_, config_, rng);
}

template <typename T>
ForwardResult<T> EavlModel<T>::forward(Tape<T>& tape, const Tensor<T>& image, const TokenSequence& tokens,
                                       const ForwardOptions& options) const {
  ForwardResult<T> r;
  const std::vector<bool> valid = tokens.valid();
  r.text = text_.encode(tape, tokens);
  r.image = image_.encode(tape, image);
  r.fused = neck_.forward(tape, r.image, r.text.global);
  r.queries = qgen_.forward(tape, r.image, r.text, valid);

  const std::size_t nq = config_.num_queries;
  Var<T> queries = r.queries.queries;
  if (options.query_order != nullptr) {
    std::vector<std::size_t> order = *options.query_order;
    std::vector<std::size_t> sorted = order;
    std::sort(sorted.begin(), sorted.end());
    for (std::size_t i = 0; i < sorted.size(); ++i) {
      if (sorted[i] != i || sorted.size() != nq) throw ConfigError("query_order is not a permutation of the queries");
    }
    queries = ops::gather_rows(queries, std::span<const std::size_t>(order));
    r.queries.queries = queries;
  }

  r.decoded = decoder_.decode(tape, r.fused.tokens, queries, config_.grid_height(), config_.grid_width(),
                              options.keep_cross_attention ? &r.cross_attention : nullptr);
  r.fp = aligner_.project_fp(tape, r.decoded);
  const std::size_t h = r.fp.dim(0), w = r.fp.dim(1);

  if (config_.mode == Mode::fixed_kernel) {
    r.bundle.prediction = aligner_.fixed_head(tape, r.fp);
    r.bundle.masks = ops::reshape(r.bundle.prediction, {1, h, w});
    r.bundle.scores = tape.constant(Tensor<T>({1}, T{1}));
    return r;
  }

  std::vector<Var<T>> masks;
  masks.reserve(nq);
  for (std::size_t n = 0; n < nq; ++n) {
    r.kernels.push_back(aligner_.kernel_from_query(tape, ops::row(queries, n), n));
    masks.push_back(aligner_.apply_dynamic_kernel(tape, r.fp, r.kernels.back()));
  }
  r.bundle.masks = ops::reshape(ops::stack_rows<T>(masks), {nq, h, w});
  r.bundle.scores = config_.mode == Mode::no_estimator ? tape.constant(Tensor<T>({nq}, T{1}))
                                                       : aligner_.score_queries(tape, queries);
  r.bundle.prediction = aligner_.aggregate(tape, r.bundle.masks, r.bundle.scores);
  return r;
}

template class EavlModel<float>;
template class EavlModel<double>;

}  // namespace eavl
