// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <vector>

#include "eavl/decoder_aligner.hpp"
#include "eavl/query_generator.hpp"

namespace eavl {

struct ForwardOptions {
  /// Reorders the generated queries (a permutation of 0..N_q-1) before they
  /// reach the decoder and the aligner.
  const std::vector<std::size_t>* query_order = nullptr;
  /// Record decoder cross-attention matrices in ForwardResult.
  bool keep_cross_attention = false;
};

template <typename T>
struct ForwardResult {
  TextFeatures<T> text;
  ImageFeatures<T> image;
  FusedFeatures<T> fused;
  QuerySet<T> queries;
  Var<T> decoded;  // F_s
  Var<T> fp;       // F_p
  std::vector<DynamicKernel<T>> kernels;
  MaskBundle<T> bundle;
  std::vector<Tensor<T>> cross_attention;
};

/// The complete network: encoders, fusion neck, query generator, decoder and
/// the segmentation head selected by ModelConfig::mode.
template <typename T>
class EavlModel {
 public:
  explicit EavlModel(const ModelConfig& config);
  EavlModel(const EavlModel&) = delete;
  EavlModel& operator=(const EavlModel&) = delete;
  EavlModel(EavlModel&&) = default;
  EavlModel& operator=(EavlModel&&) = default;

  const ModelConfig& config() const { return config_; }
  ParameterStore<T>& parameters() { return store_; }
  const ParameterStore<T>& parameters() const { return store_; }

  ForwardResult<T> forward(Tape<T>& tape, const Tensor<T>& image, const TokenSequence& tokens,
                           const ForwardOptions& options = {}) const;

  /// Copies every parameter value from a model of the same configuration,
  /// converting precision if needed.
  template <typename U>
  void copy_parameters_from(const EavlModel<U>& other) {
    for (std::size_t i = 0; i < store_.size(); ++i) {
      const Parameter<U>* src = other.parameters().find(store_[i].name);
      if (src == nullptr || src->value.shape() != store_[i].value.shape()) {
        throw ConfigError("cannot copy parameter " + store_[i].name);
      }
      store_[i].value = src->value.template cast<T>();
    }
  }

 private:
  ModelConfig config_;
  ParameterStore<T> store_;
  TextEncoder<T> text_;
  ImageEncoder<T> image_;
  FusionNeck<T> neck_;
  QueryGenerator<T> qgen_;
  TransformerDecoder<T> decoder_;
  VisionLanguageAligner<T> aligner_;

 public:
  const TextEncoder<T>& text_encoder() const { return text_; }
  const ImageEncoder<T>& image_encoder() const { return image_; }
  const FusionNeck<T>& neck() const { return neck_; }
  const QueryGenerator<T>& query_generator() const { return qgen_; }
  const TransformerDecoder<T>& decoder() const { return decoder_; }
  const VisionLanguageAligner<T>& aligner() const { return aligner_; }
};

}  // namespace eavl
