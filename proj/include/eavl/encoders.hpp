// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <iosfwd>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "eavl/model_config.hpp"
#include "eavl/nn.hpp"

namespace eavl {

/// Word-level vocabulary. Ids are dense from 0; the first three are the
/// reserved <sos>, <eos> and <pad> tokens.
class Vocabulary {
 public:
  static constexpr std::size_t kSos = 0;
  static constexpr std::size_t kEos = 1;
  static constexpr std::size_t kPad = 2;

  Vocabulary();
  explicit Vocabulary(const std::vector<std::string>& words);

  /// Every word the synthetic scene grammar can emit.
  static const Vocabulary& synthetic();

  std::size_t id(std::string_view word) const;
  bool contains(std::string_view word) const;
  const std::string& word(std::size_t id) const { return words_.at(id); }
  std::size_t size() const { return words_.size(); }

  /// One token per line; line number (from 0) is the id.
  void write(std::ostream& out) const;
  static Vocabulary read(std::istream& in);

 private:
  std::vector<std::string> words_;
  std::unordered_map<std::string, std::size_t> ids_;
};

struct TokenSequence {
  std::vector<std::size_t> ids;  // length L_max
  std::size_t true_length = 0;   // tokens up to and including EOS
  std::size_t eos_position = 0;

  /// True for SOS, words and EOS; false for PAD positions.
  std::vector<bool> valid() const;
};

/// SOS + word ids + EOS padded with PAD to max_len. Long inputs are
/// truncated so that EOS is the last kept token.
TokenSequence tokenize(std::string_view expression, const Vocabulary& vocab, std::size_t max_len);

template <typename T>
struct TextFeatures {
  Var<T> tokens;  // F_t  [L x C]
  Var<T> global;  // F_tg [C']
};

/// Transformer text encoder: token + learned positional embeddings, pre-norm
/// self-attention blocks with PAD keys masked, final layer norm. The EOS row
/// of the top layer is linearly projected to the global feature.
template <typename T>
class TextEncoder {
 public:
  TextEncoder() = default;
  TextEncoder(ParameterStore<T>& store, const ModelConfig& config, Rng& rng);

  TextFeatures<T> encode(Tape<T>& tape, const TokenSequence& tokens) const;

 private:
  struct Block {
    LayerNorm<T> norm1, norm2;
    MultiHeadAttention<T> attn;
    FeedForward<T> ffn;
  };
  Parameter<T>* embedding_ = nullptr;
  Parameter<T>* position_ = nullptr;
  std::vector<Block> blocks_;
  LayerNorm<T> final_norm_;
  Linear<T> global_proj_;
  std::size_t max_tokens_ = 0;
};

template <typename T>
struct ImageFeatures {
  Var<T> v2;      // F_v2 [H/4 x W/4 x C]
  Var<T> v3;      // F_v3 [H/8 x W/8 x C]
  Var<T> v4;      // F_v4 [H/16 x W/16 x C]
  Var<T> global;  // F_vg [C]
};

/// Convolutional backbone of four [3x3 conv, ReLU, 2x2 mean-pool] stages
/// followed by attention pooling over [mean(x4); x4] and per-pixel
/// projections of stages 2-4.
template <typename T>
class ImageEncoder {
 public:
  ImageEncoder() = default;
  ImageEncoder(ParameterStore<T>& store, const ModelConfig& config, Rng& rng);

  /// image: [H x W x 3], H and W divisible by 16.
  ImageFeatures<T> encode(Tape<T>& tape, const Tensor<T>& image) const;

 private:
  std::vector<Conv2d<T>> stages_;
  Parameter<T>* position_ = nullptr;  // spatial tokens of stage 4
  MultiHeadAttention<T> pool_;
  Conv2d<T> proj_v2_, proj_v3_;
  Linear<T> proj_v4_, proj_global_;
  std::size_t height_ = 0, width_ = 0;
};

}  // namespace eavl
