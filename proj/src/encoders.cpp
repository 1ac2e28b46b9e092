// SPDX-License-Identifier: Apache-2.0
#include "eavl/encoders.hpp"

#include <algorithm>
#include <array>
#include <istream>
#include <ostream>
#include <sstream>

namespace eavl {

Vocabulary::Vocabulary() : Vocabulary(std::vector<std::string>{}) {}

Vocabulary::Vocabulary(const std::vector<std::string>& words) {
  words_ = {"<sos>", "<eos>", "<pad>"};
  for (const std::string& w : words) {
    if (w == "<sos>" || w == "<eos>" || w == "<pad>") continue;
    if (std::find(words_.begin(), words_.end(), w) == words_.end()) words_.push_back(w);
  }
  for (std::size_t i = 0; i < words_.size(); ++i) ids_.emplace(words_[i], i);
}

const Vocabulary& Vocabulary::synthetic() {
  static const Vocabulary vocab({"red", "green", "blue", "yellow", "purple", "orange", "circle", "square",
                                 "triangle", "left", "right", "top", "bottom", "on", "the", "of"});
  return vocab;
}

std::size_t Vocabulary::id(std::string_view word) const {
  auto it = ids_.find(std::string(word));
  if (it == ids_.end()) throw VocabularyError("unknown word: '" + std::string(word) + "'");
  return it->second;
}

bool Vocabulary::contains(std::string_view word) const { return ids_.count(std::string(word)) != 0; }

void Vocabulary::write(std::ostream& out) const {
  for (const std::string& w : words_) out << w << '\n';
}

Vocabulary Vocabulary::read(std::istream& in) {
  std::vector<std::string> lines;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    lines.push_back(line);
  }
  if (lines.size() < 3 || lines[0] != "<sos>" || lines[1] != "<eos>" || lines[2] != "<pad>") {
    throw FormatError("vocabulary must start with <sos>, <eos>, <pad>");
  }
  Vocabulary v(std::vector<std::string>(lines.begin() + 3, lines.end()));
  if (v.size() != lines.size()) throw FormatError("vocabulary contains duplicate tokens");
  return v;
}

std::vector<bool> TokenSequence::valid() const {
  std::vector<bool> v(ids.size(), false);
  for (std::size_t i = 0; i <= eos_position && i < ids.size(); ++i) v[i] = true;
  return v;
}

TokenSequence tokenize(std::string_view expression, const Vocabulary& vocab, std::size_t max_len) {
  if (max_len < 2) throw ConfigError("max_tokens must leave room for SOS and EOS");
  std::vector<std::size_t> words;
  std::vector<std::string> unknown;
  std::istringstream in{std::string(expression)};
  std::string w;
  while (in >> w) {
    if (vocab.contains(w)) {
      words.push_back(vocab.id(w));
    } else {
      unknown.push_back(w);
    }
  }
  if (!unknown.empty()) {
    std::string msg = "unknown word(s):";
    for (const auto& u : unknown) msg += " '" + u + "'";
    throw VocabularyError(msg);
  }
  const std::size_t kept = std::min(words.size(), max_len - 2);
  TokenSequence seq;
  seq.ids.assign(max_len, Vocabulary::kPad);
  seq.ids[0] = Vocabulary::kSos;
  for (std::size_t i = 0; i < kept; ++i) seq.ids[i + 1] = words[i];
  seq.eos_position = kept + 1;
  seq.ids[seq.eos_position] = Vocabulary::kEos;
  seq.true_length = kept + 2;
  return seq;
}

template <typename T>
TextEncoder<T>::TextEncoder(ParameterStore<T>& store, const ModelConfig& config, Rng& rng)
    : max_tokens_(config.max_tokens) {
  const std::size_t c = config.width;
  const std::size_t vocab = config.vocab_size != 0 ? config.vocab_size : Vocabulary::synthetic().size();
  embedding_ = &store.add("text.embedding", lecun_uniform<T>({vocab, c}, 1, rng));
  position_ = &store.add("text.position", lecun_uniform<T>({config.max_tokens, c}, 1, rng));
  for (std::size_t i = 0; i < config.text_layers; ++i) {
    const std::string p = "text.block" + std::to_string(i);
    Block b;
    b.norm1 = LayerNorm<T>(store, p + ".norm1", c);
    b.attn = MultiHeadAttention<T>(store, p + ".attn", c, config.heads, rng);
    b.norm2 = LayerNorm<T>(store, p + ".norm2", c);
    b.ffn = FeedForward<T>(store, p + ".ffn", c, config.ffn_width(), rng);
    blocks_.push_back(b);
  }
  final_norm_ = LayerNorm<T>(store, "text.final_norm", c);
  global_proj_ = Linear<T>(store, "text.global_proj", c, config.text_width, rng);
}

template <typename T>
TextFeatures<T> TextEncoder<T>::encode(Tape<T>& tape, const TokenSequence& tokens) const {
  if (tokens.ids.size() != max_tokens_) {
    throw DimensionError("token sequence of length " + std::to_string(tokens.ids.size()) +
                         ", encoder expects " + std::to_string(max_tokens_));
  }
  const std::vector<bool> valid = tokens.valid();
  Var<T> x = ops::add(ops::gather_rows(tape.param(*embedding_), std::span<const std::size_t>(tokens.ids)),
                      tape.param(*position_));
  for (const Block& b : blocks_) {
    x = ops::add(x, b.attn.self(tape, b.norm1(tape, x), &valid));
    x = ops::add(x, b.ffn(tape, b.norm2(tape, x)));
  }
  TextFeatures<T> out;
  out.tokens = final_norm_(tape, x);
  out.global = global_proj_(tape, ops::row(out.tokens, tokens.eos_position));
  return out;
}

template <typename T>
ImageEncoder<T>::ImageEncoder(ParameterStore<T>& store, const ModelConfig& config, Rng& rng)
    : height_(config.image_height), width_(config.image_width) {
  std::size_t in = 3;
  for (std::size_t s = 0; s < 4; ++s) {
    stages_.emplace_back(store, "image.stage" + std::to_string(s + 1), 3, in, config.backbone[s], rng);
    in = config.backbone[s];
  }
  const std::size_t c4 = config.backbone[3];
  const std::size_t spatial = (height_ / 16) * (width_ / 16);
  position_ = &store.add("image.pool.position", lecun_uniform<T>({spatial, c4}, c4, rng));
  pool_ = MultiHeadAttention<T>(store, "image.pool.attn", c4, config.heads, rng);
  proj_v2_ = Conv2d<T>(store, "image.proj_v2", 1, config.backbone[1], config.width, rng);
  proj_v3_ = Conv2d<T>(store, "image.proj_v3", 1, config.backbone[2], config.width, rng);
  proj_v4_ = Linear<T>(store, "image.proj_v4", c4, config.width, rng);
  proj_global_ = Linear<T>(store, "image.proj_global", c4, config.width, rng);
}

template <typename T>
ImageFeatures<T> ImageEncoder<T>::encode(Tape<T>& tape, const Tensor<T>& image) const {
  if (image.rank() != 3 || image.dim(2) != 3) {
    throw DimensionError("image must be H x W x 3, got " + to_string(image.shape()));
  }
  if (image.dim(0) != height_ || image.dim(1) != width_) {
    throw ConfigError("image is " + to_string(image.shape()) + " but the encoder was built for " +
                      std::to_string(height_) + "x" + std::to_string(width_));
  }
  Var<T> x = tape.constant(image);
  std::array<Var<T>, 4> stage{};
  for (std::size_t s = 0; s < 4; ++s) {
    x = ops::avgpool2x(ops::relu(stages_[s](tape, x)));
    stage[s] = x;
  }
  const std::size_t h4 = stage[3].dim(0), w4 = stage[3].dim(1), c4 = stage[3].dim(2);
  Var<T> tokens = ops::reshape(stage[3], {h4 * w4, c4});
  Var<T> mean = ops::reshape(ops::mean_rows(tokens), {1, c4});
  const std::array<Var<T>, 2> parts = {mean, ops::add(tokens, tape.param(*position_))};
  Var<T> pooled = pool_.self(tape, ops::concat_rows<T>(parts));

  ImageFeatures<T> out;
  out.v2 = proj_v2_(tape, stage[1]);
  out.v3 = proj_v3_(tape, stage[2]);
  Var<T> z = ops::slice_rows(pooled, 1, h4 * w4);
  out.v4 = ops::reshape(proj_v4_(tape, z), {h4, w4, proj_v4_.out()});
  out.global = proj_global_(tape, ops::row(pooled, 0));
  return out;
}

template class TextEncoder<float>;
template class TextEncoder<double>;
template class ImageEncoder<float>;
template class ImageEncoder<double>;

}  // namespace eavl
