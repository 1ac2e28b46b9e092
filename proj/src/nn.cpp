// SPDX-License-Identifier: Apache-2.0
#include "eavl/nn.hpp"

#include <cmath>

namespace eavl {

template <typename T>
Tensor<T> lecun_uniform(Shape shape, std::size_t fan_in, Rng& rng) {
  const double bound = std::sqrt(3.0 / static_cast<double>(fan_in));
  std::uniform_real_distribution<double> dist(-bound, bound);
  Tensor<T> t(std::move(shape));
  for (T& v : t.data()) v = static_cast<T>(dist(rng));
  return t;
}

template <typename T>
Linear<T>::Linear(ParameterStore<T>& store, const std::string& name, std::size_t in, std::size_t out, Rng& rng,
                  bool with_bias) {
  weight_ = &store.add(name + ".weight", lecun_uniform<T>({in, out}, in, rng));
  if (with_bias) bias_ = &store.add(name + ".bias", Tensor<T>({out}));
}

template <typename T>
Var<T> Linear<T>::operator()(Tape<T>& tape, Var<T> x) const {
  const bool vector_input = x.value().rank() == 1;
  Var<T> rows = vector_input ? ops::reshape(x, {1, x.value().size()}) : x;
  Var<T> y = ops::matmul(rows, tape.param(*weight_));
  if (bias_ != nullptr) y = ops::add_rowwise(y, tape.param(*bias_));
  return vector_input ? ops::reshape(y, {out()}) : y;
}

template <typename T>
Conv2d<T>::Conv2d(ParameterStore<T>& store, const std::string& name, std::size_t kernel_size, std::size_t in,
                  std::size_t out, Rng& rng) {
  if (kernel_size != 1 && kernel_size != 3) {
    throw ConfigError("Conv2d " + name + ": kernel size must be 1 or 3");
  }
  kernel_ = &store.add(name + ".kernel",
                       lecun_uniform<T>({kernel_size, kernel_size, in, out}, kernel_size * kernel_size * in, rng));
  bias_ = &store.add(name + ".bias", Tensor<T>({out}));
}

template <typename T>
Var<T> Conv2d<T>::operator()(Tape<T>& tape, Var<T> x) const {
  return ops::conv2d(x, tape.param(*kernel_), tape.param(*bias_));
}

template <typename T>
LayerNorm<T>::LayerNorm(ParameterStore<T>& store, const std::string& name, std::size_t width) {
  gain_ = &store.add(name + ".gain", Tensor<T>({width}, T{1}));
  bias_ = &store.add(name + ".bias", Tensor<T>({width}));
}

template <typename T>
Var<T> LayerNorm<T>::operator()(Tape<T>& tape, Var<T> x) const {
  return ops::layer_norm(x, tape.param(*gain_), tape.param(*bias_));
}

template <typename T>
MultiHeadAttention<T>::MultiHeadAttention(ParameterStore<T>& store, const std::string& name, std::size_t width,
                                          std::size_t heads, Rng& rng)
    : heads_(heads) {
  if (heads == 0 || width % heads != 0) {
    throw ConfigError("attention " + name + ": width " + std::to_string(width) +
                      " is not divisible by " + std::to_string(heads) + " heads");
  }
  q_ = Linear<T>(store, name + ".q", width, width, rng);
  k_ = Linear<T>(store, name + ".k", width, width, rng, /*with_bias=*/false);
  v_ = Linear<T>(store, name + ".v", width, width, rng);
  o_ = Linear<T>(store, name + ".out", width, width, rng);
}

template <typename T>
Var<T> MultiHeadAttention<T>::operator()(Tape<T>& tape, Var<T> queries, Var<T> keys_values,
                                         const std::vector<bool>* key_valid,
                                         std::vector<Tensor<T>>* weights) const {
  const std::size_t width = q_.in();
  if (queries.value().rank() != 2 || queries.dim(1) != width || keys_values.value().rank() != 2 ||
      keys_values.dim(1) != width) {
    throw DimensionError("attention: expected [T x " + std::to_string(width) + "] inputs, got " +
                         to_string(queries.shape()) + " and " + to_string(keys_values.shape()));
  }
  const std::size_t head_dim = width / heads_;
  const T inv_sqrt = T{1} / std::sqrt(static_cast<T>(head_dim));
  Var<T> q = q_(tape, queries);
  Var<T> k = k_(tape, keys_values);
  Var<T> v = v_(tape, keys_values);
  std::vector<Var<T>> heads;
  heads.reserve(heads_);
  for (std::size_t h = 0; h < heads_; ++h) {
    Var<T> qh = ops::slice_last(q, h * head_dim, head_dim);
    Var<T> kh = ops::slice_last(k, h * head_dim, head_dim);
    Var<T> vh = ops::slice_last(v, h * head_dim, head_dim);
    Var<T> scores = ops::scale(ops::matmul_nt(qh, kh), inv_sqrt);
    Var<T> attn = key_valid != nullptr ? ops::masked_softmax_rows(scores, *key_valid) : ops::softmax(scores, 1);
    if (weights != nullptr) weights->push_back(attn.value());
    heads.push_back(ops::matmul(attn, vh));
  }
  Var<T> merged = heads_ == 1 ? heads[0] : ops::concat_last<T>(heads);
  return o_(tape, merged);
}

template <typename T>
FeedForward<T>::FeedForward(ParameterStore<T>& store, const std::string& name, std::size_t width,
                            std::size_t hidden, Rng& rng) {
  up_ = Linear<T>(store, name + ".up", width, hidden, rng);
  down_ = Linear<T>(store, name + ".down", hidden, width, rng);
}

template <typename T>
Var<T> FeedForward<T>::operator()(Tape<T>& tape, Var<T> x) const {
  return down_(tape, ops::relu(up_(tape, x)));
}

template Tensor<float> lecun_uniform<float>(Shape, std::size_t, Rng&);
template Tensor<double> lecun_uniform<double>(Shape, std::size_t, Rng&);
template class Linear<float>;
template class Linear<double>;
template class Conv2d<float>;
template class Conv2d<double>;
template class LayerNorm<float>;
template class LayerNorm<double>;
template class MultiHeadAttention<float>;
template class MultiHeadAttention<double>;
template class FeedForward<float>;
template class FeedForward<double>;

}  // namespace eavl
