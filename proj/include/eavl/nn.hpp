// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "eavl/ops.hpp"

namespace eavl {

using Rng = std::mt19937_64;

/// Uniform(-bound, bound) tensor with bound = sqrt(3 / fan_in), i.e. unit
/// output variance for unit-variance inputs.
template <typename T>
Tensor<T> lecun_uniform(Shape shape, std::size_t fan_in, Rng& rng);

/// Affine map over the last axis: y = x W + b, W is [in x out].
template <typename T>
class Linear {
 public:
  Linear() = default;
  Linear(ParameterStore<T>& store, const std::string& name, std::size_t in, std::size_t out, Rng& rng,
         bool with_bias = true);

  /// x: [rows x in] or a vector [in] (treated as one row, returns [out]).
  Var<T> operator()(Tape<T>& tape, Var<T> x) const;

  std::size_t in() const { return weight_->value.dim(0); }
  std::size_t out() const { return weight_->value.dim(1); }
  Parameter<T>& weight() const { return *weight_; }
  Parameter<T>* bias() const { return bias_; }

 private:
  Parameter<T>* weight_ = nullptr;
  Parameter<T>* bias_ = nullptr;
};

/// Stride-1 k x k convolution (k = 1 or 3) over a channels-last map.
template <typename T>
class Conv2d {
 public:
  Conv2d() = default;
  Conv2d(ParameterStore<T>& store, const std::string& name, std::size_t kernel_size, std::size_t in,
         std::size_t out, Rng& rng);

  Var<T> operator()(Tape<T>& tape, Var<T> x) const;

  Parameter<T>& kernel() const { return *kernel_; }
  Parameter<T>& bias() const { return *bias_; }

 private:
  Parameter<T>* kernel_ = nullptr;
  Parameter<T>* bias_ = nullptr;
};

template <typename T>
class LayerNorm {
 public:
  LayerNorm() = default;
  LayerNorm(ParameterStore<T>& store, const std::string& name, std::size_t width);

  Var<T> operator()(Tape<T>& tape, Var<T> x) const;

 private:
  Parameter<T>* gain_ = nullptr;
  Parameter<T>* bias_ = nullptr;
};

/// Multi-head scaled dot-product attention with learned Q, K, V and output
/// projections. No positional terms are added inside the block, so attention
/// over a set of rows is permutation-equivariant in the query rows and
/// permutation-invariant in the key/value rows.
template <typename T>
class MultiHeadAttention {
 public:
  MultiHeadAttention() = default;
  MultiHeadAttention(ParameterStore<T>& store, const std::string& name, std::size_t width, std::size_t heads,
                     Rng& rng);

  /// queries: [Tq x C], keys_values: [Tk x C]. `key_valid` (length Tk)
  /// excludes keys from every softmax. When `weights` is non-null the
  /// per-head attention matrices [Tq x Tk] are appended to it.
  Var<T> operator()(Tape<T>& tape, Var<T> queries, Var<T> keys_values,
                    const std::vector<bool>* key_valid = nullptr,
                    std::vector<Tensor<T>>* weights = nullptr) const;

  /// Self-attention: queries and keys/values are the same rows.
  Var<T> self(Tape<T>& tape, Var<T> x, const std::vector<bool>* key_valid = nullptr,
              std::vector<Tensor<T>>* weights = nullptr) const {
    return (*this)(tape, x, x, key_valid, weights);
  }

  std::size_t heads() const { return heads_; }

 private:
  Linear<T> q_, k_, v_, o_;
  std::size_t heads_ = 1;
};

/// Two-layer ReLU MLP applied per row.
template <typename T>
class FeedForward {
 public:
  FeedForward() = default;
  FeedForward(ParameterStore<T>& store, const std::string& name, std::size_t width, std::size_t hidden,
              Rng& rng);

  Var<T> operator()(Tape<T>& tape, Var<T> x) const;

 private:
  Linear<T> up_, down_;
};

}  // namespace eavl
