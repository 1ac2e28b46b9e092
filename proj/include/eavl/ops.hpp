// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "eavl/tape.hpp"

// Differentiable operations. Every function records its result and a
// backward closure on the tape that owns its operands.
namespace eavl::ops {

/// [M x K] x [K x N] -> [M x N].
template <typename T>
Var<T> matmul(Var<T> a, Var<T> b);

/// [M x K] x [N x K]^T -> [M x N].
template <typename T>
Var<T> matmul_nt(Var<T> a, Var<T> b);

template <typename T>
Var<T> transpose(Var<T> x);

template <typename T>
Var<T> add(Var<T> a, Var<T> b);

template <typename T>
Var<T> mul(Var<T> a, Var<T> b);

/// x + v where v has length equal to x's last dimension (bias broadcast over
/// every row / spatial position).
template <typename T>
Var<T> add_rowwise(Var<T> x, Var<T> v);

/// x * v with the same broadcast rule as add_rowwise (a C-length vector gates
/// every token row or spatial position).
template <typename T>
Var<T> mul_rowwise(Var<T> x, Var<T> v);

template <typename T>
Var<T> scale(Var<T> x, T s);

/// max(x, 0); the subgradient at 0 is 0.
template <typename T>
Var<T> relu(Var<T> x);

/// While set, every relu appends one flag (input > 0) per element to `trace`
/// on the calling thread. The gradient checker uses it to spot probes that
/// straddle a kink.
void set_relu_trace(std::vector<bool>* trace);

/// Stride-1 convolution of an H x W x Cin map with a k x k x Cin x Cout kernel
/// (k = 1 or 3), zero padding (k-1)/2, plus a Cout bias.
template <typename T>
Var<T> conv2d(Var<T> x, Var<T> kernel, Var<T> bias);

/// Bilinear 2x upsampling of an H x W x C map, half-pixel centres
/// (no corner alignment), edges clamped.
template <typename T>
Var<T> upsample2x(Var<T> x);

/// 2x2 mean pooling with stride 2; H and W must be even.
template <typename T>
Var<T> avgpool2x(Var<T> x);

/// Softmax along `axis`, max-subtracted.
template <typename T>
Var<T> softmax(Var<T> x, std::size_t axis);

/// Row softmax of a 2-D tensor over the columns where valid[j] is true;
/// masked columns come out exactly 0. At least one column must be valid.
template <typename T>
Var<T> masked_softmax_rows(Var<T> x, const std::vector<bool>& valid);

/// Mean over rows of a [T x C] tensor -> [C].
template <typename T>
Var<T> mean_rows(Var<T> x);

/// Row i of a [T x C] tensor -> [C].
template <typename T>
Var<T> row(Var<T> x, std::size_t i);

/// Rows of `table` selected by ids -> [ids.size() x C].
template <typename T>
Var<T> gather_rows(Var<T> table, std::span<const std::size_t> ids);

/// Rows [begin, begin + count) of a 2-D tensor.
template <typename T>
Var<T> slice_rows(Var<T> x, std::size_t begin, std::size_t count);

/// Concatenation of 2-D tensors with equal column count along rows.
template <typename T>
Var<T> concat_rows(std::span<const Var<T>> xs);

/// Stacks vectors / tensors of equal size as the rows of a 2-D tensor.
template <typename T>
Var<T> stack_rows(std::span<const Var<T>> xs);

/// Concatenation along the last axis; leading dims must agree.
template <typename T>
Var<T> concat_last(std::span<const Var<T>> xs);

/// Columns [begin, begin + count) of the last axis.
template <typename T>
Var<T> slice_last(Var<T> x, std::size_t begin, std::size_t count);

/// Contiguous flat range [offset, offset + size(shape)) reshaped to shape.
template <typename T>
Var<T> slice_flat(Var<T> x, std::size_t offset, Shape shape);

template <typename T>
Var<T> reshape(Var<T> x, Shape shape);

/// Per-row layer normalisation with gain and bias over the last axis.
template <typename T>
Var<T> layer_norm(Var<T> x, Var<T> gain, Var<T> bias, T eps = T(1e-5));

template <typename T>
Var<T> sum(Var<T> x);

/// sum(x * weights) for a constant weight tensor of x's shape.
template <typename T>
Var<T> weighted_sum(Var<T> x, const Tensor<T>& weights);

/// Mean binary cross-entropy of sigmoid(logits) against {0,1} targets,
/// computed in the stable max(z,0) - z*t + log(1 + exp(-|z|)) form.
template <typename T>
Var<T> bce_with_logits(Var<T> logits, const Tensor<T>& target);

}  // namespace eavl::ops
