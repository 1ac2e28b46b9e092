// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <cstddef>
#include <map>
#include <vector>

#include "eavl/data.hpp"
#include "eavl/model.hpp"

namespace eavl {

inline constexpr std::array<double, 5> kPrecisionThresholds = {0.5, 0.6, 0.7, 0.8, 0.9};

/// Nearest-neighbour downsampling of a binary mask; output pixel (i, j) reads
/// the source pixel containing its centre.
Tensor<float> downsample_nearest(const Tensor<float>& mask, std::size_t height, std::size_t width);

/// Bilinear resize with half-pixel centres and edge clamping.
template <typename T>
Tensor<T> resize_bilinear(const Tensor<T>& x, std::size_t height, std::size_t width);

/// How a full-resolution mask is reduced to the logits' grid for the loss.
enum class TargetSampling {
  nearest,  // the source pixel at each cell centre, a hard {0, 1} target
  area,     // fraction of the cell's pixels that are set, a soft target
};

std::string to_string(TargetSampling s);
TargetSampling parse_target_sampling(const std::string& s);

/// Mean of each factor_y x factor_x block.
Tensor<float> downsample_area(const Tensor<float>& mask, std::size_t height, std::size_t width);

/// Mean binary cross-entropy of sigmoid(logits) against `gt`, which may be at
/// full image resolution (it is downsampled to the logits' grid).
template <typename T>
Var<T> bce_loss(Var<T> logits, const Tensor<float>& gt, TargetSampling sampling = TargetSampling::nearest);

/// Plain-value version of the loss for already matching shapes.
template <typename T>
double bce_loss_value(const Tensor<T>& logits, const Tensor<float>& gt);

struct IouCounts {
  std::size_t intersection = 0;
  std::size_t union_ = 0;

  double iou() const { return union_ == 0 ? 1.0 : static_cast<double>(intersection) / static_cast<double>(union_); }
};

/// Pixel counts of |pred and gt| and |pred or gt|; a pixel is set when > 0.5.
IouCounts iou_counts(const Tensor<float>& pred, const Tensor<float>& gt);
/// |pred and gt| / |pred or gt|, defined as 1 when both are empty.
double iou(const Tensor<float>& pred, const Tensor<float>& gt);

/// Upsamples logits to the mask's resolution and thresholds at sigmoid > 0.5.
template <typename T>
Tensor<float> binarize_prediction(const Tensor<T>& logits, std::size_t height, std::size_t width);

struct EvalReport {
  double overall_iou = 0.0;
  double mean_iou = 0.0;
  std::map<double, double> precision_at;
  std::size_t sample_count = 0;
  std::vector<double> per_image_iou;
};

/// Aggregates per-image counts in order; throws on an empty list.
EvalReport summarize(const std::vector<IouCounts>& counts);

template <typename T>
EvalReport evaluate(const EavlModel<T>& model, const std::vector<Sample>& dataset);

/// Prediction logits for one sample (no gradient bookkeeping is kept).
template <typename T>
Tensor<T> predict(const EavlModel<T>& model, const Sample& sample);

}  // namespace eavl
