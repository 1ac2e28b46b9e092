// SPDX-License-Identifier: Apache-2.0
#include "eavl/metrics.hpp"

#include <algorithm>
#include <cmath>

#include "eavl/errors.hpp"

namespace eavl {

Tensor<float> downsample_nearest(const Tensor<float>& mask, std::size_t height, std::size_t width) {
  if (mask.rank() != 2) throw DimensionError("downsample_nearest: expected a 2-D mask, got " + to_string(mask.shape()));
  const std::size_t H = mask.dim(0), W = mask.dim(1);
  Tensor<float> out({height, width});
  for (std::size_t i = 0; i < height; ++i) {
    const std::size_t sy = std::min(H - 1, (2 * i + 1) * H / (2 * height));
    for (std::size_t j = 0; j < width; ++j) {
      const std::size_t sx = std::min(W - 1, (2 * j + 1) * W / (2 * width));
      out.at(i, j) = mask.at(sy, sx);
    }
  }
  return out;
}

template <typename T>
Tensor<T> resize_bilinear(const Tensor<T>& x, std::size_t height, std::size_t width) {
  if (x.rank() != 2) throw DimensionError("resize_bilinear: expected a 2-D map, got " + to_string(x.shape()));
  const std::size_t h = x.dim(0), w = x.dim(1);
  struct Tap {
    std::size_t lo, hi;
    double frac;
  };
  auto taps = [](std::size_t in, std::size_t out) {
    std::vector<Tap> t(out);
    const double scale = static_cast<double>(in) / static_cast<double>(out);
    for (std::size_t o = 0; o < out; ++o) {
      const double src = std::clamp((o + 0.5) * scale - 0.5, 0.0, static_cast<double>(in - 1));
      const std::size_t lo = static_cast<std::size_t>(std::floor(src));
      t[o] = {lo, std::min(lo + 1, in - 1), src - static_cast<double>(lo)};
    }
    return t;
  };
  const auto ys = taps(h, height), xs = taps(w, width);
  Tensor<T> out({height, width});
  for (std::size_t i = 0; i < height; ++i) {
    const double fy = ys[i].frac;
    for (std::size_t j = 0; j < width; ++j) {
      const double fx = xs[j].frac;
      const double top = (1 - fx) * x.at(ys[i].lo, xs[j].lo) + fx * x.at(ys[i].lo, xs[j].hi);
      const double bottom = (1 - fx) * x.at(ys[i].hi, xs[j].lo) + fx * x.at(ys[i].hi, xs[j].hi);
      out.at(i, j) = static_cast<T>((1 - fy) * top + fy * bottom);
    }
  }
  return out;
}

std::string to_string(TargetSampling s) { return s == TargetSampling::nearest ? "nearest" : "area"; }

TargetSampling parse_target_sampling(const std::string& s) {
  if (s == "nearest") return TargetSampling::nearest;
  if (s == "area") return TargetSampling::area;
  throw ConfigError("unknown target sampling '" + s + "' (expected nearest or area)");
}

Tensor<float> downsample_area(const Tensor<float>& mask, std::size_t height, std::size_t width) {
  if (mask.rank() != 2 || mask.dim(0) % height != 0 || mask.dim(1) % width != 0) {
    throw DimensionError("downsample_area: " + to_string(mask.shape()) + " is not a multiple of " +
                         std::to_string(height) + "x" + std::to_string(width));
  }
  const std::size_t fy = mask.dim(0) / height, fx = mask.dim(1) / width;
  Tensor<float> out({height, width});
  for (std::size_t i = 0; i < height; ++i) {
    for (std::size_t j = 0; j < width; ++j) {
      float sum = 0.0f;
      for (std::size_t y = 0; y < fy; ++y) {
        for (std::size_t x = 0; x < fx; ++x) sum += mask.at(i * fy + y, j * fx + x);
      }
      out.at(i, j) = sum / static_cast<float>(fy * fx);
    }
  }
  return out;
}

namespace {

template <typename T>
Tensor<T> loss_target(const Tensor<float>& gt, const Shape& logits_shape, TargetSampling sampling) {
  if (gt.rank() != 2 || logits_shape.size() != 2) {
    throw DimensionError("bce_loss: logits " + to_string(logits_shape) + " vs mask " + to_string(gt.shape()));
  }
  if (gt.shape() == logits_shape) return gt.cast<T>();
  if (gt.dim(0) % logits_shape[0] != 0 || gt.dim(1) % logits_shape[1] != 0) {
    throw DimensionError("bce_loss: mask " + to_string(gt.shape()) + " is not a multiple of logits " +
                         to_string(logits_shape));
  }
  if (sampling == TargetSampling::area) return downsample_area(gt, logits_shape[0], logits_shape[1]).cast<T>();
  return downsample_nearest(gt, logits_shape[0], logits_shape[1]).cast<T>();
}

}  // namespace

template <typename T>
Var<T> bce_loss(Var<T> logits, const Tensor<float>& gt, TargetSampling sampling) {
  return ops::bce_with_logits(logits, loss_target<T>(gt, logits.shape(), sampling));
}

template <typename T>
double bce_loss_value(const Tensor<T>& logits, const Tensor<float>& gt) {
  if (logits.shape() != gt.shape()) {
    throw DimensionError("bce_loss: logits " + to_string(logits.shape()) + " vs mask " + to_string(gt.shape()));
  }
  double total = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    const double z = logits[i];
    total += std::max(z, 0.0) - z * gt[i] + std::log1p(std::exp(-std::abs(z)));
  }
  return total / static_cast<double>(logits.size());
}

IouCounts iou_counts(const Tensor<float>& pred, const Tensor<float>& gt) {
  if (pred.shape() != gt.shape()) {
    throw DimensionError("iou: prediction " + to_string(pred.shape()) + " vs mask " + to_string(gt.shape()));
  }
  IouCounts c;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const bool p = pred[i] > 0.5f, g = gt[i] > 0.5f;
    c.intersection += p && g;
    c.union_ += p || g;
  }
  return c;
}

double iou(const Tensor<float>& pred, const Tensor<float>& gt) { return iou_counts(pred, gt).iou(); }

template <typename T>
Tensor<float> binarize_prediction(const Tensor<T>& logits, std::size_t height, std::size_t width) {
  const Tensor<T> up = resize_bilinear(logits, height, width);
  Tensor<float> out({height, width});
  for (std::size_t i = 0; i < up.size(); ++i) out[i] = up[i] > T{0} ? 1.0f : 0.0f;
  return out;
}

EvalReport summarize(const std::vector<IouCounts>& counts) {
  if (counts.empty()) throw std::invalid_argument("evaluate: empty dataset");
  EvalReport r;
  r.sample_count = counts.size();
  std::size_t inter = 0, uni = 0;
  double sum = 0.0;
  for (const IouCounts& c : counts) {
    inter += c.intersection;
    uni += c.union_;
    r.per_image_iou.push_back(c.iou());
    sum += r.per_image_iou.back();
  }
  r.overall_iou = uni == 0 ? 1.0 : static_cast<double>(inter) / static_cast<double>(uni);
  r.mean_iou = sum / static_cast<double>(counts.size());
  for (double x : kPrecisionThresholds) {
    const auto hits = std::count_if(r.per_image_iou.begin(), r.per_image_iou.end(), [x](double v) { return v > x; });
    r.precision_at[x] = static_cast<double>(hits) / static_cast<double>(counts.size());
  }
  return r;
}

template <typename T>
Tensor<T> predict(const EavlModel<T>& model, const Sample& sample) {
  static const Vocabulary vocab = Vocabulary::synthetic();
  Tape<T> tape;
  const TokenSequence tokens = tokenize(sample.expression, vocab, model.config().max_tokens);
  const ForwardResult<T> r = model.forward(tape, sample.image.cast<T>(), tokens);
  return r.bundle.prediction.value();
}

template <typename T>
EvalReport evaluate(const EavlModel<T>& model, const std::vector<Sample>& dataset) {
  if (dataset.empty()) throw std::invalid_argument("evaluate: empty dataset");
  std::vector<IouCounts> counts;
  counts.reserve(dataset.size());
  for (const Sample& s : dataset) {
    const Tensor<float> pred = binarize_prediction(predict(model, s), s.gt_mask.dim(0), s.gt_mask.dim(1));
    counts.push_back(iou_counts(pred, s.gt_mask));
  }
  return summarize(counts);
}

#define EAVL_INSTANTIATE_METRICS(T)                                                        \
  template Tensor<T> resize_bilinear<T>(const Tensor<T>&, std::size_t, std::size_t);       \
  template Var<T> bce_loss<T>(Var<T>, const Tensor<float>&, TargetSampling);                             \
  template double bce_loss_value<T>(const Tensor<T>&, const Tensor<float>&);               \
  template Tensor<float> binarize_prediction<T>(const Tensor<T>&, std::size_t, std::size_t); \
  template Tensor<T> predict<T>(const EavlModel<T>&, const Sample&);                       \
  template EvalReport evaluate<T>(const EavlModel<T>&, const std::vector<Sample>&);

EAVL_INSTANTIATE_METRICS(float)
EAVL_INSTANTIATE_METRICS(double)

}  // namespace eavl
