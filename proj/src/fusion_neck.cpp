// SPDX-License-Identifier: Apache-2.0
#include "eavl/fusion_neck.hpp"

#include <array>

namespace eavl {

template <typename T>
Tensor<T> coord_features(std::size_t height, std::size_t width) {
  if (height == 0 || width == 0) throw DimensionError("coord_features: dims must be positive");
  auto axis = [](std::size_t i, std::size_t n) {
    return n == 1 ? T{0} : static_cast<T>(-1.0 + 2.0 * static_cast<double>(i) / static_cast<double>(n - 1));
  };
  Tensor<T> out({height, width, 2});
  for (std::size_t y = 0; y < height; ++y) {
    for (std::size_t x = 0; x < width; ++x) {
      out.at(y, x, 0) = axis(x, width);
      out.at(y, x, 1) = axis(y, height);
    }
  }
  return out;
}

template <typename T>
FusionNeck<T>::FusionNeck(ParameterStore<T>& store, const std::string& name, const ModelConfig& config, Rng& rng,
                          bool language_gated)
    : gated_(language_gated) {
  const std::size_t c = config.width;
  const std::size_t half = c / 2;
  v4_ = Conv2d<T>(store, name + ".v4", 1, c, c, rng);
  if (gated_) tg_ = Linear<T>(store, name + ".tg", config.text_width, c, rng);
  m4_ = Conv2d<T>(store, name + ".m4", 1, c, half, rng);
  v3_ = Conv2d<T>(store, name + ".v3", 1, c, c - half, rng);
  m3_ = Conv2d<T>(store, name + ".m3", 1, c, half, rng);
  v2_ = Conv2d<T>(store, name + ".v2", 1, c, c - half, rng);
  aggregate_ = Conv2d<T>(store, name + ".aggregate", 1, 3 * c, c, rng);
  integrate_ = Conv2d<T>(store, name + ".integrate", 1, c + 2, c, rng);
}

template <typename T>
Var<T> FusionNeck<T>::fuse_stage4(Tape<T>& tape, Var<T> v4, std::optional<Var<T>> text_global) const {
  Var<T> vision = ops::relu(v4_(tape, v4));
  if (gated_) {
    if (!text_global) throw ConfigError("language-gated fusion needs the global language feature");
    Var<T> gate = ops::relu(tg_(tape, *text_global));
    vision = ops::mul_rowwise(vision, gate);
  }
  return ops::upsample2x(vision);
}

template <typename T>
Var<T> FusionNeck<T>::fuse_multiscale(Tape<T>& tape, Var<T> m4, Var<T> v3, Var<T> v2) const {
  if (v2.value().rank() != 3 || v3.value().rank() != 3 || v2.dim(0) != 2 * v3.dim(0) ||
      v2.dim(1) != 2 * v3.dim(1)) {
    throw DimensionError("fuse_multiscale: F_v2 " + to_string(v2.shape()) + " must be twice F_v3 " +
                         to_string(v3.shape()) + " spatially");
  }
  if (m4.dim(0) != v3.dim(0) || m4.dim(1) != v3.dim(1)) {
    throw DimensionError("fuse_multiscale: F_m4 " + to_string(m4.shape()) + " does not match F_v3 " +
                         to_string(v3.shape()));
  }
  const std::array<Var<T>, 2> m3_parts = {ops::relu(m4_(tape, m4)), ops::relu(v3_(tape, v3))};
  Var<T> m3 = ops::concat_last<T>(m3_parts);
  Var<T> v2_pooled = ops::avgpool2x(v2);
  const std::array<Var<T>, 2> m2_parts = {ops::relu(m3_(tape, m3)), ops::relu(v2_(tape, v2_pooled))};
  Var<T> m2 = ops::concat_last<T>(m2_parts);
  const std::array<Var<T>, 3> all = {m2, m3, m4};
  return aggregate_(tape, ops::concat_last<T>(all));
}

template <typename T>
std::pair<Var<T>, Var<T>> FusionNeck<T>::build_fvt(Tape<T>& tape, Var<T> fused) const {
  const std::size_t h = fused.dim(0), w = fused.dim(1);
  const std::array<Var<T>, 2> parts = {fused, tape.constant(coord_features<T>(h, w))};
  Var<T> integrated = integrate_(tape, ops::concat_last<T>(parts));
  Var<T> tokens = ops::reshape(integrated, {h * w, integrated.dim(2)});
  return {integrated, tokens};
}

template <typename T>
FusedFeatures<T> FusionNeck<T>::forward(Tape<T>& tape, const ImageFeatures<T>& image,
                                        std::optional<Var<T>> text_global) const {
  FusedFeatures<T> out;
  out.stage4 = fuse_stage4(tape, image.v4, text_global);
  out.fused = fuse_multiscale(tape, out.stage4, image.v3, image.v2);
  std::tie(out.integrated, out.tokens) = build_fvt(tape, out.fused);
  return out;
}

template Tensor<float> coord_features<float>(std::size_t, std::size_t);
template Tensor<double> coord_features<double>(std::size_t, std::size_t);
template class FusionNeck<float>;
template class FusionNeck<double>;

}  // namespace eavl
