// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "eavl/config.hpp"
#include "eavl/tensor.hpp"

namespace eavl {

enum class ShapeKind { circle, square, triangle };
enum class Side { left, right, top, bottom };

inline constexpr std::size_t kColorCount = 6;
extern const char* const kColorNames[kColorCount];
extern const std::uint8_t kColorRgb[kColorCount][3];
inline constexpr std::uint8_t kBackgroundLevel = 128;

std::string to_string(ShapeKind k);
std::string to_string(Side s);

/// One flat-filled shape. The shape lives in the square of side `size`
/// whose top-left pixel corner is (x, y); circles and triangles are inscribed.
/// Triangles point up: apex at the top edge centre, base on the bottom edge.
struct ShapeSpec {
  ShapeKind kind = ShapeKind::square;
  std::size_t color = 0;
  int x = 0;
  int y = 0;
  int size = 1;

  double center_x() const { return x + size / 2.0; }
  double center_y() const { return y + size / 2.0; }
  /// Whether the pixel whose centre is (px + 0.5, py + 0.5) is covered.
  bool covers(int px, int py) const;
  double analytic_area() const;
};

struct SceneDescriptor {
  std::vector<ShapeSpec> shapes;
  std::size_t target = 0;
};

struct GrammarConfig {
  std::size_t image_height = 64;
  std::size_t image_width = 64;
  std::size_t min_shapes = 2;
  std::size_t max_shapes = 5;
  int min_size = 10;
  int max_size = 20;
  /// Relative template weights: "<color> <shape>", "<color> <shape> on the
  /// <side>", "<shape> <side> of <color> <shape>".
  double weight_plain = 1.0;
  double weight_side = 1.0;
  double weight_relation = 1.0;

  void validate() const;
  static GrammarConfig for_image(std::size_t height, std::size_t width);
};

void read_grammar_config(const KeyValueFile& file, GrammarConfig& grammar);
void write_grammar_config(const GrammarConfig& grammar, KeyValueFile& file);

struct Sample {
  std::uint64_t seed = 0;
  Tensor<float> image;    // [H x W x 3] in [0, 1]
  std::string expression;
  Tensor<float> gt_mask;  // [H x W] of 0 / 1
  SceneDescriptor scene;
};

/// Draws a scene and a uniquely resolving expression from `seed`.
/// Throws GenerationError after 100 failed resampling attempts.
Sample generate_scene(std::uint64_t seed, const GrammarConfig& grammar);

/// Shapes selected by `expression` in `scene`. An expression is valid when the
/// result holds exactly one index.
std::vector<std::size_t> resolve_expression(const SceneDescriptor& scene, const std::string& expression);

Tensor<float> render_image(const SceneDescriptor& scene, std::size_t height, std::size_t width);
Tensor<float> rasterize(const ShapeSpec& shape, std::size_t height, std::size_t width);

/// Seed of sample `index` in a split whose base seed is `base`.
std::uint64_t sample_seed(std::uint64_t base, std::size_t index);

struct DatasetSpec {
  std::string name = "train";
  std::uint64_t seed = 1;
  std::size_t count = 64;
  GrammarConfig grammar;
};

std::vector<Sample> generate_dataset(const DatasetSpec& spec);

/// Writes images/NNNNNN.ppm, masks/NNNNNN.pgm, samples.jsonl and MANIFEST.
void write_dataset(const std::filesystem::path& dir, const DatasetSpec& spec, const std::vector<Sample>& samples);
std::vector<Sample> read_dataset(const std::filesystem::path& dir);
DatasetSpec read_manifest(const std::filesystem::path& path);

void write_ppm(const std::filesystem::path& path, const Tensor<float>& image);
Tensor<float> read_ppm(const std::filesystem::path& path);
void write_pgm(const std::filesystem::path& path, const Tensor<float>& mask);
Tensor<float> read_pgm(const std::filesystem::path& path);

}  // namespace eavl
