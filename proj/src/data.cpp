// SPDX-License-Identifier: Apache-2.0
#include "eavl/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numbers>
#include <random>
#include <sstream>

#include "json.hpp"

#include "eavl/errors.hpp"

namespace eavl {

const char* const kColorNames[kColorCount] = {"red", "green", "blue", "yellow", "purple", "orange"};
const std::uint8_t kColorRgb[kColorCount][3] = {
    {220, 30, 30}, {30, 180, 50}, {30, 70, 220}, {235, 220, 40}, {150, 50, 190}, {245, 140, 20},
};

namespace {

constexpr const char* kKindNames[3] = {"circle", "square", "triangle"};
constexpr const char* kSideNames[4] = {"left", "right", "top", "bottom"};
constexpr int kMaxAttempts = 100;
constexpr int kPlacementTries = 50;

std::size_t draw_index(std::mt19937_64& rng, std::size_t n) { return static_cast<std::size_t>(rng() % n); }

int draw_int(std::mt19937_64& rng, int lo, int hi) {
  return lo + static_cast<int>(rng() % static_cast<std::uint64_t>(hi - lo + 1));
}

double draw_unit(std::mt19937_64& rng) { return static_cast<double>(rng() >> 11) * 0x1.0p-53; }

std::optional<std::size_t> find_name(const char* const* names, std::size_t n, const std::string& word) {
  for (std::size_t i = 0; i < n; ++i) {
    if (word == names[i]) return i;
  }
  return std::nullopt;
}

ShapeKind parse_kind(const std::string& s) {
  auto k = find_name(kKindNames, 3, s);
  if (!k) throw FormatError("unknown shape kind '" + s + "'");
  return static_cast<ShapeKind>(*k);
}

std::size_t parse_color(const std::string& s) {
  auto c = find_name(kColorNames, kColorCount, s);
  if (!c) throw FormatError("unknown color '" + s + "'");
  return *c;
}

bool disjoint(const ShapeSpec& a, const ShapeSpec& b) {
  constexpr int gap = 1;
  return a.x + a.size + gap <= b.x || b.x + b.size + gap <= a.x || a.y + a.size + gap <= b.y ||
         b.y + b.size + gap <= a.y;
}

/// Signed coordinate along `side`: larger means further towards that side.
double toward(const ShapeSpec& s, Side side) {
  switch (side) {
    case Side::left: return -s.center_x();
    case Side::right: return s.center_x();
    case Side::top: return -s.center_y();
    case Side::bottom: return s.center_y();
  }
  return 0.0;
}

std::vector<std::size_t> matching(const SceneDescriptor& scene, std::size_t color, ShapeKind kind) {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < scene.shapes.size(); ++i) {
    if (scene.shapes[i].color == color && scene.shapes[i].kind == kind) out.push_back(i);
  }
  return out;
}

std::vector<std::string> split_words(const std::string& s) {
  std::istringstream in(s);
  std::vector<std::string> out;
  for (std::string w; in >> w;) out.push_back(w);
  return out;
}

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

}  // namespace

std::string to_string(ShapeKind k) { return kKindNames[static_cast<int>(k)]; }
std::string to_string(Side s) { return kSideNames[static_cast<int>(s)]; }

bool ShapeSpec::covers(int px, int py) const {
  const double cx = px + 0.5, cy = py + 0.5;
  const double s = size;
  switch (kind) {
    case ShapeKind::square:
      return px >= x && px < x + size && py >= y && py < y + size;
    case ShapeKind::circle: {
      const double dx = cx - center_x(), dy = cy - center_y(), r = s / 2.0;
      return dx * dx + dy * dy <= r * r;
    }
    case ShapeKind::triangle: {
      // Apex (x + s/2, y), base from (x, y + s) to (x + s, y + s).
      if (cy > y + s) return false;
      const double half_width = (cy - y) / 2.0;
      return cy >= y && std::abs(cx - center_x()) <= half_width;
    }
  }
  return false;
}

double ShapeSpec::analytic_area() const {
  const double s = size;
  switch (kind) {
    case ShapeKind::square: return s * s;
    case ShapeKind::circle: return std::numbers::pi * s * s / 4.0;
    case ShapeKind::triangle: return s * s / 2.0;
  }
  return 0.0;
}

void GrammarConfig::validate() const {
  if (min_shapes < 2 || max_shapes < min_shapes) throw ConfigError("grammar: need 2 <= min_shapes <= max_shapes");
  if (min_size < 2 || max_size < min_size) throw ConfigError("grammar: need 2 <= min_size <= max_size");
  if (static_cast<std::size_t>(max_size) >= std::min(image_height, image_width)) {
    throw ConfigError("grammar: max_size must be smaller than the image");
  }
  if (weight_plain < 0 || weight_side < 0 || weight_relation < 0 ||
      weight_plain + weight_side + weight_relation <= 0) {
    throw ConfigError("grammar: template weights must be non-negative with a positive sum");
  }
}

GrammarConfig GrammarConfig::for_image(std::size_t height, std::size_t width) {
  GrammarConfig g;
  g.image_height = height;
  g.image_width = width;
  const int side = static_cast<int>(std::min(height, width));
  g.min_size = std::max(3, side * 5 / 32);
  g.max_size = std::max(g.min_size, side * 10 / 32);
  return g;
}

void read_grammar_config(const KeyValueFile& f, GrammarConfig& g) {
  g.image_height = f.get_size("grammar.image_height", g.image_height);
  g.image_width = f.get_size("grammar.image_width", g.image_width);
  g.min_shapes = f.get_size("grammar.min_shapes", g.min_shapes);
  g.max_shapes = f.get_size("grammar.max_shapes", g.max_shapes);
  g.min_size = static_cast<int>(f.get_size("grammar.min_size", static_cast<std::size_t>(g.min_size)));
  g.max_size = static_cast<int>(f.get_size("grammar.max_size", static_cast<std::size_t>(g.max_size)));
  g.weight_plain = f.get_double("grammar.weight_plain", g.weight_plain);
  g.weight_side = f.get_double("grammar.weight_side", g.weight_side);
  g.weight_relation = f.get_double("grammar.weight_relation", g.weight_relation);
  g.validate();
}

void write_grammar_config(const GrammarConfig& g, KeyValueFile& f) {
  auto num = [](double v) {
    std::ostringstream ss;
    ss.precision(17);
    ss << v;
    return ss.str();
  };
  f.set("grammar.image_height", std::to_string(g.image_height));
  f.set("grammar.image_width", std::to_string(g.image_width));
  f.set("grammar.min_shapes", std::to_string(g.min_shapes));
  f.set("grammar.max_shapes", std::to_string(g.max_shapes));
  f.set("grammar.min_size", std::to_string(g.min_size));
  f.set("grammar.max_size", std::to_string(g.max_size));
  f.set("grammar.weight_plain", num(g.weight_plain));
  f.set("grammar.weight_side", num(g.weight_side));
  f.set("grammar.weight_relation", num(g.weight_relation));
}

std::vector<std::size_t> resolve_expression(const SceneDescriptor& scene, const std::string& expression) {
  const std::vector<std::string> w = split_words(expression);
  auto color = [&](std::size_t i) { return find_name(kColorNames, kColorCount, w[i]); };
  auto kind = [&](std::size_t i) -> std::optional<ShapeKind> {
    auto k = find_name(kKindNames, 3, w[i]);
    if (!k) return std::nullopt;
    return static_cast<ShapeKind>(*k);
  };
  auto side = [&](std::size_t i) -> std::optional<Side> {
    auto s = find_name(kSideNames, 4, w[i]);
    if (!s) return std::nullopt;
    return static_cast<Side>(*s);
  };

  if (w.size() == 2 && color(0) && kind(1)) return matching(scene, *color(0), *kind(1));

  if (w.size() == 5 && color(0) && kind(1) && w[2] == "on" && w[3] == "the" && side(4)) {
    const std::vector<std::size_t> cand = matching(scene, *color(0), *kind(1));
    if (cand.empty()) return {};
    double best = -1e300;
    for (std::size_t i : cand) best = std::max(best, toward(scene.shapes[i], *side(4)));
    std::vector<std::size_t> out;
    for (std::size_t i : cand) {
      if (toward(scene.shapes[i], *side(4)) == best) out.push_back(i);
    }
    return out;
  }

  if (w.size() == 5 && kind(0) && side(1) && w[2] == "of" && color(3) && kind(4)) {
    const std::vector<std::size_t> anchors = matching(scene, *color(3), *kind(4));
    if (anchors.size() != 1) return {};
    const ShapeSpec& anchor = scene.shapes[anchors[0]];
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < scene.shapes.size(); ++i) {
      const ShapeSpec& s = scene.shapes[i];
      if (i != anchors[0] && s.kind == *kind(0) && toward(s, *side(1)) > toward(anchor, *side(1))) out.push_back(i);
    }
    return out;
  }
  return {};
}

Tensor<float> rasterize(const ShapeSpec& shape, std::size_t height, std::size_t width) {
  Tensor<float> mask({height, width}, 0.0f);
  const int y0 = std::max(0, shape.y), y1 = std::min<int>(static_cast<int>(height), shape.y + shape.size);
  const int x0 = std::max(0, shape.x), x1 = std::min<int>(static_cast<int>(width), shape.x + shape.size);
  for (int py = y0; py < y1; ++py) {
    for (int px = x0; px < x1; ++px) {
      if (shape.covers(px, py)) mask.at(py, px) = 1.0f;
    }
  }
  return mask;
}

Tensor<float> render_image(const SceneDescriptor& scene, std::size_t height, std::size_t width) {
  Tensor<float> image({height, width, 3}, kBackgroundLevel / 255.0f);
  for (const ShapeSpec& s : scene.shapes) {
    const Tensor<float> m = rasterize(s, height, width);
    for (std::size_t i = 0; i < height * width; ++i) {
      if (m[i] == 0.0f) continue;
      for (std::size_t c = 0; c < 3; ++c) image[i * 3 + c] = kColorRgb[s.color][c] / 255.0f;
    }
  }
  return image;
}

namespace {

std::optional<SceneDescriptor> place_shapes(std::mt19937_64& rng, const GrammarConfig& g) {
  SceneDescriptor scene;
  const std::size_t n = g.min_shapes + draw_index(rng, g.max_shapes - g.min_shapes + 1);
  for (std::size_t k = 0; k < n; ++k) {
    ShapeSpec s;
    s.kind = static_cast<ShapeKind>(draw_index(rng, 3));
    s.color = draw_index(rng, kColorCount);
    s.size = draw_int(rng, g.min_size, g.max_size);
    bool placed = false;
    for (int t = 0; t < kPlacementTries && !placed; ++t) {
      s.x = draw_int(rng, 0, static_cast<int>(g.image_width) - s.size);
      s.y = draw_int(rng, 0, static_cast<int>(g.image_height) - s.size);
      placed = std::all_of(scene.shapes.begin(), scene.shapes.end(),
                           [&](const ShapeSpec& o) { return disjoint(s, o); });
    }
    if (!placed) return std::nullopt;
    scene.shapes.push_back(s);
  }
  return scene;
}

std::optional<std::string> describe(std::mt19937_64& rng, const GrammarConfig& g, const SceneDescriptor& scene) {
  const ShapeSpec& t = scene.shapes[scene.target];
  const std::string color = kColorNames[t.color], kind = to_string(t.kind);
  const double total = g.weight_plain + g.weight_side + g.weight_relation;
  const double u = draw_unit(rng) * total;
  if (u < g.weight_plain) return color + " " + kind;
  if (u < g.weight_plain + g.weight_side) {
    return color + " " + kind + " on the " + to_string(static_cast<Side>(draw_index(rng, 4)));
  }
  std::size_t a = draw_index(rng, scene.shapes.size() - 1);
  if (a >= scene.target) ++a;
  const ShapeSpec& anchor = scene.shapes[a];
  std::vector<Side> sides;
  for (Side s : {Side::left, Side::right, Side::top, Side::bottom}) {
    if (toward(t, s) > toward(anchor, s)) sides.push_back(s);
  }
  if (sides.empty()) return std::nullopt;
  const Side side = sides[draw_index(rng, sides.size())];
  return kind + " " + to_string(side) + " of " + kColorNames[anchor.color] + " " + to_string(anchor.kind);
}

}  // namespace

Sample generate_scene(std::uint64_t seed, const GrammarConfig& grammar) {
  grammar.validate();
  std::mt19937_64 rng(seed);
  for (int attempt = 0; attempt < kMaxAttempts; ++attempt) {
    std::optional<SceneDescriptor> scene = place_shapes(rng, grammar);
    if (!scene) continue;
    scene->target = draw_index(rng, scene->shapes.size());
    std::optional<std::string> expr = describe(rng, grammar, *scene);
    if (!expr) continue;
    const std::vector<std::size_t> hit = resolve_expression(*scene, *expr);
    if (hit.size() != 1 || hit[0] != scene->target) continue;

    Sample s;
    s.seed = seed;
    s.scene = std::move(*scene);
    s.expression = std::move(*expr);
    s.image = render_image(s.scene, grammar.image_height, grammar.image_width);
    s.gt_mask = rasterize(s.scene.shapes[s.scene.target], grammar.image_height, grammar.image_width);
    return s;
  }
  throw GenerationError("no uniquely resolving scene for seed " + std::to_string(seed) + " after " +
                        std::to_string(kMaxAttempts) + " attempts");
}

std::uint64_t sample_seed(std::uint64_t base, std::size_t index) {
  return splitmix64(splitmix64(base) ^ static_cast<std::uint64_t>(index));
}

std::vector<Sample> generate_dataset(const DatasetSpec& spec) {
  std::vector<Sample> out;
  out.reserve(spec.count);
  for (std::size_t i = 0; i < spec.count; ++i) out.push_back(generate_scene(sample_seed(spec.seed, i), spec.grammar));
  return out;
}

// ---------------------------------------------------------------------------
// Netpbm

namespace {

void skip_ws_and_comments(std::istream& in) {
  for (;;) {
    int c = in.peek();
    if (c == '#') {
      std::string line;
      std::getline(in, line);
    } else if (std::isspace(c)) {
      in.get();
    } else {
      return;
    }
  }
}

std::vector<std::uint8_t> read_netpbm(const std::filesystem::path& path, const char* magic, std::size_t channels,
                                      std::size_t& height, std::size_t& width) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path.string());
  std::string m;
  in >> m;
  if (m != magic) throw FormatError(path.string() + ": expected " + magic + " header");
  std::size_t maxval = 0;
  skip_ws_and_comments(in);
  in >> width;
  skip_ws_and_comments(in);
  in >> height;
  skip_ws_and_comments(in);
  in >> maxval;
  if (!in || maxval != 255 || width == 0 || height == 0) throw FormatError(path.string() + ": unsupported header");
  in.get();
  std::vector<std::uint8_t> px(height * width * channels);
  in.read(reinterpret_cast<char*>(px.data()), static_cast<std::streamsize>(px.size()));
  if (in.gcount() != static_cast<std::streamsize>(px.size())) throw FormatError(path.string() + ": truncated");
  return px;
}

std::uint8_t to_byte(float v) { return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0f, 1.0f) * 255.0f)); }

}  // namespace

void write_ppm(const std::filesystem::path& path, const Tensor<float>& image) {
  if (image.rank() != 3 || image.dim(2) != 3) throw DimensionError("write_ppm: expected HxWx3, got " + to_string(image.shape()));
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError("cannot write " + path.string());
  out << "P6\n" << image.dim(1) << " " << image.dim(0) << "\n255\n";
  for (float v : image.data()) out.put(static_cast<char>(to_byte(v)));
}

Tensor<float> read_ppm(const std::filesystem::path& path) {
  std::size_t h = 0, w = 0;
  const auto px = read_netpbm(path, "P6", 3, h, w);
  Tensor<float> image({h, w, 3});
  for (std::size_t i = 0; i < px.size(); ++i) image[i] = px[i] / 255.0f;
  return image;
}

void write_pgm(const std::filesystem::path& path, const Tensor<float>& mask) {
  if (mask.rank() != 2) throw DimensionError("write_pgm: expected HxW, got " + to_string(mask.shape()));
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError("cannot write " + path.string());
  out << "P5\n" << mask.dim(1) << " " << mask.dim(0) << "\n255\n";
  for (float v : mask.data()) out.put(static_cast<char>(to_byte(v)));
}

Tensor<float> read_pgm(const std::filesystem::path& path) {
  std::size_t h = 0, w = 0;
  const auto px = read_netpbm(path, "P5", 1, h, w);
  Tensor<float> mask({h, w});
  for (std::size_t i = 0; i < px.size(); ++i) mask[i] = px[i] / 255.0f;
  return mask;
}

// ---------------------------------------------------------------------------
// Dataset directories

namespace {

std::string sample_stem(std::size_t i) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "%06zu", i);
  return buf;
}

nlohmann::json scene_to_json(const SceneDescriptor& scene) {
  nlohmann::json shapes = nlohmann::json::array();
  for (const ShapeSpec& s : scene.shapes) {
    shapes.push_back({{"kind", to_string(s.kind)},
                      {"color", kColorNames[s.color]},
                      {"x", s.x},
                      {"y", s.y},
                      {"size", s.size},
                      {"center", {s.center_x(), s.center_y()}}});
  }
  return shapes;
}

SceneDescriptor scene_from_json(const nlohmann::json& shapes, std::size_t target) {
  SceneDescriptor scene;
  for (const auto& j : shapes) {
    ShapeSpec s;
    s.kind = parse_kind(j.at("kind").get<std::string>());
    s.color = parse_color(j.at("color").get<std::string>());
    s.x = j.at("x").get<int>();
    s.y = j.at("y").get<int>();
    s.size = j.at("size").get<int>();
    scene.shapes.push_back(s);
  }
  if (target >= scene.shapes.size()) throw FormatError("scene target out of range");
  scene.target = target;
  return scene;
}

}  // namespace

void write_dataset(const std::filesystem::path& dir, const DatasetSpec& spec, const std::vector<Sample>& samples) {
  namespace fs = std::filesystem;
  fs::create_directories(dir / "images");
  fs::create_directories(dir / "masks");
  std::ofstream lines(dir / "samples.jsonl");
  if (!lines) throw FormatError("cannot write " + (dir / "samples.jsonl").string());
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const Sample& s = samples[i];
    write_ppm(dir / "images" / (sample_stem(i) + ".ppm"), s.image);
    write_pgm(dir / "masks" / (sample_stem(i) + ".pgm"), s.gt_mask);
    nlohmann::json j = {{"index", i},
                        {"seed", s.seed},
                        {"expression", s.expression},
                        {"target", s.scene.target},
                        {"shapes", scene_to_json(s.scene)}};
    lines << j.dump() << "\n";
  }
  KeyValueFile manifest;
  manifest.set("format", "eavl-shapes-1");
  manifest.set("split.name", spec.name);
  manifest.set("split.seed", std::to_string(spec.seed));
  manifest.set("split.count", std::to_string(spec.count));
  write_grammar_config(spec.grammar, manifest);
  manifest.save(dir / "MANIFEST");
}

DatasetSpec read_manifest(const std::filesystem::path& path) {
  const KeyValueFile f = KeyValueFile::load(path);
  DatasetSpec spec;
  spec.name = f.get_string("split.name", spec.name);
  spec.seed = f.get_u64("split.seed", spec.seed);
  spec.count = f.get_size("split.count", spec.count);
  if (f.has("split.image_size")) {
    const std::size_t side = f.get_size("split.image_size", 64);
    spec.grammar = GrammarConfig::for_image(side, side);
  }
  read_grammar_config(f, spec.grammar);
  f.get_string("format", "");
  return spec;
}

std::vector<Sample> read_dataset(const std::filesystem::path& dir) {
  const DatasetSpec spec = read_manifest(dir / "MANIFEST");
  std::ifstream lines(dir / "samples.jsonl");
  if (!lines) throw FormatError("cannot open " + (dir / "samples.jsonl").string());
  std::vector<Sample> out;
  std::string line;
  while (std::getline(lines, line)) {
    if (line.empty()) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      throw FormatError("samples.jsonl line " + std::to_string(out.size() + 1) + ": " + e.what());
    }
    const std::size_t i = j.at("index").get<std::size_t>();
    if (i != out.size()) throw FormatError("samples.jsonl: indices out of order at " + std::to_string(i));
    Sample s;
    s.seed = j.at("seed").get<std::uint64_t>();
    s.expression = j.at("expression").get<std::string>();
    s.scene = scene_from_json(j.at("shapes"), j.at("target").get<std::size_t>());
    s.image = read_ppm(dir / "images" / (sample_stem(i) + ".ppm"));
    s.gt_mask = read_pgm(dir / "masks" / (sample_stem(i) + ".pgm"));
    out.push_back(std::move(s));
  }
  if (out.size() != spec.count) {
    throw FormatError("dataset " + dir.string() + " holds " + std::to_string(out.size()) + " samples, MANIFEST says " +
                      std::to_string(spec.count));
  }
  return out;
}

}  // namespace eavl
