// SPDX-License-Identifier: Apache-2.0
#include "eavl/config.hpp"

#include <charconv>
#include <fstream>
#include <sstream>

#include "eavl/errors.hpp"

namespace eavl {

std::string to_string(Mode m) {
  switch (m) {
    case Mode::full: return "full";
    case Mode::fixed_kernel: return "fixed_kernel";
    case Mode::no_estimator: return "no_estimator";
    case Mode::no_fvg: return "no_fvg";
  }
  return "?";
}

Mode parse_mode(const std::string& s) {
  for (Mode m : {Mode::full, Mode::fixed_kernel, Mode::no_estimator, Mode::no_fvg}) {
    if (to_string(m) == s) return m;
  }
  throw ConfigError("unknown mode '" + s + "' (expected full, fixed_kernel, no_estimator or no_fvg)");
}

std::string to_string(KernelActivation a) { return a == KernelActivation::relu ? "relu" : "identity"; }

KernelActivation parse_kernel_activation(const std::string& s) {
  if (s == "relu") return KernelActivation::relu;
  if (s == "identity") return KernelActivation::identity;
  throw ConfigError("unknown kernel activation '" + s + "' (expected relu or identity)");
}

void ModelConfig::validate() const {
  auto fail = [](const std::string& msg) { throw ConfigError("model config: " + msg); };
  if (width < 2 || width % 2 != 0) fail("width must be even and at least 2");
  if (text_width == 0) fail("text_width must be positive");
  if (num_queries == 0) fail("num_queries must be positive");
  if (max_tokens < 3) fail("max_tokens must be at least 3");
  if (heads == 0 || width % heads != 0) fail("heads must divide width");
  if (backbone[3] % heads != 0) fail("heads must divide the last backbone width");
  if (decoder_layers == 0) fail("decoder_layers must be positive");
  if (ffn_multiplier == 0) fail("ffn_multiplier must be positive");
  for (std::size_t c : backbone) {
    if (c == 0) fail("backbone widths must be positive");
  }
  if (image_height == 0 || image_width == 0 || image_height % 16 != 0 || image_width % 16 != 0) {
    fail("image sides must be positive multiples of 16");
  }
}

ModelConfig ModelConfig::desk() { return ModelConfig{}; }

ModelConfig ModelConfig::tiny() {
  ModelConfig c;
  c.width = 8;
  c.text_width = 8;
  c.num_queries = 2;
  c.max_tokens = 8;
  c.heads = 2;
  c.text_layers = 1;
  c.decoder_layers = 1;
  c.ffn_multiplier = 2;
  c.backbone = {4, 4, 8, 8};
  c.image_height = 16;
  c.image_width = 16;
  return c;
}

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

template <typename N>
N parse_number(const std::string& key, const std::string& text) {
  N out{};
  const char* end = text.data() + text.size();
  auto [ptr, ec] = std::from_chars(text.data(), end, out);
  if (ec != std::errc() || ptr != end) throw ConfigError("config key '" + key + "': cannot parse '" + text + "'");
  return out;
}

}  // namespace

KeyValueFile KeyValueFile::parse(const std::string& text, const std::string& origin) {
  KeyValueFile f;
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError(origin + ":" + std::to_string(lineno) + ": expected key = value");
    }
    const std::string key = trim(line.substr(0, eq));
    if (key.empty()) throw ConfigError(origin + ":" + std::to_string(lineno) + ": empty key");
    if (f.values_.count(key)) throw ConfigError(origin + ":" + std::to_string(lineno) + ": duplicate key " + key);
    f.values_[key] = trim(line.substr(eq + 1));
  }
  return f;
}

KeyValueFile KeyValueFile::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse(ss.str(), path.string());
}

std::string KeyValueFile::serialize() const {
  std::string out;
  for (const auto& [k, v] : values_) out += k + " = " + v + "\n";
  return out;
}

void KeyValueFile::save(const std::filesystem::path& path) const {
  std::ofstream out(path);
  if (!out) throw ConfigError("cannot write " + path.string());
  out << serialize();
}

std::string KeyValueFile::get_string(const std::string& key, const std::string& fallback) const {
  auto it = values_.find(key);
  if (it == values_.end()) return fallback;
  read_[key] = true;
  return it->second;
}

std::size_t KeyValueFile::get_size(const std::string& key, std::size_t fallback) const {
  auto it = values_.find(key);
  if (it == values_.end()) return fallback;
  read_[key] = true;
  return parse_number<std::size_t>(key, it->second);
}

std::uint64_t KeyValueFile::get_u64(const std::string& key, std::uint64_t fallback) const {
  auto it = values_.find(key);
  if (it == values_.end()) return fallback;
  read_[key] = true;
  return parse_number<std::uint64_t>(key, it->second);
}

double KeyValueFile::get_double(const std::string& key, double fallback) const {
  auto it = values_.find(key);
  if (it == values_.end()) return fallback;
  read_[key] = true;
  return parse_number<double>(key, it->second);
}

std::vector<std::string> KeyValueFile::unused_keys() const {
  std::vector<std::string> out;
  for (const auto& [k, v] : values_) {
    if (!read_.count(k)) out.push_back(k);
  }
  return out;
}

ModelConfig read_model_config(const KeyValueFile& f, ModelConfig c) {
  if (f.has("model.preset")) {
    const std::string preset = f.get_string("model.preset", "desk");
    if (preset == "desk") c = ModelConfig::desk();
    else if (preset == "tiny") c = ModelConfig::tiny();
    else throw ConfigError("unknown model.preset '" + preset + "' (expected desk or tiny)");
  }
  c.width = f.get_size("model.width", c.width);
  c.text_width = f.get_size("model.text_width", c.text_width);
  c.num_queries = f.get_size("model.num_queries", c.num_queries);
  c.max_tokens = f.get_size("model.max_tokens", c.max_tokens);
  c.heads = f.get_size("model.heads", c.heads);
  c.text_layers = f.get_size("model.text_layers", c.text_layers);
  c.decoder_layers = f.get_size("model.decoder_layers", c.decoder_layers);
  c.ffn_multiplier = f.get_size("model.ffn_multiplier", c.ffn_multiplier);
  for (std::size_t i = 0; i < 4; ++i) {
    c.backbone[i] = f.get_size("model.backbone" + std::to_string(i + 1), c.backbone[i]);
  }
  c.image_height = f.get_size("model.image_height", c.image_height);
  c.image_width = f.get_size("model.image_width", c.image_width);
  c.vocab_size = f.get_size("model.vocab_size", c.vocab_size);
  c.mode = parse_mode(f.get_string("model.mode", to_string(c.mode)));
  c.kernel_activation = parse_kernel_activation(f.get_string("model.kernel_activation", to_string(c.kernel_activation)));
  c.init_seed = f.get_u64("model.init_seed", c.init_seed);
  c.validate();
  return c;
}

void write_model_config(const ModelConfig& c, KeyValueFile& f) {
  f.set("model.width", std::to_string(c.width));
  f.set("model.text_width", std::to_string(c.text_width));
  f.set("model.num_queries", std::to_string(c.num_queries));
  f.set("model.max_tokens", std::to_string(c.max_tokens));
  f.set("model.heads", std::to_string(c.heads));
  f.set("model.text_layers", std::to_string(c.text_layers));
  f.set("model.decoder_layers", std::to_string(c.decoder_layers));
  f.set("model.ffn_multiplier", std::to_string(c.ffn_multiplier));
  for (std::size_t i = 0; i < 4; ++i) f.set("model.backbone" + std::to_string(i + 1), std::to_string(c.backbone[i]));
  f.set("model.image_height", std::to_string(c.image_height));
  f.set("model.image_width", std::to_string(c.image_width));
  f.set("model.vocab_size", std::to_string(c.vocab_size));
  f.set("model.mode", to_string(c.mode));
  f.set("model.kernel_activation", to_string(c.kernel_activation));
  f.set("model.init_seed", std::to_string(c.init_seed));
}

}  // namespace eavl
