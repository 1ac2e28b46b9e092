// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "eavl/model_config.hpp"

namespace eavl {

/// Flat `key = value` text with dotted section names, e.g. `model.width = 64`.
/// `#` starts a comment. Keys are kept sorted so that serialisation is stable.
class KeyValueFile {
 public:
  KeyValueFile() = default;

  static KeyValueFile parse(const std::string& text, const std::string& origin = "<string>");
  static KeyValueFile load(const std::filesystem::path& path);
  std::string serialize() const;
  void save(const std::filesystem::path& path) const;

  bool has(const std::string& key) const { return values_.count(key) != 0; }
  void set(const std::string& key, const std::string& value) { values_[key] = value; }
  const std::map<std::string, std::string>& entries() const { return values_; }

  std::string get_string(const std::string& key, const std::string& fallback) const;
  std::size_t get_size(const std::string& key, std::size_t fallback) const;
  std::uint64_t get_u64(const std::string& key, std::uint64_t fallback) const;
  double get_double(const std::string& key, double fallback) const;

  /// Keys that were never read by a getter; used to flag typos.
  std::vector<std::string> unused_keys() const;

 private:
  std::map<std::string, std::string> values_;
  mutable std::map<std::string, bool> read_;
};

/// Reads `model.*` keys on top of `base`.
ModelConfig read_model_config(const KeyValueFile& file, ModelConfig base = ModelConfig::desk());
void write_model_config(const ModelConfig& config, KeyValueFile& file);

}  // namespace eavl
