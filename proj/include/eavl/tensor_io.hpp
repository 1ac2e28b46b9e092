// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <string>

#include "eavl/tensor.hpp"

// Binary tensor dump, little-endian:
//   "EAVT" | u32 rank | u32 dims[rank] | payload (f32 or f64, row-major)
// The payload width is not tagged; containers record it, standalone files are
// identified by their length.
namespace eavl::io {

enum class Precision : std::uint32_t { f32 = 4, f64 = 8 };

template <typename T>
constexpr Precision precision_of() {
  return sizeof(T) == 4 ? Precision::f32 : Precision::f64;
}

const char* to_string(Precision p);

template <typename T>
void write_tensor(std::ostream& out, const Tensor<T>& t);

/// Reads one tensor whose payload has T's width.
template <typename T>
Tensor<T> read_tensor(std::istream& in);

template <typename T>
void save_tensor(const std::filesystem::path& path, const Tensor<T>& t);

/// Loads a standalone dump; rejects files whose payload width is not T's.
template <typename T>
Tensor<T> load_tensor(const std::filesystem::path& path);

/// Payload width of a standalone dump, inferred from the file length.
Precision detect_precision(const std::filesystem::path& path);

void write_u32(std::ostream& out, std::uint32_t v);
void write_u64(std::ostream& out, std::uint64_t v);
void write_string(std::ostream& out, const std::string& s);
std::uint32_t read_u32(std::istream& in);
std::uint64_t read_u64(std::istream& in);
std::string read_string(std::istream& in);

}  // namespace eavl::io
