// SPDX-License-Identifier: Apache-2.0
#include "eavl/tensor_io.hpp"

#include <array>
#include <bit>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>

namespace eavl::io {
namespace {

static_assert(std::endian::native == std::endian::little, "tensor dumps assume a little-endian host");

constexpr std::array<char, 4> kMagic = {'E', 'A', 'V', 'T'};

void read_exact(std::istream& in, char* dst, std::size_t n, const char* what) {
  in.read(dst, static_cast<std::streamsize>(n));
  if (static_cast<std::size_t>(in.gcount()) != n) {
    throw FormatError(std::string("truncated input while reading ") + what);
  }
}

}  // namespace

const char* to_string(Precision p) { return p == Precision::f32 ? "f32" : "f64"; }

void write_u32(std::ostream& out, std::uint32_t v) { out.write(reinterpret_cast<const char*>(&v), 4); }
void write_u64(std::ostream& out, std::uint64_t v) { out.write(reinterpret_cast<const char*>(&v), 8); }

void write_string(std::ostream& out, const std::string& s) {
  write_u32(out, static_cast<std::uint32_t>(s.size()));
  out.write(s.data(), static_cast<std::streamsize>(s.size()));
}

std::uint32_t read_u32(std::istream& in) {
  std::uint32_t v = 0;
  read_exact(in, reinterpret_cast<char*>(&v), 4, "u32");
  return v;
}

std::uint64_t read_u64(std::istream& in) {
  std::uint64_t v = 0;
  read_exact(in, reinterpret_cast<char*>(&v), 8, "u64");
  return v;
}

std::string read_string(std::istream& in) {
  const std::uint32_t n = read_u32(in);
  if (n > (1u << 28)) throw FormatError("implausible string length " + std::to_string(n));
  std::string s(n, '\0');
  read_exact(in, s.data(), n, "string");
  return s;
}

template <typename T>
void write_tensor(std::ostream& out, const Tensor<T>& t) {
  out.write(kMagic.data(), 4);
  write_u32(out, static_cast<std::uint32_t>(t.rank()));
  for (std::size_t d : t.shape()) write_u32(out, static_cast<std::uint32_t>(d));
  out.write(reinterpret_cast<const char*>(t.ptr()), static_cast<std::streamsize>(t.size() * sizeof(T)));
}

template <typename T>
Tensor<T> read_tensor(std::istream& in) {
  std::array<char, 4> magic{};
  read_exact(in, magic.data(), 4, "tensor magic");
  if (magic != kMagic) throw FormatError("bad tensor magic, expected EAVT");
  const std::uint32_t rank = read_u32(in);
  if (rank == 0 || rank > 8) throw FormatError("implausible tensor rank " + std::to_string(rank));
  Shape shape(rank);
  for (auto& d : shape) {
    d = read_u32(in);
    if (d == 0) throw FormatError("tensor dimension of size 0");
  }
  std::vector<T> data(shape_size(shape));
  read_exact(in, reinterpret_cast<char*>(data.data()), data.size() * sizeof(T), "tensor payload");
  return Tensor<T>(std::move(shape), std::move(data));
}

template <typename T>
void save_tensor(const std::filesystem::path& path, const Tensor<T>& t) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError("cannot open " + path.string() + " for writing");
  write_tensor(out, t);
  if (!out) throw FormatError("write failed for " + path.string());
}

Precision detect_precision(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path.string());
  std::array<char, 4> magic{};
  read_exact(in, magic.data(), 4, "tensor magic");
  if (magic != kMagic) throw FormatError("bad tensor magic in " + path.string());
  const std::uint32_t rank = read_u32(in);
  std::size_t count = 1;
  for (std::uint32_t i = 0; i < rank; ++i) count *= read_u32(in);
  const std::uintmax_t payload = std::filesystem::file_size(path) - 8 - 4ull * rank;
  if (payload == count * 4) return Precision::f32;
  if (payload == count * 8) return Precision::f64;
  throw FormatError("payload length of " + path.string() + " matches neither f32 nor f64");
}

template <typename T>
Tensor<T> load_tensor(const std::filesystem::path& path) {
  const Precision p = detect_precision(path);
  if (p != precision_of<T>()) {
    throw FormatError(path.string() + " holds " + to_string(p) + " data, expected " +
                      to_string(precision_of<T>()));
  }
  std::ifstream in(path, std::ios::binary);
  return read_tensor<T>(in);
}

template void write_tensor<float>(std::ostream&, const Tensor<float>&);
template void write_tensor<double>(std::ostream&, const Tensor<double>&);
template Tensor<float> read_tensor<float>(std::istream&);
template Tensor<double> read_tensor<double>(std::istream&);
template void save_tensor<float>(const std::filesystem::path&, const Tensor<float>&);
template void save_tensor<double>(const std::filesystem::path&, const Tensor<double>&);
template Tensor<float> load_tensor<float>(const std::filesystem::path&);
template Tensor<double> load_tensor<double>(const std::filesystem::path&);

}  // namespace eavl::io
