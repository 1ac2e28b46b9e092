// SPDX-License-Identifier: Apache-2.0
#include "eavl/checkpoint.hpp"

#include <cstring>
#include <fstream>

#include "eavl/errors.hpp"

namespace eavl {

namespace {

constexpr char kMagic[4] = {'E', 'A', 'V', 'C'};
constexpr char kEnd[4] = {'E', 'N', 'D', '!'};

void read_tag(std::istream& in, const char (&tag)[4], const std::string& what) {
  char buf[4];
  in.read(buf, 4);
  if (in.gcount() != 4) throw FormatError("checkpoint truncated while reading " + what);
  if (std::memcmp(buf, tag, 4) != 0) throw FormatError("checkpoint: bad " + what);
}

std::uint32_t read_header(std::istream& in, const std::filesystem::path& path) {
  char buf[4];
  in.read(buf, 4);
  if (in.gcount() != 4) throw FormatError(path.string() + ": truncated checkpoint header");
  if (std::memcmp(buf, kMagic, 4) != 0) throw FormatError(path.string() + ": not a checkpoint (bad magic)");
  const std::uint32_t version = io::read_u32(in);
  if (version != kCheckpointVersion) {
    throw FormatError(path.string() + ": checkpoint format version " + std::to_string(version) +
                      " is not supported (this build reads version " + std::to_string(kCheckpointVersion) + ")");
  }
  return io::read_u32(in);
}

}  // namespace

template <typename T>
EavlModel<T> Checkpoint<T>::restore_model() const {
  ModelConfig mc = config.model;
  mc.init_seed = config.seed;
  EavlModel<T> model(mc);
  ParameterStore<T>& store = model.parameters();
  if (params.size() != store.size()) throw FormatError("checkpoint parameter count does not match the model");
  for (std::size_t i = 0; i < store.size(); ++i) {
    if (params[i].name != store[i].name || params[i].value.shape() != store[i].value.shape()) {
      throw FormatError("checkpoint parameter " + params[i].name + " does not match model parameter " + store[i].name);
    }
    store[i].value = params[i].value;
  }
  return model;
}

template <typename T>
void save_checkpoint(const std::filesystem::path& path, const Checkpoint<T>& ck) {
  if (ck.adam_m.size() != ck.params.size() || ck.adam_v.size() != ck.params.size()) {
    throw FormatError("checkpoint optimizer state does not match its parameters");
  }
  const std::filesystem::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw FormatError("cannot write " + tmp.string());
    out.write(kMagic, 4);
    io::write_u32(out, kCheckpointVersion);
    io::write_u32(out, static_cast<std::uint32_t>(io::precision_of<T>()));
    io::write_string(out, ck.config.to_file().serialize());
    io::write_u64(out, ck.step);
    io::write_string(out, ck.rng_state);
    io::write_u64(out, ck.order.size());
    for (std::size_t i : ck.order) io::write_u64(out, i);
    io::write_u64(out, ck.cursor);
    io::write_u64(out, ck.adam_steps);
    io::write_u64(out, ck.params.size());
    for (std::size_t i = 0; i < ck.params.size(); ++i) {
      io::write_string(out, ck.params[i].name);
      io::write_tensor(out, ck.params[i].value);
      io::write_tensor(out, ck.adam_m[i]);
      io::write_tensor(out, ck.adam_v[i]);
    }
    out.write(kEnd, 4);
    if (!out) throw FormatError("write failed for " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

io::Precision checkpoint_precision(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open checkpoint " + path.string());
  const std::uint32_t p = read_header(in, path);
  if (p != static_cast<std::uint32_t>(io::Precision::f32) && p != static_cast<std::uint32_t>(io::Precision::f64)) {
    throw FormatError(path.string() + ": unknown precision tag " + std::to_string(p));
  }
  return static_cast<io::Precision>(p);
}

template <typename T>
Checkpoint<T> load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open checkpoint " + path.string());
  const std::uint32_t p = read_header(in, path);
  if (p != static_cast<std::uint32_t>(io::precision_of<T>())) {
    const std::string stored = p == 4 ? "f32" : p == 8 ? "f64" : "unknown (" + std::to_string(p) + ")";
    throw FormatError(path.string() + ": checkpoint holds " + stored + " parameters but " +
                      io::to_string(io::precision_of<T>()) + " was requested");
  }
  Checkpoint<T> ck;
  try {
    ck.config = TrainConfig::from_file(KeyValueFile::parse(io::read_string(in), path.string() + " (config)"));
    ck.step = io::read_u64(in);
    ck.rng_state = io::read_string(in);
    const std::uint64_t n = io::read_u64(in);
    if (n > ck.config.train_data.count && ck.config.train_dir.empty()) throw FormatError("data order longer than the split");
    ck.order.resize(n);
    for (auto& i : ck.order) i = io::read_u64(in);
    ck.cursor = io::read_u64(in);
    ck.adam_steps = io::read_u64(in);
    const std::uint64_t count = io::read_u64(in);
    if (count > (1u << 20)) throw FormatError("implausible parameter count " + std::to_string(count));
    for (std::uint64_t i = 0; i < count; ++i) {
      NamedTensor<T> nt;
      nt.name = io::read_string(in);
      nt.value = io::read_tensor<T>(in);
      ck.params.push_back(std::move(nt));
      ck.adam_m.push_back(io::read_tensor<T>(in));
      ck.adam_v.push_back(io::read_tensor<T>(in));
    }
    read_tag(in, kEnd, "end marker");
  } catch (const FormatError& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
  return ck;
}

template struct Checkpoint<float>;
template struct Checkpoint<double>;
template void save_checkpoint<float>(const std::filesystem::path&, const Checkpoint<float>&);
template void save_checkpoint<double>(const std::filesystem::path&, const Checkpoint<double>&);
template Checkpoint<float> load_checkpoint<float>(const std::filesystem::path&);
template Checkpoint<double> load_checkpoint<double>(const std::filesystem::path&);

}  // namespace eavl
