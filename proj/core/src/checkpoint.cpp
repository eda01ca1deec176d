#include "psep/checkpoint.hpp"

#include <cstring>
#include <fstream>
#include <stdexcept>

namespace psep {

namespace {

// The build targets little-endian hosts; raw writes keep the format exact.
template <typename T>
void write_raw(std::ostream& out, const T& v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_raw(std::istream& in) {
  T v{};
  in.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!in) throw std::runtime_error("checkpoint: truncated file");
  return v;
}

}  // namespace

const TensorEntry* Checkpoint::find(const std::string& name) const {
  for (const auto& e : entries)
    if (e.name == name) return &e;
  return nullptr;
}

void save_checkpoint(const std::string& path, const Checkpoint& ckpt) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("save_checkpoint: cannot open " + path);
  out.write("PSEP", 4);
  write_raw<std::uint32_t>(out, ckpt.version);
  write_raw<std::uint32_t>(out, static_cast<std::uint32_t>(ckpt.entries.size()));
  for (const auto& e : ckpt.entries) {
    write_raw<std::uint32_t>(out, static_cast<std::uint32_t>(e.name.size()));
    out.write(e.name.data(), static_cast<std::streamsize>(e.name.size()));
    write_raw<std::uint32_t>(out, static_cast<std::uint32_t>(e.shape.size()));
    std::size_t numel = 1;
    for (std::size_t d : e.shape) {
      write_raw<std::uint64_t>(out, d);
      numel *= d;
    }
    if (numel != e.data.size())
      throw std::logic_error("save_checkpoint: entry " + e.name + " shape/data mismatch");
    out.write(reinterpret_cast<const char*>(e.data.data()),
              static_cast<std::streamsize>(e.data.size() * sizeof(double)));
  }
  write_raw<std::uint32_t>(out, static_cast<std::uint32_t>(ckpt.config_text.size()));
  out.write(ckpt.config_text.data(), static_cast<std::streamsize>(ckpt.config_text.size()));
  write_raw<std::uint64_t>(out, ckpt.epoch);
  write_raw<double>(out, ckpt.best_val_loss);
  if (!out) throw std::runtime_error("save_checkpoint: write failed: " + path);
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("load_checkpoint: cannot open " + path);
  char magic[4];
  in.read(magic, 4);
  if (!in || std::memcmp(magic, "PSEP", 4) != 0)
    throw std::runtime_error("load_checkpoint: bad magic in " + path);
  Checkpoint ckpt;
  ckpt.version = read_raw<std::uint32_t>(in);
  if (ckpt.version != 1)
    throw std::runtime_error("load_checkpoint: unsupported version " +
                             std::to_string(ckpt.version));
  const auto count = read_raw<std::uint32_t>(in);
  ckpt.entries.resize(count);
  for (auto& e : ckpt.entries) {
    const auto name_len = read_raw<std::uint32_t>(in);
    e.name.resize(name_len);
    in.read(e.name.data(), name_len);
    const auto rank = read_raw<std::uint32_t>(in);
    e.shape.resize(rank);
    std::size_t numel = 1;
    for (auto& d : e.shape) {
      d = static_cast<std::size_t>(read_raw<std::uint64_t>(in));
      numel *= d;
    }
    e.data.resize(numel);
    in.read(reinterpret_cast<char*>(e.data.data()),
            static_cast<std::streamsize>(numel * sizeof(double)));
    if (!in) throw std::runtime_error("load_checkpoint: truncated entry " + e.name);
  }
  const auto cfg_len = read_raw<std::uint32_t>(in);
  ckpt.config_text.resize(cfg_len);
  in.read(ckpt.config_text.data(), cfg_len);
  ckpt.epoch = read_raw<std::uint64_t>(in);
  ckpt.best_val_loss = read_raw<double>(in);
  return ckpt;
}

}  // namespace psep
