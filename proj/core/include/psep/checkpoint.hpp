#pragma once

#include <cstdint>
#include <limits>
#include <string>
#include <vector>

namespace psep {

struct TensorEntry {
  std::string name;
  std::vector<std::size_t> shape;
  std::vector<double> data;
};

// On-disk layout, little-endian throughout:
//   magic "PSEP", version u32, entry count u32,
//   per entry: name length u32, name bytes, rank u32, dims u64..., payload f64...,
//   config text length u32 + bytes, epoch u64, best validation loss f64.
struct Checkpoint {
  std::uint32_t version = 1;
  std::vector<TensorEntry> entries;
  std::string config_text;
  std::uint64_t epoch = 0;
  double best_val_loss = std::numeric_limits<double>::infinity();

  const TensorEntry* find(const std::string& name) const;
};

void save_checkpoint(const std::string& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::string& path);

}  // namespace psep
