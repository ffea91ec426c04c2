#pragma once

#include "pes/nn.hpp"

#include <cstdint>
#include <filesystem>
#include <string>

namespace pes {

struct CheckpointMeta {
  std::uint64_t schema_hash = 0;
  std::string stage;
  int epoch = -1;
  double metric = 0.0;
  friend bool operator==(const CheckpointMeta&, const CheckpointMeta&) = default;
};

/// Binary layout, all integers and doubles little-endian:
///
///     "PESCKPT1"  u32 header_bytes  header (JSON text: arch + meta)
///     u64 n  f64[n] params  f64[n] first_moment  f64[n] second_moment  i64 step
void save_checkpoint(const std::filesystem::path& path, const ModelState& m, const CheckpointMeta& meta);

struct LoadedCheckpoint {
  ModelState state;
  CheckpointMeta meta;
};

LoadedCheckpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace pes
