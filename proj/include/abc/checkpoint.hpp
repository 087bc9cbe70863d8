#pragma once

#include <cstdint>
#include <string>

#include "json.hpp"

#include "abc/encoder.hpp"

namespace abc {

// Sidecar facts that do not live in the weights themselves.
struct CheckpointMeta {
  std::string stage;  // "bootstrap" | "1" | "2"
  uint64_t step = 0;
  uint64_t seed = 0;
};

struct Checkpoint {
  EncoderParams params;
  CheckpointMeta meta;
};

nlohmann::ordered_json encoder_config_to_json(const EncoderConfig& config);
EncoderConfig encoder_config_from_json(const nlohmann::json& j);

// Container layout, all integers and floats little-endian:
//   "ABCE" | u32 version | u32 meta_len | meta JSON (UTF-8) | tensor records
// Each record: u32 name_len | name | u32 rank | u64 dims[rank] | f32 data.
// Records run to end of file. Values pass through f32 on disk, so a
// round-trip equals the f32-rounded original bit for bit.
void save_checkpoint(const std::string& path, const EncoderParams& params, const CheckpointMeta& meta);
Checkpoint load_checkpoint(const std::string& path);

}  // namespace abc
