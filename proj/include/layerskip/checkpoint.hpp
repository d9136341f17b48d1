#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>

#include "layerskip/model.hpp"

namespace layerskip {

inline constexpr char kCheckpointMagic[4] = {'L', 'S', 'K', 'P'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

/// Free-form string metadata stored with the weights (resolved run config).
using CheckpointMetadata = std::map<std::string, std::string>;

struct Checkpoint {
  ModelParams params;
  CheckpointMetadata metadata;
};

/// Layout (little-endian):
///   "LSKP" | u32 version | u64 header_len | u32 crc32(header) | header JSON
///   | f32 arrays in manifest order
/// The header holds the model config, the metadata map, the manifest
/// (name + shape per array) and crc32 of the array payload.
void save_checkpoint(const ModelParams& params, const CheckpointMetadata& metadata, const std::filesystem::path& path);

std::string serialize_checkpoint(const ModelParams& params, const CheckpointMetadata& metadata);

/// Throws CheckpointError (with the failing byte offset) on bad magic,
/// corruption or truncation, and UnsupportedVersion for newer formats.
Checkpoint load_checkpoint(const std::filesystem::path& path);

Checkpoint deserialize_checkpoint(const std::string& bytes);

}  // namespace layerskip
