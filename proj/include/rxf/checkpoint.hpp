#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

#include <json.hpp>

#include "rxf/network.hpp"

namespace rxf {

/// Container layout (little-endian):
///   "RXF1" | u32 version | u64 n + n bytes metadata JSON (sorted keys)
///   | u64 tensor count | per tensor: u32 n + name, u8 dtype (1 = f32),
///     u32 rank, rank x i64 dims, raw values | u32 CRC32 of the tensor table
/// The metadata always carries "arch" and "aggregation"; callers add the
/// rest (split k, BN policy, training mode, seed, attack, lambda, beta).
inline constexpr std::uint32_t kCheckpointVersion = 1;

std::vector<unsigned char> serialize_checkpoint(Network& net, const nlohmann::json& meta);

struct LoadedCheckpoint {
  Network net;
  nlohmann::json meta;
};

/// Rebuilds the network from the stored architecture and copies every tensor
/// in, checking names and shapes. Throws DataError on bad magic, unknown
/// version, truncation, checksum failure or shape mismatch.
LoadedCheckpoint deserialize_checkpoint(const std::vector<unsigned char>& bytes);

void save_checkpoint(Network& net, const nlohmann::json& meta, const std::filesystem::path& path);
LoadedCheckpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace rxf
