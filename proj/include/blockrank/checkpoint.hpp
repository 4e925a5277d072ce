#pragma once

#include <filesystem>
#include <optional>
#include <span>
#include <string>

#include <nlohmann/json.hpp>

#include "blockrank/model.hpp"

namespace blockrank {

// Adaptive-moment optimizer state; `step` counts applied updates.
struct OptimizerState {
  Parameters<float> m;
  Parameters<float> v;
  int step = 0;
};

struct CheckpointMeta {
  int step = 0;
  nlohmann::json config = nlohmann::json::object();
  nlohmann::json metrics = nlohmann::json::object();
  std::string content_digest;  // SHA-256 of the tensor payload, hex

  nlohmann::json to_json() const;
  static CheckpointMeta from_json(const nlohmann::json& j);
};

struct Checkpoint {
  ModelConfig config;
  Parameters<float> params;
  std::optional<OptimizerState> optimizer;
  CheckpointMeta meta;
};

// Container layout (all integers little-endian):
//   8 bytes  magic "BLKRANK\x01"
//   u32      format version
//   u64      manifest length in bytes
//   manifest JSON: config, dtype, tensors [{name, shape, offset, nbytes}], meta
//   raw float32 tensor payloads, in manifest order
// Returns the metadata as written (digest filled in).
CheckpointMeta save_checkpoint(const std::filesystem::path& path, const ModelConfig& cfg,
                               const Parameters<float>& params, const OptimizerState* optimizer,
                               CheckpointMeta meta);

// Verifies the payload digest; throws Error on any mismatch.
Checkpoint load_checkpoint(const std::filesystem::path& path);

std::string sha256_hex(std::span<const unsigned char> bytes);

// Digest of the raw parameter bytes in canonical tensor order.
template <typename T>
std::string parameter_digest(const Parameters<T>& params);

}  // namespace blockrank
