#pragma once

// Checkpoint container: "FILSCKPT", u32 version, u64 header length, a JSON
// header, then the float32 blobs listed in the header, in order.

#include "fils/nn.hpp"

#include <nlohmann/json.hpp>

#include <cstdint>
#include <filesystem>
#include <vector>

namespace fils {

struct Checkpoint {
  nlohmann::json config;  // the full run config; "model" holds the ModelConfig
  std::int64_t step = 0;  // optimizer steps completed
  std::int64_t epoch = 0;  // epochs completed
  std::vector<float> params;
  std::vector<float> teacher;
  std::vector<float> adam_m;  // empty when optimizer state is not stored
  std::vector<float> adam_v;
  std::int64_t adam_steps = 0;
};

inline constexpr std::uint32_t kCheckpointVersion = 1;

// Writes through a temporary file and renames it into place.
void save_checkpoint(const std::filesystem::path& file, const Checkpoint& ckpt,
                     const nn::ParamLayout& layout);

// Throws std::runtime_error on a bad magic, version or truncated blob.
Checkpoint load_checkpoint(const std::filesystem::path& file);

// Reads only the JSON header.
nlohmann::json read_checkpoint_header(const std::filesystem::path& file);

}  // namespace fils
