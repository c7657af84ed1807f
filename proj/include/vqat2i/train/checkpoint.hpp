#pragma once

#include "vqat2i/core/nn.hpp"

#include <json.hpp>

#include <filesystem>
#include <string>
#include <vector>

namespace vqat2i::train {

/// Versioned binary checkpoint: magic + JSON header (shapes, hashes, meta)
/// followed by raw little-endian doubles. Digests are verified on load.
struct CheckpointData {
  std::vector<std::pair<std::string, nn::ParamStore*>> components;
  std::vector<std::pair<std::string, std::vector<Scalar>*>> extras;  // optimizer state
};

void save_checkpoint(const std::filesystem::path& file, const CheckpointData& data,
                     const nlohmann::json& meta);

/// Fills parameter stores and extras in place; throws on magic/version/shape
/// or digest mismatch. Returns the stored meta object.
nlohmann::json load_checkpoint(const std::filesystem::path& file, const CheckpointData& data);

/// Reads only the meta header.
nlohmann::json peek_checkpoint(const std::filesystem::path& file);

struct CheckpointMeta {
  index_t epoch = 0;
  index_t step = 0;
  Scalar is_mean = -1;  // < 0 means not evaluated
  std::uint64_t config_hash = 0;
  std::string file;
  nlohmann::json to_json() const;
  static CheckpointMeta from_json(const nlohmann::json& j);
};

/// Highest score wins; ties resolve to the later epoch.
CheckpointMeta select_best_checkpoint(const std::vector<CheckpointMeta>& series);

void append_checkpoint_series(const std::filesystem::path& file, const CheckpointMeta& meta);
std::vector<CheckpointMeta> read_checkpoint_series(const std::filesystem::path& file);

}  // namespace vqat2i::train
