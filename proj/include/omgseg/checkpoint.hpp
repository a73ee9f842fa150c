#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "omgseg/decoder.hpp"

namespace omgseg {

struct CheckpointEntry {
  std::string name;
  std::vector<std::int64_t> shape;  // rows, cols
  std::string dtype = "f64";
  std::uint64_t offset = 0;  // bytes from the start of the blob section
  bool trainable = true;
};

struct CheckpointManifest {
  int version = 1;
  ModelConfig config;
  std::string config_hash;
  std::string model_hash;
  std::vector<CheckpointEntry> entries;
  nlohmann::json meta = nlohmann::json::object();
};

void to_json(nlohmann::json& j, const CheckpointManifest& m);
void from_json(const nlohmann::json& j, CheckpointManifest& m);

/// 16 hex digits of FNV-1a 64 over the canonical config JSON.
std::string config_hash(const ModelConfig& cfg);
/// 16 hex digits of the parameter checksum (names and value bytes).
std::string model_hash(const OmgSegModel& model);

/// Layout: "OMGSEGCK", u32 version, u64 manifest length, manifest JSON, then
/// little-endian f64 arrays (row-major) at the manifest offsets.
void save_checkpoint(const std::filesystem::path& path, const OmgSegModel& model,
                     const nlohmann::json& meta = nlohmann::json::object());

struct LoadedCheckpoint {
  OmgSegModel model;
  CheckpointManifest manifest;
};

/// Throws DataError on a bad header, truncated data or hash mismatch.
LoadedCheckpoint load_checkpoint(const std::filesystem::path& path);
CheckpointManifest read_manifest(const std::filesystem::path& path);

}  // namespace omgseg
