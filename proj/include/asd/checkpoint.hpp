#pragma once

#include <filesystem>
#include <string>
#include <variant>

#include "json.hpp"

#include "asd/model.hpp"

namespace asd {

inline constexpr std::uint8_t kCheckpointVersion = 1;

// Binary layout: 8-byte magic, version byte, u32 header length, JSON header
// (dtype, model config, metadata, tensor list with shapes, free-form extra),
// raw little-endian tensor values in header order, then a u64 FNV-1a checksum
// of every preceding byte.
template <typename T>
void save_checkpoint(const std::filesystem::path& path, ModelGraph<T>& model,
                     const nlohmann::json& extra = nlohmann::json::object());

using AnyModel = std::variant<ModelGraph<float>, ModelGraph<double>>;

struct LoadedCheckpoint {
  AnyModel model;
  nlohmann::json extra;
  // Hex checksum, used as the checkpoint's identity in lineage stamps.
  std::string checksum;
};

// Throws FormatError on a bad magic/version, checksum mismatch, or a tensor
// list that does not match the architecture rebuilt from the stored config.
LoadedCheckpoint load_checkpoint(const std::filesystem::path& path);

// Loads and converts to the requested precision.
template <typename T>
ModelGraph<T> load_checkpoint_as(const std::filesystem::path& path, std::string* checksum = nullptr);

// Copies parameters and buffers between models of identical architecture.
template <typename To, typename From>
void copy_weights(ModelGraph<To>& dst, ModelGraph<From>& src);

}  // namespace asd
