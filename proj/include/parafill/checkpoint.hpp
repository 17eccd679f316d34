#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "parafill/model.hpp"

namespace parafill::checkpoint {

inline constexpr std::uint32_t kFormatVersion = 1;

/// Binary layout, all integers little-endian u32:
///   "PFCKPT\0\1" | version | header length | header JSON
///   | tensor count | per tensor: name length, name, rows, cols, f32 values
///   | 64 hex chars of SHA-256 over everything before them.
/// The header JSON holds {config, vocab_hash, meta}.
struct Checkpoint {
  model::ModelConfig config;
  std::string vocab_hash;
  nlohmann::json meta = nlohmann::json::object();
  model::ParamVector<float> params;  // flat, in Layout order

  model::Transformer<float> to_model() const;
};

std::string serialize(const Checkpoint& ckpt);
/// Throws DataError on truncation, bad magic, checksum mismatch, version
/// skew, or tensor shapes that disagree with the config.
Checkpoint deserialize(const std::string& bytes);

void save(const std::filesystem::path& path, const model::Transformer<float>& model, const std::string& vocab_hash,
          const nlohmann::json& meta = nlohmann::json::object());
/// When `expected_vocab_hash` is given it must match the stored hash.
Checkpoint load(const std::filesystem::path& path,
                const std::optional<std::string>& expected_vocab_hash = std::nullopt);

}  // namespace parafill::checkpoint
