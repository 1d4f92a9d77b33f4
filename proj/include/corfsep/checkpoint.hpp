#pragma once

#include <string>

#include "corfsep/separator.hpp"

#include "json.hpp"

namespace corfsep::sep {

void to_json(nlohmann::json& j, const SeparatorConfig& c);
void from_json(const nlohmann::json& j, SeparatorConfig& c);
void to_json(nlohmann::json& j, const StopClassifierConfig& c);
void from_json(const nlohmann::json& j, StopClassifierConfig& c);

}  // namespace corfsep::sep

namespace corfsep::ckpt {

// Container layout: 16-byte magic, little-endian u64 header length, JSON
// header (config + array directory), then the arrays as raw float64 LE in
// directory order. The digest is FNV-1a over header and payload bytes.
inline constexpr char kMagic[17] = "corfsep-ckpt-v1\n";

struct SeparatorCheckpoint {
  sep::SeparatorModel model;
  std::string kind;           // "stage1" or "stage2"
  std::string stage1_digest;  // set on stage2 checkpoints
  std::string digest;         // of the loaded file
};

struct StopCheckpoint {
  sep::StopClassifier classifier;
  std::string stage1_digest;
  std::string digest;
};

// All savers return the digest of the written file.
std::string save_separator(const std::string& path, const sep::SeparatorModel& m,
                           const std::string& kind, const std::string& stage1_digest = "");
std::string save_stop(const std::string& path, const sep::StopClassifier& c,
                      const std::string& stage1_digest);

SeparatorCheckpoint load_separator(const std::string& path);
StopCheckpoint load_stop(const std::string& path);

// Digest of an existing checkpoint file without reconstructing the model.
std::string file_digest(const std::string& path);

}  // namespace corfsep::ckpt
