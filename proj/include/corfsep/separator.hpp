#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "corfsep/audio.hpp"
#include "corfsep/autograd.hpp"
#include "corfsep/error.hpp"

namespace corfsep::sep {

using audio::Waveform;
using nn::Tensor;

struct SeparatorConfig {
  int encoder_window = 2;
  int encoder_stride = 1;
  int feature_dim = 64;
  int chunk_size = 250;
  int num_blocks = 6;
  int hidden_dim = 128;
  int num_outputs = 2;

  void validate() const;
  int chunk_hop() const { return chunk_size / 2; }
  int frames_for(int len) const;
  bool operator==(const SeparatorConfig&) const = default;
};

struct FeatureMap {
  Tensor values;  // frames x feature_dim
  int window = 0;
  int stride = 0;
  int source_len = 0;
  int rate = audio::kPipelineRate;
};

// Named parameter registry. Insertion order is the serialization and
// initialization order, so it must be identical across runs.
class ParamStore {
 public:
  nn::Var add(const std::string& name, Tensor init, bool trainable = true);
  const nn::Var& get(const std::string& name) const;
  bool has(const std::string& name) const { return by_name_.count(name) > 0; }
  const std::vector<std::string>& names() const { return names_; }
  std::vector<nn::Var> trainable() const;
  void set_trainable(bool on);

 private:
  std::vector<std::string> names_;
  std::map<std::string, nn::Var> by_name_;
};

// Chunk geometry shared by the dual-path passes and the merge step.
struct ChunkPlan {
  int frames = 0;
  int num_chunks = 0;
  int chunk_size = 0;
  std::vector<int> row_of;  // (chunk*K + t) -> frame index, -1 for padding
  std::vector<double> merge_scale;  // 1/coverage per frame
};

ChunkPlan plan_chunks(int frames, int chunk_size);

class SeparatorModel {
 public:
  SeparatorConfig cfg;
  std::vector<int> conditioning_blocks;  // 1-indexed; empty for stage 1
  ParamStore params;

  static SeparatorModel init(const SeparatorConfig& cfg, uint64_t seed,
                             std::vector<int> conditioning_blocks = {});

  // Raw encoder features (linear then ReLU), as an autograd node.
  nn::Var encode_node(const nn::Var& x_row, const std::string& enc_name) const;

  // Full forward pass. x_row is 1xL. cue_row conditions the dual-path stack
  // at entry to each listed block; pass nullptr for the unconditioned model.
  // Returns num_outputs waveform rows, each 1xL.
  std::vector<nn::Var> forward(const nn::Var& x_row, const nn::Var* cue_row = nullptr) const;

  // Inference wrappers (no gradient tape).
  std::pair<Waveform, Waveform> separate2(const Waveform& x) const;
  Waveform extract(const Waveform& x, const Waveform& cue) const;

  FeatureMap encode(const Waveform& w) const;
  Waveform decode(const FeatureMap& f) const;

  bool has_cue_encoder() const { return params.has("cue_enc.w"); }

 private:
  nn::Var run_blocks_(const nn::Var& chunked, const ChunkPlan& plan, const nn::Var* cue_chunked) const;
};

// Plain (non-autograd) helpers exposed for direct testing.
Tensor chunk_to_rows(const Tensor& features, const ChunkPlan& plan);
Tensor merge_rows(const Tensor& chunked, const ChunkPlan& plan);

// Stop decision head: frozen front-end encoder, temporal mean+max pooling,
// two feedforward layers, sigmoid over the continue class.
struct StopClassifierConfig {
  int hidden_dim = 32;
  double threshold = 0.5;
  void validate() const;
  bool operator==(const StopClassifierConfig&) const = default;
};

class StopClassifier {
 public:
  StopClassifierConfig cfg;
  SeparatorConfig frontend;  // geometry of the borrowed encoder
  ParamStore params;         // includes the frozen encoder copy under "enc.w"

  static StopClassifier init(const StopClassifierConfig& cfg, const SeparatorConfig& frontend,
                             const Tensor& frozen_encoder, uint64_t seed);

  nn::Var continue_probability_node(const nn::Var& x_row) const;
  double continue_probability(const Waveform& residual) const;
  std::pair<bool, double> should_continue(const Waveform& residual) const;
};

}  // namespace corfsep::sep
