#pragma once

#include <cstdint>
#include <vector>

#include "corfsep/separator.hpp"
#include "corfsep/train.hpp"

namespace corfsep::extractor {

struct ConditionedConfig {
  sep::SeparatorConfig separator;           // single-output
  std::vector<int> conditioning_blocks{1, 3, 5};  // 1-indexed

  ConditionedConfig() { separator.num_outputs = 1; }
  void validate() const;
};

// Fresh cue-conditioned model whose cue front-end is the frozen stage-1
// encoder. The mixture encoder is its own trainable parameter set.
sep::SeparatorModel init_stage2(const ConditionedConfig& cfg, const sep::SeparatorModel& stage1,
                                uint64_t seed);

// Cue features through the borrowed stage-1 encoder weights.
sep::FeatureMap encode_cue(const sep::SeparatorModel& stage2, const audio::Waveform& cue);

// Elementwise conditioning product, exposed on plain arrays for testing.
nn::Tensor condition(const nn::Tensor& features, const nn::Tensor& cue_features);

struct ExtractPair {
  std::vector<double> mix;
  std::vector<double> cue;
  std::vector<double> ref;
};

// Three frozen stage-1 iterations per 3-speaker mixture; cue j is matched to
// the best remaining reference (greedy, without replacement).
std::vector<ExtractPair> build_extract_pairs(const sep::SeparatorModel& stage1,
                                             const std::vector<train::TrainItem>& threemix);

// Negated-SI-SNR training of the stage-2 model on (mixture, cue, ref) pairs
// under the shared schedule engine.
train::TrainOutcome train_stage2(sep::SeparatorModel& stage2, const sep::SeparatorModel& stage1,
                                 const std::vector<train::TrainItem>& threemix_train,
                                 const std::vector<train::TrainItem>& threemix_valid,
                                 const train::TrainConfig& cfg);

}  // namespace corfsep::extractor
