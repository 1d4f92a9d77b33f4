#pragma once

#include <functional>
#include <map>
#include <string>
#include <vector>

#include "corfsep/checkpoint.hpp"
#include "corfsep/separator.hpp"
#include "corfsep/train.hpp"

namespace corfsep::pipeline {

struct Models {
  sep::SeparatorModel stage1;
  sep::StopClassifier stop;
  sep::SeparatorModel stage2;
};

// Loads all three checkpoints and verifies they belong together: the stop
// and stage-2 headers must record the stage-1 file's digest, and geometries
// must agree.
Models load_models(const std::string& stage1_path, const std::string& stop_path,
                   const std::string& stage2_path);

struct SeparationResult {
  std::vector<audio::Waveform> fine_sources;   // iteration order
  std::vector<audio::Waveform> coarse_cues;
  std::vector<audio::Waveform> residual_trace;  // [0] is the input mixture
  std::vector<std::pair<bool, double>> stop_decisions;
  int iterations = 0;
  bool truncated = false;
};

struct SeparateOptions {
  int max_iterations = 10;
  // On STOP the residual itself becomes the final coarse cue. The switched-
  // off reading instead runs one more full pass and keeps its cue output.
  bool terminal_residual_as_cue = true;
  // Test hook, invoked with the mixture argument of every refinement call.
  std::function<void(const audio::Waveform& mixture_arg, int iteration)> stage2_probe;
};

SeparationResult separate(const audio::Waveform& x, const Models& models,
                          const SeparateOptions& opt = {});

struct MixtureScore {
  size_t index = 0;
  int true_n = 0;
  int predicted_n = 0;
  std::vector<double> fine_per_iteration;    // aligned SI-SNR; NaN when unmatched
  std::vector<double> coarse_per_iteration;  // empty unless coarse scoring is on
};

// Aligns estimates to references (best permutation; the min(count) best
// pairs under a miscount) and scores each matched pair.
MixtureScore score_estimates(size_t index, const std::vector<std::vector<double>>& fine,
                             const std::vector<std::vector<double>>& coarse,
                             const std::vector<std::vector<double>>& refs);

struct EvalReport {
  std::map<int, double> per_num_speakers;                // N -> mean fine SI-SNR dB
  std::map<int, std::map<int, double>> per_iteration;    // N -> (j -> mean dB), j 1-based
  std::map<int, double> per_num_speakers_coarse;         // filled when coarse scoring is on
  double counting_accuracy = 0.0;
  size_t num_mixtures = 0;
  std::vector<MixtureScore> records;
};

// Sorted-sum aggregation, so any record order yields identical means.
EvalReport aggregate_scores(std::vector<MixtureScore> records);

struct EvalOptions {
  SeparateOptions separate;
  bool score_coarse = false;
  int workers = 1;
};

EvalReport evaluate(const std::string& manifest_path, const Models& models,
                    const EvalOptions& opt = {});

// Line-delimited per-mixture records and the aligned-column summary table.
std::string format_records(const EvalReport& report);
std::string format_summary(const EvalReport& report);

}  // namespace corfsep::pipeline
