#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "corfsep/audio.hpp"
#include "corfsep/manifest.hpp"

namespace corfsep::mixsim {

struct CorpusIndex {
  // speaker id -> utterance paths, both in sorted order
  std::map<std::string, std::vector<std::string>> speakers;
  std::string split;  // train / valid / test

  size_t num_speakers() const { return speakers.size(); }
  size_t num_utterances() const;
};

struct MixtureExample {
  audio::Waveform mixture;
  std::vector<audio::Waveform> sources;
  std::vector<double> gains_db;
  std::vector<std::string> speaker_ids;
  uint64_t seed = 0;
};

// Scans root/<speaker>/<utterance>.wav deterministically (sorted traversal).
CorpusIndex ingest_corpus(const std::string& root, const std::string& split = "train");

// 4 s windows with 2 s hop at 8 kHz. Utterances shorter than 2 s are
// discarded; a trailing window of at least 2 s is zero-padded to 4 s.
std::vector<audio::Waveform> segment_utterance(const audio::Waveform& w,
                                               double seg_seconds = 4.0,
                                               double hop_seconds = 2.0);

// Test helper inverse: concatenates the non-overlapping prefixes and the
// final window, truncated to `orig_len`.
audio::Waveform reconstruct_segments(const std::vector<audio::Waveform>& segs,
                                     size_t orig_len, double seg_seconds = 4.0,
                                     double hop_seconds = 2.0);

// Source 0 keeps unit gain; every later source is rescaled so its power
// sits a uniformly drawn [lo, hi] dB below source 0. The mixture is the sum;
// if it clips, everything is rescaled jointly to peak 0.9.
MixtureExample mix(const std::vector<audio::Waveform>& sources, double snr_lo_db,
                   double snr_hi_db, uint64_t rng_seed);

struct BuildOptions {
  int n_speakers = 2;
  int count = 0;
  uint64_t seed = 0;
  double snr_lo_db = 0.0;
  double snr_hi_db = 5.0;
  int workers = 1;
};

// Materializes `count` mixtures (mix/ s1/ s2/ ... WAV trees) plus a manifest
// at out_dir/manifest.tsv. Example k depends only on sub_seed(seed, k).
std::vector<audio::ManifestEntry> build_dataset(const CorpusIndex& index, const std::string& out_dir,
                                                const BuildOptions& opt);

// Loads a manifest entry's audio relative to the manifest directory.
MixtureExample load_example(const std::string& manifest_dir, const audio::ManifestEntry& e);

}  // namespace corfsep::mixsim
