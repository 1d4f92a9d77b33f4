#pragma once

#include <string>
#include <vector>

#include "corfsep/error.hpp"

namespace corfsep::audio {

constexpr int kPipelineRate = 8000;

struct Waveform {
  std::vector<double> samples;  // nominal range [-1, 1]
  int rate = kPipelineRate;

  size_t size() const { return samples.size(); }
  double duration_s() const { return rate > 0 ? static_cast<double>(samples.size()) / rate : 0.0; }
};

// Throws if samples contain NaN/Inf or rate <= 0.
void validate(const Waveform& w);

// 16-bit PCM mono RIFF reader. Distinct error codes for missing file,
// non-mono content and non-PCM16 encodings.
Waveform read_wav(const std::string& path);

// Writes 16-bit PCM mono. Samples are clipped to [-1, 1) before quantization.
void write_wav(const std::string& path, const Waveform& w);

}  // namespace corfsep::audio
