#pragma once

#include <stdexcept>
#include <string>

namespace corfsep {

enum class Errc {
  file_missing,
  io_failure,
  wav_malformed,
  wav_not_mono,
  wav_unsupported_encoding,
  nan_in_samples,
  manifest_malformed,
  invalid_entry,
  empty_input,
  length_mismatch,
  zero_energy_reference,
  empty_corpus,
  insufficient_speakers,
  wrong_rate,
  silent_source,
  too_short_input,
  geometry_mismatch,
  shape_mismatch,
  checkpoint_invalid,
  checkpoint_incompatible,
  config_invalid,
  single_class_data,
  divergence,
};

class Error : public std::runtime_error {
 public:
  Error(Errc code, const std::string& msg) : std::runtime_error(msg), code_(code) {}
  Errc code() const { return code_; }

 private:
  Errc code_;
};

[[noreturn]] inline void fail(Errc code, const std::string& msg) { throw Error(code, msg); }

}  // namespace corfsep
