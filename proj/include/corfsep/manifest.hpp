#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace corfsep::audio {

// One simulated mixture: paths are relative to the manifest's directory.
struct ManifestEntry {
  std::string mixture_path;
  std::vector<std::string> source_paths;
  std::vector<std::string> speaker_ids;
  std::vector<double> gains_db;
  uint64_t seed = 0;

  size_t num_speakers() const { return source_paths.size(); }
};

// Throws Errc::invalid_entry when list lengths disagree, the entry is empty,
// or speaker ids repeat.
void validate(const ManifestEntry& e);

// Tab-separated, one record per line:
//   mixture_path <TAB> src;src;.. <TAB> id;id;.. <TAB> g.gg;g.gg;.. <TAB> seed
std::vector<ManifestEntry> load_manifest(const std::string& path);
void save_manifest(const std::string& path, const std::vector<ManifestEntry>& entries);

std::string format_entry(const ManifestEntry& e);
ManifestEntry parse_entry(const std::string& line, size_t line_no);

}  // namespace corfsep::audio
