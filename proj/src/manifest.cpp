#include "corfsep/manifest.hpp"

#include <cinttypes>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include "corfsep/error.hpp"

namespace corfsep::audio {

namespace {

std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : s) {
    if (c == sep) {
      out.push_back(cur);
      cur.clear();
    } else {
      cur.push_back(c);
    }
  }
  out.push_back(cur);
  return out;
}

}  // namespace

void validate(const ManifestEntry& e) {
  const size_t n = e.source_paths.size();
  if (n < 1) fail(Errc::invalid_entry, "entry needs at least one source");
  if (e.speaker_ids.size() != n || e.gains_db.size() != n)
    fail(Errc::invalid_entry, "source/speaker/gain list lengths disagree");
  if (e.mixture_path.empty()) fail(Errc::invalid_entry, "empty mixture path");
  std::set<std::string> ids(e.speaker_ids.begin(), e.speaker_ids.end());
  if (ids.size() != n) fail(Errc::invalid_entry, "speaker ids within an entry must be distinct");
}

std::string format_entry(const ManifestEntry& e) {
  validate(e);
  std::string out = e.mixture_path;
  out.push_back('\t');
  for (size_t i = 0; i < e.source_paths.size(); ++i) {
    if (i) out.push_back(';');
    out += e.source_paths[i];
  }
  out.push_back('\t');
  for (size_t i = 0; i < e.speaker_ids.size(); ++i) {
    if (i) out.push_back(';');
    out += e.speaker_ids[i];
  }
  out.push_back('\t');
  char buf[64];
  for (size_t i = 0; i < e.gains_db.size(); ++i) {
    if (i) out.push_back(';');
    std::snprintf(buf, sizeof(buf), "%.2f", e.gains_db[i]);
    out += buf;
  }
  out.push_back('\t');
  std::snprintf(buf, sizeof(buf), "%" PRIu64, e.seed);
  out += buf;
  return out;
}

ManifestEntry parse_entry(const std::string& line, size_t line_no) {
  const auto fields = split(line, '\t');
  if (fields.size() != 5)
    fail(Errc::manifest_malformed,
         "line " + std::to_string(line_no) + ": expected 5 tab-separated fields, got " + std::to_string(fields.size()));
  ManifestEntry e;
  e.mixture_path = fields[0];
  e.source_paths = split(fields[1], ';');
  e.speaker_ids = split(fields[2], ';');
  for (const auto& g : split(fields[3], ';')) {
    try {
      size_t used = 0;
      e.gains_db.push_back(std::stod(g, &used));
      if (used != g.size()) throw std::invalid_argument(g);
    } catch (const std::exception&) {
      fail(Errc::manifest_malformed, "line " + std::to_string(line_no) + ": bad gain value '" + g + "'");
    }
  }
  try {
    size_t used = 0;
    e.seed = std::stoull(fields[4], &used);
    if (used != fields[4].size()) throw std::invalid_argument(fields[4]);
  } catch (const std::exception&) {
    fail(Errc::manifest_malformed, "line " + std::to_string(line_no) + ": bad seed '" + fields[4] + "'");
  }
  try {
    validate(e);
  } catch (const Error& err) {
    fail(Errc::manifest_malformed, "line " + std::to_string(line_no) + ": " + err.what());
  }
  return e;
}

std::vector<ManifestEntry> load_manifest(const std::string& path) {
  if (!std::filesystem::exists(path)) fail(Errc::file_missing, "no such manifest: " + path);
  std::ifstream in(path);
  if (!in) fail(Errc::io_failure, "cannot open manifest: " + path);
  std::vector<ManifestEntry> out;
  std::string line;
  size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    out.push_back(parse_entry(line, line_no));
  }
  return out;
}

void save_manifest(const std::string& path, const std::vector<ManifestEntry>& entries) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) fail(Errc::io_failure, "cannot open manifest for write: " + path);
  for (const auto& e : entries) {
    out << format_entry(e) << '\n';
  }
  if (!out) fail(Errc::io_failure, "short write: " + path);
}

}  // namespace corfsep::audio
