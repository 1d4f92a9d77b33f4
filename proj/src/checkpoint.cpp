#include "corfsep/checkpoint.hpp"

#include <cstdint>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <vector>

namespace corfsep::sep {

void to_json(nlohmann::json& j, const SeparatorConfig& c) {
  j = nlohmann::json{{"encoder_window", c.encoder_window}, {"encoder_stride", c.encoder_stride},
                     {"feature_dim", c.feature_dim},       {"chunk_size", c.chunk_size},
                     {"num_blocks", c.num_blocks},         {"hidden_dim", c.hidden_dim},
                     {"num_outputs", c.num_outputs}};
}

void from_json(const nlohmann::json& j, SeparatorConfig& c) {
  c.encoder_window = j.value("encoder_window", c.encoder_window);
  c.encoder_stride = j.value("encoder_stride", c.encoder_stride);
  c.feature_dim = j.value("feature_dim", c.feature_dim);
  c.chunk_size = j.value("chunk_size", c.chunk_size);
  c.num_blocks = j.value("num_blocks", c.num_blocks);
  c.hidden_dim = j.value("hidden_dim", c.hidden_dim);
  c.num_outputs = j.value("num_outputs", c.num_outputs);
}

void to_json(nlohmann::json& j, const StopClassifierConfig& c) {
  j = nlohmann::json{{"hidden_dim", c.hidden_dim}, {"threshold", c.threshold}};
}

void from_json(const nlohmann::json& j, StopClassifierConfig& c) {
  c.hidden_dim = j.value("hidden_dim", c.hidden_dim);
  c.threshold = j.value("threshold", c.threshold);
}

}  // namespace corfsep::sep

namespace corfsep::ckpt {

namespace {

uint64_t fnv1a(const uint8_t* p, size_t n, uint64_t h = 14695981039346656037ULL) {
  for (size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 1099511628211ULL;
  }
  return h;
}

std::string hex64(uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

void append_u64_le(std::string& out, uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

uint64_t read_u64_le(const uint8_t* p) {
  uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<uint64_t>(p[i]) << (8 * i);
  return v;
}

nlohmann::json array_directory(const sep::ParamStore& params) {
  nlohmann::json dir = nlohmann::json::array();
  for (const auto& name : params.names()) {
    const auto& v = params.get(name);
    dir.push_back({{"name", name},
                   {"rows", v->value.rows},
                   {"cols", v->value.cols},
                   {"trainable", v->requires_grad}});
  }
  return dir;
}

void append_blob(std::string& out, const sep::ParamStore& params) {
  static_assert(sizeof(double) == 8);
  for (const auto& name : params.names()) {
    const auto& v = params.get(name);
    const size_t bytes = v->value.d.size() * sizeof(double);
    const size_t at = out.size();
    out.resize(at + bytes);
    std::memcpy(out.data() + at, v->value.d.data(), bytes);
  }
}

std::string write_container(const std::string& path, nlohmann::json header,
                            const sep::ParamStore& params) {
  std::string payload = header.dump();
  const size_t header_len = payload.size();
  append_blob(payload, params);
  const std::string digest =
      hex64(fnv1a(reinterpret_cast<const uint8_t*>(payload.data()), payload.size()));

  std::string file;
  file.reserve(16 + 8 + payload.size());
  file.append(kMagic, 16);
  append_u64_le(file, header_len);
  file.append(payload);

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) fail(Errc::io_failure, "cannot open checkpoint for writing: " + path);
  out.write(file.data(), static_cast<std::streamsize>(file.size()));
  if (!out) fail(Errc::io_failure, "short write on checkpoint: " + path);
  return digest;
}

struct RawContainer {
  nlohmann::json header;
  std::vector<double> blob;
  std::string digest;
};

RawContainer read_container(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(Errc::file_missing, "checkpoint not found: " + path);
  std::string file((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (file.size() < 24 || std::memcmp(file.data(), kMagic, 16) != 0)
    fail(Errc::checkpoint_invalid, "not a checkpoint file: " + path);
  const uint64_t header_len = read_u64_le(reinterpret_cast<const uint8_t*>(file.data() + 16));
  if (24 + header_len > file.size())
    fail(Errc::checkpoint_invalid, "truncated checkpoint header: " + path);
  RawContainer raw;
  raw.digest = hex64(fnv1a(reinterpret_cast<const uint8_t*>(file.data() + 24), file.size() - 24));
  try {
    raw.header = nlohmann::json::parse(file.begin() + 24, file.begin() + 24 + static_cast<long>(header_len));
  } catch (const nlohmann::json::exception& e) {
    fail(Errc::checkpoint_invalid, std::string("bad checkpoint header: ") + e.what());
  }
  const size_t blob_bytes = file.size() - 24 - header_len;
  if (blob_bytes % sizeof(double) != 0)
    fail(Errc::checkpoint_invalid, "checkpoint payload is not a float64 sequence: " + path);
  raw.blob.resize(blob_bytes / sizeof(double));
  std::memcpy(raw.blob.data(), file.data() + 24 + header_len, blob_bytes);
  return raw;
}

// Copies blob values into params, verifying the directory matches the
// store's layout name for name and shape for shape.
void fill_params(sep::ParamStore& params, const nlohmann::json& dir, const std::vector<double>& blob,
                 const std::string& path) {
  if (!dir.is_array() || dir.size() != params.names().size())
    fail(Errc::checkpoint_incompatible, "array directory size mismatch: " + path);
  size_t off = 0;
  for (size_t i = 0; i < params.names().size(); ++i) {
    const auto& entry = dir[i];
    const std::string name = entry.at("name").get<std::string>();
    if (name != params.names()[i])
      fail(Errc::checkpoint_incompatible, "unexpected array " + name + " in " + path);
    auto& v = params.get(name);
    const int rows = entry.at("rows").get<int>();
    const int cols = entry.at("cols").get<int>();
    if (rows != v->value.rows || cols != v->value.cols)
      fail(Errc::checkpoint_incompatible, "shape mismatch for " + name + " in " + path);
    const size_t n = v->value.d.size();
    if (off + n > blob.size()) fail(Errc::checkpoint_invalid, "checkpoint payload too short: " + path);
    std::copy(blob.begin() + static_cast<long>(off), blob.begin() + static_cast<long>(off + n),
              v->value.d.begin());
    v->requires_grad = entry.value("trainable", true);
    off += n;
  }
  if (off != blob.size()) fail(Errc::checkpoint_invalid, "checkpoint payload too long: " + path);
}

}  // namespace

std::string save_separator(const std::string& path, const sep::SeparatorModel& m,
                           const std::string& kind, const std::string& stage1_digest) {
  nlohmann::json header;
  header["kind"] = kind;
  header["separator"] = m.cfg;
  header["conditioning_blocks"] = m.conditioning_blocks;
  if (!stage1_digest.empty()) header["stage1_digest"] = stage1_digest;
  header["arrays"] = array_directory(m.params);
  return write_container(path, std::move(header), m.params);
}

std::string save_stop(const std::string& path, const sep::StopClassifier& c,
                      const std::string& stage1_digest) {
  nlohmann::json header;
  header["kind"] = "stop";
  header["stop"] = c.cfg;
  header["frontend"] = c.frontend;
  if (!stage1_digest.empty()) header["stage1_digest"] = stage1_digest;
  header["arrays"] = array_directory(c.params);
  return write_container(path, std::move(header), c.params);
}

SeparatorCheckpoint load_separator(const std::string& path) {
  RawContainer raw = read_container(path);
  const std::string kind = raw.header.value("kind", "");
  if (kind != "stage1" && kind != "stage2")
    fail(Errc::checkpoint_incompatible, "expected a separator checkpoint, got kind '" + kind + "'");
  sep::SeparatorConfig cfg = raw.header.value("separator", sep::SeparatorConfig{});
  std::vector<int> cond = raw.header.value("conditioning_blocks", std::vector<int>{});
  SeparatorCheckpoint out{sep::SeparatorModel::init(cfg, 0, cond), kind,
                          raw.header.value("stage1_digest", ""), raw.digest};
  fill_params(out.model.params, raw.header.at("arrays"), raw.blob, path);
  return out;
}

StopCheckpoint load_stop(const std::string& path) {
  RawContainer raw = read_container(path);
  if (raw.header.value("kind", "") != "stop")
    fail(Errc::checkpoint_incompatible, "expected a stop-classifier checkpoint: " + path);
  sep::StopClassifierConfig cfg = raw.header.value("stop", sep::StopClassifierConfig{});
  sep::SeparatorConfig frontend = raw.header.value("frontend", sep::SeparatorConfig{});
  StopCheckpoint out{
      sep::StopClassifier::init(cfg, frontend,
                                nn::Tensor(frontend.encoder_window, frontend.feature_dim), 0),
      raw.header.value("stage1_digest", ""), raw.digest};
  fill_params(out.classifier.params, raw.header.at("arrays"), raw.blob, path);
  return out;
}

std::string file_digest(const std::string& path) { return read_container(path).digest; }

}  // namespace corfsep::ckpt
