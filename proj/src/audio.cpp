#include "corfsep/audio.hpp"

#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>

namespace corfsep::audio {

namespace {

uint32_t rd_u32(const unsigned char* p) {
  return static_cast<uint32_t>(p[0]) | (static_cast<uint32_t>(p[1]) << 8) |
         (static_cast<uint32_t>(p[2]) << 16) | (static_cast<uint32_t>(p[3]) << 24);
}

uint16_t rd_u16(const unsigned char* p) {
  return static_cast<uint16_t>(p[0] | (p[1] << 8));
}

void wr_u32(std::string& out, uint32_t v) {
  out.push_back(static_cast<char>(v & 0xff));
  out.push_back(static_cast<char>((v >> 8) & 0xff));
  out.push_back(static_cast<char>((v >> 16) & 0xff));
  out.push_back(static_cast<char>((v >> 24) & 0xff));
}

void wr_u16(std::string& out, uint16_t v) {
  out.push_back(static_cast<char>(v & 0xff));
  out.push_back(static_cast<char>((v >> 8) & 0xff));
}

}  // namespace

void validate(const Waveform& w) {
  if (w.rate <= 0) fail(Errc::invalid_entry, "waveform rate must be > 0");
  for (double s : w.samples) {
    if (!std::isfinite(s)) fail(Errc::nan_in_samples, "waveform contains NaN/Inf");
  }
}

Waveform read_wav(const std::string& path) {
  if (!std::filesystem::exists(path)) fail(Errc::file_missing, "no such file: " + path);
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(Errc::io_failure, "cannot open: " + path);
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  const auto* p = reinterpret_cast<const unsigned char*>(bytes.data());
  const size_t n = bytes.size();

  if (n < 12 || std::memcmp(p, "RIFF", 4) != 0 || std::memcmp(p + 8, "WAVE", 4) != 0)
    fail(Errc::wav_malformed, "not a RIFF/WAVE file: " + path);

  bool have_fmt = false;
  uint16_t format = 0, channels = 0, bits = 0;
  uint32_t rate = 0;
  size_t data_off = 0, data_len = 0;

  size_t off = 12;
  while (off + 8 <= n) {
    const char* id = bytes.data() + off;
    uint32_t sz = rd_u32(p + off + 4);
    size_t body = off + 8;
    if (body + sz > n) sz = static_cast<uint32_t>(n - body);
    if (std::memcmp(id, "fmt ", 4) == 0 && sz >= 16) {
      format = rd_u16(p + body);
      channels = rd_u16(p + body + 2);
      rate = rd_u32(p + body + 4);
      bits = rd_u16(p + body + 14);
      have_fmt = true;
    } else if (std::memcmp(id, "data", 4) == 0) {
      data_off = body;
      data_len = sz;
    }
    off = body + sz + (sz & 1);  // chunks are word-aligned
  }

  if (!have_fmt || data_off == 0) fail(Errc::wav_malformed, "missing fmt/data chunk: " + path);
  if (channels != 1) fail(Errc::wav_not_mono, "expected mono, got " + std::to_string(channels) + " channels: " + path);
  if (format != 1 || bits != 16)
    fail(Errc::wav_unsupported_encoding,
         "expected 16-bit PCM, got format=" + std::to_string(format) + " bits=" + std::to_string(bits) + ": " + path);

  Waveform w;
  w.rate = static_cast<int>(rate);
  const size_t frames = data_len / 2;
  w.samples.resize(frames);
  for (size_t i = 0; i < frames; ++i) {
    int16_t v = static_cast<int16_t>(rd_u16(p + data_off + 2 * i));
    w.samples[i] = static_cast<double>(v) / 32768.0;
  }
  if (w.rate <= 0) fail(Errc::wav_malformed, "declared rate is 0: " + path);
  return w;
}

void write_wav(const std::string& path, const Waveform& w) {
  validate(w);

  std::string data;
  data.reserve(w.samples.size() * 2);
  for (double s : w.samples) {
    double c = s;
    if (c < -1.0) c = -1.0;
    if (c > 1.0) c = 1.0;
    long q = std::lround(c * 32768.0);
    if (q > 32767) q = 32767;
    if (q < -32768) q = -32768;
    wr_u16(data, static_cast<uint16_t>(static_cast<int16_t>(q)));
  }

  std::string out;
  out.reserve(44 + data.size());
  out += "RIFF";
  wr_u32(out, static_cast<uint32_t>(36 + data.size()));
  out += "WAVE";
  out += "fmt ";
  wr_u32(out, 16);
  wr_u16(out, 1);  // PCM
  wr_u16(out, 1);  // mono
  wr_u32(out, static_cast<uint32_t>(w.rate));
  wr_u32(out, static_cast<uint32_t>(w.rate * 2));  // byte rate
  wr_u16(out, 2);                                  // block align
  wr_u16(out, 16);                                 // bits
  out += "data";
  wr_u32(out, static_cast<uint32_t>(data.size()));
  out += data;

  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) fail(Errc::io_failure, "cannot open for write: " + path);
  f.write(out.data(), static_cast<std::streamsize>(out.size()));
  if (!f) fail(Errc::io_failure, "short write: " + path);
}

}  // namespace corfsep::audio
