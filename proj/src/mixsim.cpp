#include "corfsep/mixsim.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <thread>

#include "corfsep/error.hpp"
#include "corfsep/rng.hpp"

namespace fs = std::filesystem;

namespace corfsep::mixsim {

size_t CorpusIndex::num_utterances() const {
  size_t n = 0;
  for (const auto& [id, utts] : speakers) n += utts.size();
  return n;
}

CorpusIndex ingest_corpus(const std::string& root, const std::string& split) {
  if (!fs::exists(root) || !fs::is_directory(root)) fail(Errc::file_missing, "no such corpus root: " + root);
  CorpusIndex index;
  index.split = split;
  std::vector<fs::path> speaker_dirs;
  for (const auto& de : fs::directory_iterator(root)) {
    if (de.is_directory()) speaker_dirs.push_back(de.path());
  }
  std::sort(speaker_dirs.begin(), speaker_dirs.end());
  for (const auto& dir : speaker_dirs) {
    std::vector<std::string> utts;
    for (const auto& de : fs::directory_iterator(dir)) {
      if (de.is_regular_file() && de.path().extension() == ".wav") utts.push_back(de.path().string());
    }
    std::sort(utts.begin(), utts.end());
    if (!utts.empty()) index.speakers[dir.filename().string()] = std::move(utts);
  }
  if (index.speakers.empty()) fail(Errc::empty_corpus, "no speakers with utterances under: " + root);
  if (index.speakers.size() < 2) fail(Errc::insufficient_speakers, "corpus needs at least 2 speakers: " + root);
  return index;
}

std::vector<audio::Waveform> segment_utterance(const audio::Waveform& w, double seg_seconds,
                                               double hop_seconds) {
  if (w.rate != audio::kPipelineRate)
    fail(Errc::wrong_rate, "segment_utterance expects " + std::to_string(audio::kPipelineRate) + " Hz, got " +
                               std::to_string(w.rate));
  const size_t seg = static_cast<size_t>(std::llround(seg_seconds * w.rate));
  const size_t hop = static_cast<size_t>(std::llround(hop_seconds * w.rate));
  const size_t min_len = hop;  // the "discard below 2 s" rule
  const size_t len = w.samples.size();

  std::vector<audio::Waveform> out;
  if (len < min_len) return out;

  size_t offset = 0;
  while (offset + seg <= len) {
    audio::Waveform s;
    s.rate = w.rate;
    s.samples.assign(w.samples.begin() + offset, w.samples.begin() + offset + seg);
    out.push_back(std::move(s));
    offset += hop;
  }
  // trailing window only when the full windows did not already cover the tail
  const size_t covered = out.empty() ? 0 : (offset - hop) + seg;
  if (covered < len) {
    const size_t tail = len - offset;
    if (tail >= min_len) {
      audio::Waveform s;
      s.rate = w.rate;
      s.samples.assign(w.samples.begin() + offset, w.samples.end());
      s.samples.resize(seg, 0.0);
      out.push_back(std::move(s));
    }
  }
  return out;
}

audio::Waveform reconstruct_segments(const std::vector<audio::Waveform>& segs, size_t orig_len,
                                     double seg_seconds, double hop_seconds) {
  audio::Waveform out;
  if (segs.empty()) return out;
  out.rate = segs[0].rate;
  const size_t hop = static_cast<size_t>(std::llround(hop_seconds * out.rate));
  (void)seg_seconds;
  for (size_t k = 0; k < segs.size(); ++k) {
    const auto& s = segs[k].samples;
    const size_t take = (k + 1 == segs.size()) ? s.size() : hop;
    out.samples.insert(out.samples.end(), s.begin(), s.begin() + take);
  }
  if (out.samples.size() > orig_len) out.samples.resize(orig_len);
  return out;
}

namespace {

double mean_square(const std::vector<double>& x) {
  double s = 0.0;
  for (double v : x) s += v * v;
  return x.empty() ? 0.0 : s / static_cast<double>(x.size());
}

}  // namespace

MixtureExample mix(const std::vector<audio::Waveform>& sources, double snr_lo_db, double snr_hi_db,
                   uint64_t rng_seed) {
  if (sources.empty()) fail(Errc::empty_input, "mix needs at least one source");
  const size_t len = sources[0].samples.size();
  for (const auto& s : sources) {
    if (s.samples.size() != len) fail(Errc::length_mismatch, "mix sources must share one length");
    if (mean_square(s.samples) == 0.0) fail(Errc::silent_source, "mix rejects silent sources");
  }

  Rng rng(rng_seed);
  MixtureExample ex;
  ex.seed = rng_seed;
  ex.sources.resize(sources.size());
  ex.gains_db.resize(sources.size());

  const double p0 = mean_square(sources[0].samples);
  for (size_t i = 0; i < sources.size(); ++i) {
    ex.sources[i].rate = sources[i].rate;
    if (i == 0) {
      ex.sources[i].samples = sources[i].samples;
      ex.gains_db[i] = 0.0;
    } else {
      const double g = rng.uniform(snr_lo_db, snr_hi_db);
      const double pi = mean_square(sources[i].samples);
      const double scale = std::sqrt(p0 / (pi * std::pow(10.0, g / 10.0)));
      ex.sources[i].samples.resize(len);
      for (size_t t = 0; t < len; ++t) ex.sources[i].samples[t] = sources[i].samples[t] * scale;
      ex.gains_db[i] = g;
    }
  }

  ex.mixture.rate = sources[0].rate;
  ex.mixture.samples.assign(len, 0.0);
  for (const auto& s : ex.sources)
    for (size_t t = 0; t < len; ++t) ex.mixture.samples[t] += s.samples[t];

  double peak = 0.0;
  for (double v : ex.mixture.samples) peak = std::max(peak, std::fabs(v));
  if (peak > 1.0) {
    const double rescale = 0.9 / peak;
    for (auto& v : ex.mixture.samples) v *= rescale;
    for (auto& s : ex.sources)
      for (auto& v : s.samples) v *= rescale;
  }
  return ex;
}

namespace {

MixtureExample make_example(const CorpusIndex& index, const BuildOptions& opt, uint64_t k) {
  const uint64_t s = sub_seed(opt.seed, k);
  Rng rng(s);

  std::vector<const std::string*> ids;
  ids.reserve(index.speakers.size());
  for (const auto& [id, utts] : index.speakers) ids.push_back(&id);
  // draw n distinct speakers
  std::vector<size_t> order(ids.size());
  for (size_t i = 0; i < order.size(); ++i) order[i] = i;
  rng.shuffle(order);

  std::vector<audio::Waveform> picked;
  std::vector<std::string> speaker_ids;
  size_t min_len = SIZE_MAX;
  for (int i = 0; i < opt.n_speakers; ++i) {
    const std::string& id = *ids[order[static_cast<size_t>(i)]];
    const auto& utts = index.speakers.at(id);
    const auto& path = utts[rng.below(utts.size())];
    audio::Waveform w = audio::read_wav(path);
    min_len = std::min(min_len, w.samples.size());
    picked.push_back(std::move(w));
    speaker_ids.push_back(id);
  }
  for (auto& w : picked) w.samples.resize(min_len);

  MixtureExample ex = mix(picked, opt.snr_lo_db, opt.snr_hi_db, sub_seed(s, 1));
  ex.seed = s;
  ex.speaker_ids = std::move(speaker_ids);
  return ex;
}

}  // namespace

std::vector<audio::ManifestEntry> build_dataset(const CorpusIndex& index, const std::string& out_dir,
                                                const BuildOptions& opt) {
  if (static_cast<int>(index.num_speakers()) < opt.n_speakers)
    fail(Errc::insufficient_speakers, "corpus has " + std::to_string(index.num_speakers()) +
                                          " speakers, need " + std::to_string(opt.n_speakers));

  fs::create_directories(fs::path(out_dir) / "mix");
  for (int i = 0; i < opt.n_speakers; ++i) fs::create_directories(fs::path(out_dir) / ("s" + std::to_string(i + 1)));

  std::vector<audio::ManifestEntry> entries(static_cast<size_t>(opt.count));

  auto emit = [&](uint64_t k) {
    MixtureExample ex = make_example(index, opt, k);
    char name[32];
    std::snprintf(name, sizeof(name), "%06llu.wav", static_cast<unsigned long long>(k));
    audio::ManifestEntry e;
    e.mixture_path = std::string("mix/") + name;
    audio::write_wav((fs::path(out_dir) / e.mixture_path).string(), ex.mixture);
    for (size_t i = 0; i < ex.sources.size(); ++i) {
      std::string rel = "s" + std::to_string(i + 1) + "/" + name;
      audio::write_wav((fs::path(out_dir) / rel).string(), ex.sources[i]);
      e.source_paths.push_back(rel);
    }
    e.speaker_ids = ex.speaker_ids;
    e.gains_db = ex.gains_db;
    e.seed = ex.seed;
    entries[k] = std::move(e);
  };

  const int workers = std::max(1, opt.workers);
  if (workers == 1) {
    for (uint64_t k = 0; k < static_cast<uint64_t>(opt.count); ++k) emit(k);
  } else {
    std::atomic<uint64_t> next{0};
    std::vector<std::thread> pool;
    for (int w = 0; w < workers; ++w) {
      pool.emplace_back([&] {
        for (uint64_t k; (k = next.fetch_add(1)) < static_cast<uint64_t>(opt.count);) emit(k);
      });
    }
    for (auto& t : pool) t.join();
  }

  audio::save_manifest((fs::path(out_dir) / "manifest.tsv").string(), entries);
  return entries;
}

MixtureExample load_example(const std::string& manifest_dir, const audio::ManifestEntry& e) {
  MixtureExample ex;
  ex.mixture = audio::read_wav((fs::path(manifest_dir) / e.mixture_path).string());
  for (const auto& sp : e.source_paths) ex.sources.push_back(audio::read_wav((fs::path(manifest_dir) / sp).string()));
  ex.gains_db = e.gains_db;
  ex.speaker_ids = e.speaker_ids;
  ex.seed = e.seed;
  return ex;
}

}  // namespace corfsep::mixsim
