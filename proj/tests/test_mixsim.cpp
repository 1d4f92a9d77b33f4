#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>

#include "corfsep/error.hpp"
#include "corfsep/mixsim.hpp"
#include "corfsep/rng.hpp"
#include "doctest.h"
#include "support/toy.hpp"

using namespace corfsep;
namespace fs = std::filesystem;

namespace {

double power(const std::vector<double>& x) {
  double e = 0.0;
  for (double v : x) e += v * v;
  return e / static_cast<double>(x.size());
}

audio::Waveform seconds_of_noise(double secs, uint64_t seed) {
  audio::Waveform w;
  w.rate = audio::kPipelineRate;
  Rng rng(seed);
  const int n = static_cast<int>(std::llround(secs * w.rate));
  for (int i = 0; i < n; ++i) w.samples.push_back(rng.uniform(-0.4, 0.4));
  return w;
}

}  // namespace

TEST_SUITE("mixsim") {
  TEST_CASE("segmentation examples") {
    // 6 s: windows at 0 s and 2 s cover everything, no trailing segment
    auto segs = mixsim::segment_utterance(seconds_of_noise(6.0, 1));
    REQUIRE(segs.size() == 2);
    CHECK(segs[0].samples.size() == 32000);
    CHECK(segs[1].samples.size() == 32000);

    // 3 s: no full window fits, one zero-padded segment
    segs = mixsim::segment_utterance(seconds_of_noise(3.0, 2));
    REQUIRE(segs.size() == 1);
    REQUIRE(segs[0].samples.size() == 32000);
    for (size_t i = 24000; i < 32000; ++i) CHECK(segs[0].samples[i] == 0.0);

    // 1.5 s: below the 2 s floor, discarded
    segs = mixsim::segment_utterance(seconds_of_noise(1.5, 3));
    CHECK(segs.empty());

    // 5 s: one full window plus a padded 3 s tail
    segs = mixsim::segment_utterance(seconds_of_noise(5.0, 4));
    REQUIRE(segs.size() == 2);
    for (size_t i = 24000; i < 32000; ++i) CHECK(segs[1].samples[i] == 0.0);

    // exactly 4 s: one window, nothing left over
    segs = mixsim::segment_utterance(seconds_of_noise(4.0, 5));
    CHECK(segs.size() == 1);
  }

  TEST_CASE("segment reconstruction inverts on the covered region") {
    for (double secs : {2.0, 3.3, 4.0, 5.1, 6.0, 7.7}) {
      const auto w = seconds_of_noise(secs, 17);
      const auto segs = mixsim::segment_utterance(w);
      REQUIRE(!segs.empty());
      const auto back = mixsim::reconstruct_segments(segs, w.samples.size());
      REQUIRE(back.samples.size() == w.samples.size());
      for (size_t i = 0; i < w.samples.size(); ++i) CHECK(back.samples[i] == w.samples[i]);
    }
  }

  TEST_CASE("segmentation rejects the wrong rate") {
    audio::Waveform w = seconds_of_noise(4.0, 6);
    w.rate = 16000;
    CHECK_THROWS_AS((void)mixsim::segment_utterance(w), Error);
  }

  TEST_CASE("mix honors the drawn level offsets exactly") {
    for (uint64_t seed : {11u, 12u, 13u}) {
      std::vector<audio::Waveform> sources;
      for (int s = 0; s < 3; ++s) {
        audio::Waveform w;
        w.rate = audio::kPipelineRate;
        w.samples = toytest::toy_utterance(s, 50 + seed, 8000);
        sources.push_back(std::move(w));
      }
      const auto ex = mixsim::mix(sources, 0.0, 5.0, seed);
      REQUIRE(ex.sources.size() == 3);
      REQUIRE(ex.gains_db.size() == 3);
      CHECK(ex.gains_db[0] == 0.0);

      // sum of scaled sources equals the mixture to near machine precision
      double num = 0.0, den = 0.0;
      for (size_t i = 0; i < ex.mixture.samples.size(); ++i) {
        double s = 0.0;
        for (const auto& src : ex.sources) s += src.samples[i];
        num += (s - ex.mixture.samples[i]) * (s - ex.mixture.samples[i]);
        den += ex.mixture.samples[i] * ex.mixture.samples[i];
      }
      CHECK(num <= 1e-12 * std::max(den, 1e-30));

      // measured level offsets match the recorded dB-below-first values
      const double p0 = power(ex.sources[0].samples);
      for (size_t s = 1; s < ex.sources.size(); ++s) {
        const double off = 10.0 * std::log10(p0 / power(ex.sources[s].samples));
        CHECK(std::fabs(off - ex.gains_db[s]) < 1e-9);
        CHECK(ex.gains_db[s] >= 0.0);
        CHECK(ex.gains_db[s] <= 5.0);
      }
    }
  }

  TEST_CASE("mix validation") {
    std::vector<audio::Waveform> sources;
    audio::Waveform w;
    w.rate = audio::kPipelineRate;
    w.samples.assign(4000, 0.0);  // silent source
    sources.push_back(w);
    sources.push_back(w);
    CHECK_THROWS_AS((void)mixsim::mix(sources, 0.0, 5.0, 1), Error);

    sources.clear();
    CHECK_THROWS_AS((void)mixsim::mix(sources, 0.0, 5.0, 1), Error);
  }

  TEST_CASE("corpus ingest and dataset build") {
    const std::string root = toytest::temp_dir("corpus");
    toytest::write_toy_corpus(root, 3, 2, 99);
    const auto index = mixsim::ingest_corpus(root);
    CHECK(index.num_speakers() == 3);
    CHECK(index.num_utterances() == 6);

    const std::string out = toytest::temp_dir("dataset");
    mixsim::BuildOptions opt;
    opt.n_speakers = 2;
    opt.count = 5;
    opt.seed = 7;
    const auto entries = mixsim::build_dataset(index, out, opt);
    REQUIRE(entries.size() == 5);
    for (const auto& e : entries) {
      REQUIRE(e.num_speakers() == 2);
      CHECK(e.speaker_ids[0] != e.speaker_ids[1]);
      const auto ex = mixsim::load_example(out, e);
      REQUIRE(ex.sources.size() == 2);
      REQUIRE(ex.mixture.samples.size() == ex.sources[0].samples.size());

      // files round-trip through 16-bit PCM, so allow quantization error
      double err = 0.0, den = 0.0;
      for (size_t i = 0; i < ex.mixture.samples.size(); ++i) {
        const double s = ex.sources[0].samples[i] + ex.sources[1].samples[i];
        err += (s - ex.mixture.samples[i]) * (s - ex.mixture.samples[i]);
        den += ex.mixture.samples[i] * ex.mixture.samples[i];
      }
      CHECK(err <= 1e-6 * std::max(den, 1e-30));

      // measured offset vs the manifest record, within its stored precision
      const double off =
          10.0 * std::log10(power(ex.sources[0].samples) / power(ex.sources[1].samples));
      CHECK(std::fabs(off - e.gains_db[1]) < 0.01);
    }

    // deterministic rebuild produces a byte-identical manifest
    const std::string out2 = toytest::temp_dir("dataset2");
    (void)mixsim::build_dataset(index, out2, opt);
    std::ifstream f1(out + "/manifest.tsv", std::ios::binary);
    std::ifstream f2(out2 + "/manifest.tsv", std::ios::binary);
    std::string b1((std::istreambuf_iterator<char>(f1)), {});
    std::string b2((std::istreambuf_iterator<char>(f2)), {});
    CHECK(b1 == b2);
    CHECK(!b1.empty());
  }

  TEST_CASE("ingest failure modes") {
    const std::string empty_root = toytest::temp_dir("empty-corpus");
    CHECK_THROWS_AS((void)mixsim::ingest_corpus(empty_root), Error);

    const std::string one = toytest::temp_dir("one-speaker");
    toytest::write_toy_corpus(one, 1, 2, 5);
    CHECK_THROWS_AS((void)mixsim::ingest_corpus(one), Error);

    const std::string two = toytest::temp_dir("two-speaker");
    toytest::write_toy_corpus(two, 2, 2, 6);
    const auto index = mixsim::ingest_corpus(two);
    mixsim::BuildOptions opt;
    opt.n_speakers = 3;
    opt.count = 1;
    CHECK_THROWS_AS((void)mixsim::build_dataset(index, toytest::temp_dir("ds-fail"), opt), Error);
  }
}
