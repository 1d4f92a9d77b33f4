#include <filesystem>
#include <fstream>

#include "corfsep/checkpoint.hpp"
#include "corfsep/error.hpp"
#include "corfsep/rng.hpp"
#include "corfsep/separator.hpp"
#include "doctest.h"
#include "support/toy.hpp"

using namespace corfsep;
using nn::Tensor;
namespace fs = std::filesystem;

namespace {

audio::Waveform toy_wave(int speaker, uint64_t seed, int len) {
  audio::Waveform w;
  w.rate = audio::kPipelineRate;
  w.samples = toytest::toy_utterance(speaker, seed, len);
  return w;
}

Tensor random_features(Rng& rng, int frames, int dim) {
  Tensor t = Tensor::zeros(frames, dim);
  for (double& v : t.d) v = rng.uniform(-2.0, 2.0);
  return t;
}

}  // namespace

TEST_SUITE("separator") {
  TEST_CASE("config validation") {
    sep::SeparatorConfig c = toytest::tiny_config();
    CHECK_NOTHROW(c.validate());

    c.encoder_window = 3;
    c.encoder_stride = 3;  // odd windows use stride == window
    CHECK_NOTHROW(c.validate());
    c.encoder_stride = 1;
    CHECK_THROWS_AS(c.validate(), Error);

    c = toytest::tiny_config();
    c.encoder_stride = c.encoder_window;  // even windows demand half overlap
    CHECK_THROWS_AS(c.validate(), Error);

    c = toytest::tiny_config();
    c.chunk_size = 5;
    CHECK_THROWS_AS(c.validate(), Error);

    c = toytest::tiny_config();
    c.num_blocks = 0;
    CHECK_THROWS_AS(c.validate(), Error);
  }

  TEST_CASE("encoder frame count follows the window arithmetic") {
    const auto cfg = toytest::tiny_config();
    auto model = sep::SeparatorModel::init(cfg, 1);
    for (int len = cfg.encoder_window; len < cfg.encoder_window + 80; len += 7) {
      const auto fm = model.encode(toy_wave(0, 3, len));
      const int expect = (len - cfg.encoder_window) / cfg.encoder_stride + 1;
      CHECK(fm.values.rows == expect);
      CHECK(fm.values.cols == cfg.feature_dim);
      CHECK(fm.source_len == len);
    }
    audio::Waveform tiny;
    tiny.rate = audio::kPipelineRate;
    tiny.samples.assign(cfg.encoder_window - 1, 0.1);
    CHECK_THROWS_AS((void)model.encode(tiny), Error);
  }

  TEST_CASE("chunk merge round trip is exact") {
    Rng rng(71);
    for (int chunk : {4, 8, 32}) {
      for (int frames = 1; frames <= 200; ++frames) {
        const auto plan = sep::plan_chunks(frames, chunk);
        const int hop = chunk / 2;
        CHECK(plan.num_chunks == (frames + hop - 1) / hop);
        const Tensor f = random_features(rng, frames, 3);
        const Tensor rows = sep::chunk_to_rows(f, plan);
        CHECK(rows.rows == plan.num_chunks * chunk);
        const Tensor back = sep::merge_rows(rows, plan);
        REQUIRE(back.rows == frames);
        bool equal = true;
        for (size_t i = 0; i < f.d.size(); ++i) equal = equal && back.d[i] == f.d[i];
        CHECK(equal);
      }
    }
  }

  TEST_CASE("separation preserves length and is deterministic") {
    auto model = sep::SeparatorModel::init(toytest::tiny_config(), 5);
    const auto x = toy_wave(1, 9, 1000);
    const auto [cue, res] = model.separate2(x);
    CHECK(cue.samples.size() == x.samples.size());
    CHECK(res.samples.size() == x.samples.size());
    CHECK(cue.rate == x.rate);
    const auto [cue2, res2] = model.separate2(x);
    CHECK(cue.samples == cue2.samples);
    CHECK(res.samples == res2.samples);
  }

  TEST_CASE("a zeroed block is the identity") {
    const auto cfg2 = toytest::tiny_config();
    auto a = sep::SeparatorModel::init(cfg2, 21);

    sep::SeparatorConfig cfg1 = cfg2;
    cfg1.num_blocks = 1;
    auto b = sep::SeparatorModel::init(cfg1, 22);
    for (const auto& name : b.params.names())
      b.params.get(name)->value = a.params.get(name)->value;
    for (const auto& name : a.params.names())
      if (name.rfind("block1.", 0) == 0)
        a.params.get(name)->value = Tensor(a.params.get(name)->value.rows,
                                           a.params.get(name)->value.cols);

    const auto x = toy_wave(2, 30, 800);
    const auto [ca, ra] = a.separate2(x);
    const auto [cb, rb] = b.separate2(x);
    CHECK(ca.samples == cb.samples);
    CHECK(ra.samples == rb.samples);
  }

  TEST_CASE("stage-2 shaped models share the stage-1 weight stream") {
    const auto cfg = toytest::tiny_config(1);
    auto plain = sep::SeparatorModel::init(cfg, 77);
    auto conditioned = sep::SeparatorModel::init(cfg, 77, {1, 2});
    CHECK(conditioned.has_cue_encoder());
    CHECK(!plain.has_cue_encoder());
    for (const auto& name : plain.params.names()) {
      const auto& pa = plain.params.get(name)->value;
      const auto& pb = conditioned.params.get(name)->value;
      REQUIRE(pa.d.size() == pb.d.size());
      CHECK(pa.d == pb.d);
    }
  }

  TEST_CASE("param store bookkeeping") {
    auto model = sep::SeparatorModel::init(toytest::tiny_config(1), 3, {1});
    CHECK_THROWS_AS((void)model.params.get("no.such.param"), Error);
    const auto trainable = model.params.trainable();
    for (const auto& v : trainable) CHECK(v->requires_grad);
    // the borrowed cue encoder never trains
    CHECK(!model.params.get("cue_enc.w")->requires_grad);
    bool cue_in_trainable = false;
    for (const auto& v : trainable)
      if (v == model.params.get("cue_enc.w")) cue_in_trainable = true;
    CHECK(!cue_in_trainable);
  }

  TEST_CASE("checkpoint round trip") {
    const std::string dir = toytest::temp_dir("ckpt");
    auto model = sep::SeparatorModel::init(toytest::tiny_config(), 13);
    const std::string p1 = dir + "/m.ckpt";
    const std::string digest = ckpt::save_separator(p1, model, "stage1");
    CHECK(digest.size() == 16);
    CHECK(digest == ckpt::file_digest(p1));

    auto loaded = ckpt::load_separator(p1);
    CHECK(loaded.kind == "stage1");
    CHECK(loaded.digest == digest);
    CHECK(loaded.model.cfg == model.cfg);
    for (const auto& name : model.params.names()) {
      CHECK(loaded.model.params.get(name)->value.d == model.params.get(name)->value.d);
      CHECK(loaded.model.params.get(name)->requires_grad ==
            model.params.get(name)->requires_grad);
    }

    // canonical bytes: saving the loaded model reproduces the file exactly
    const std::string p2 = dir + "/m2.ckpt";
    (void)ckpt::save_separator(p2, loaded.model, loaded.kind);
    std::ifstream f1(p1, std::ios::binary), f2(p2, std::ios::binary);
    std::string b1((std::istreambuf_iterator<char>(f1)), {});
    std::string b2((std::istreambuf_iterator<char>(f2)), {});
    CHECK(b1 == b2);

    // behavior survives the round trip
    const auto x = toy_wave(0, 4, 600);
    const auto [c1, r1] = model.separate2(x);
    const auto [c2, r2] = loaded.model.separate2(x);
    CHECK(c1.samples == c2.samples);
    CHECK(r1.samples == r2.samples);
  }

  TEST_CASE("checkpoint corruption is rejected") {
    const std::string dir = toytest::temp_dir("ckpt-bad");
    CHECK_THROWS_AS((void)ckpt::load_separator(dir + "/missing.ckpt"), Error);

    const std::string junk = dir + "/junk.ckpt";
    { std::ofstream(junk, std::ios::binary) << "definitely not a checkpoint"; }
    CHECK_THROWS_AS((void)ckpt::load_separator(junk), Error);

    auto model = sep::SeparatorModel::init(toytest::grad_config(), 1);
    const std::string good = dir + "/good.ckpt";
    (void)ckpt::save_separator(good, model, "stage1");
    std::string bytes;
    {
      std::ifstream f(good, std::ios::binary);
      bytes.assign((std::istreambuf_iterator<char>(f)), {});
    }
    { std::ofstream(dir + "/short.ckpt", std::ios::binary) << bytes.substr(0, bytes.size() / 2); }
    CHECK_THROWS_AS((void)ckpt::load_separator(dir + "/short.ckpt"), Error);
  }

  TEST_CASE("stop classifier thresholds and determinism") {
    const auto cfg = toytest::tiny_config();
    auto model = sep::SeparatorModel::init(cfg, 2);
    sep::StopClassifierConfig sc;
    sc.hidden_dim = 8;
    sc.threshold = 1e-9;
    auto clf = sep::StopClassifier::init(sc, cfg, model.params.get("enc.w")->value, 3);

    const auto w = toy_wave(3, 8, 700);
    const double p = clf.continue_probability(w);
    CHECK(p >= 0.0);
    CHECK(p <= 1.0);
    CHECK(clf.continue_probability(w) == p);

    // a vanishing threshold continues on anything
    CHECK(clf.should_continue(w).first);
    // probability of the chosen class is reported as confidence
    const auto [cont, conf] = clf.should_continue(w);
    CHECK(conf == doctest::Approx(cont ? p : 1.0 - p));

    sc.threshold = 1.0 - 1e-9;
    auto strict = sep::StopClassifier::init(sc, cfg, model.params.get("enc.w")->value, 3);
    CHECK(!strict.should_continue(w).first);

    // the boundary values make the rule degenerate and are rejected
    for (double bad : {0.0, 1.0, 1.5, -0.25}) {
      sc.threshold = bad;
      CHECK_THROWS_AS(sc.validate(), Error);
    }
  }

  TEST_CASE("stop checkpoint round trip") {
    const std::string dir = toytest::temp_dir("stop-ckpt");
    const auto cfg = toytest::tiny_config();
    auto model = sep::SeparatorModel::init(cfg, 2);
    const std::string s1 = dir + "/s1.ckpt";
    const std::string s1_digest = ckpt::save_separator(s1, model, "stage1");

    sep::StopClassifierConfig sc;
    sc.hidden_dim = 8;
    auto clf = sep::StopClassifier::init(sc, cfg, model.params.get("enc.w")->value, 3);
    const std::string sp = dir + "/stop.ckpt";
    (void)ckpt::save_stop(sp, clf, s1_digest);

    auto loaded = ckpt::load_stop(sp);
    CHECK(loaded.stage1_digest == s1_digest);
    const auto w = toy_wave(4, 6, 500);
    CHECK(loaded.classifier.continue_probability(w) == clf.continue_probability(w));
  }
}
