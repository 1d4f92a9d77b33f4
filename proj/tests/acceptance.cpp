// Acceptance gate: eleven end-to-end checks, one line of output each.
// Exit status is the number of failed checks. The later checks train real
// models on synthetic material and share them, so the binary runs minutes,
// not seconds. CORFSEP_CLI must point at the command-line binary for the
// rerun-determinism check.

#include <sys/wait.h>

#include <algorithm>
#include <chrono>
#include <cstdarg>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "corfsep/audio.hpp"
#include "corfsep/checkpoint.hpp"
#include "corfsep/error.hpp"
#include "corfsep/extractor.hpp"
#include "corfsep/manifest.hpp"
#include "corfsep/metrics.hpp"
#include "corfsep/mixsim.hpp"
#include "corfsep/pipeline.hpp"
#include "corfsep/rng.hpp"
#include "corfsep/separator.hpp"
#include "corfsep/train.hpp"
#include "support/toy.hpp"

using namespace corfsep;
using nn::Tensor;
using nn::Var;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, ...) {
  char buf[512];
  va_list ap;
  va_start(ap, f);
  vsnprintf(buf, sizeof buf, f, ap);
  va_end(ap);
  return buf;
}

// Trained models handed from one check to the next.
struct Shared {
  std::optional<sep::SeparatorModel> stage1;        // two-speaker toy training
  std::optional<sep::SeparatorModel> stage1_fine;   // after residual finetuning
  std::optional<sep::SeparatorModel> stage2;        // best refinement seed
  std::optional<sep::StopClassifier> stop;
  double stage1_train_si_snri = 0.0;
};

std::vector<double> rand_vec(Rng& rng, int len, double lo = -1.0, double hi = 1.0) {
  std::vector<double> v(len);
  for (auto& x : v) x = rng.uniform(lo, hi);
  return v;
}

Var leaf_row(const std::vector<double>& v, bool requires_grad) {
  return nn::make_leaf(Tensor::row(v), requires_grad);
}

// ---------------------------------------------------------------------------
// 1. the worked SI-SNR example

Outcome check_hand_oracle() {
  const std::vector<double> est{1.0, 0.0, 0.0};
  const std::vector<double> ref{1.0, -1.0, 0.0};
  // mean-normalized: est-1/3, ref has zero mean already; projection leaves a
  // target/noise energy ratio of 3.
  const double expected = 10.0 * std::log10(3.0);
  const double got = metrics::si_snr(est, ref);
  const double err = std::fabs(got - expected);
  return {err <= 1e-6, fmt("si-snr %.12f dB vs %.12f, |err| %.2e (tol 1e-6)", got, expected, err)};
}

// ---------------------------------------------------------------------------
// 2. invariance to scaling and constant shifts of the estimate

Outcome check_scale_shift() {
  Rng rng(1002);
  double worst = 0.0;
  for (int t = 0; t < 1000; ++t) {
    const int len = 16 + static_cast<int>(rng.below(240));
    const auto ref = rand_vec(rng, len);
    const auto est = rand_vec(rng, len);
    const double base = metrics::si_snr(est, ref);
    const double a = rng.uniform(0.05, 20.0) * (rng.below(2) ? 1.0 : -1.0);
    const double b = rng.uniform(-3.0, 3.0);
    auto mod = est;
    for (auto& x : mod) x = a * x + b;
    worst = std::max(worst, std::fabs(metrics::si_snr(mod, ref) - base));
  }
  return {worst <= 1e-6, fmt("1000 cases, worst |delta| %.2e (tol 1e-6)", worst)};
}

// ---------------------------------------------------------------------------
// 3. recursive-assignment loss: permutation invariance and minimality

Outcome check_orpit_properties() {
  Rng rng(1003);
  int bad_perm = 0, bad_min = 0;
  for (int t = 0; t < 500; ++t) {
    const int n = 2 + (t % 3);
    const int len = 120 + static_cast<int>(rng.below(80));
    std::vector<std::vector<double>> refs(n);
    for (auto& r : refs) r = rand_vec(rng, len);
    auto cue = refs[rng.below(static_cast<uint64_t>(n))];
    for (auto& x : cue) x += 0.25 * rng.uniform(-1.0, 1.0);
    std::vector<double> res(len, 0.0);
    for (int i = 0; i < n; ++i)
      for (int k = 0; k < len; ++k) res[k] += 0.5 * refs[i][k];
    for (auto& x : res) x += 0.25 * rng.uniform(-1.0, 1.0);

    const auto cue_v = nn::constant(Tensor::row(cue));
    const auto res_v = nn::constant(Tensor::row(res));
    const double base = train::orpit_loss(cue_v, res_v, refs).loss->value.at(0, 0);

    for (int s = 0; s < 3; ++s) {
      auto shuffled = refs;
      rng.shuffle(shuffled);
      const double v = train::orpit_loss(cue_v, res_v, shuffled).loss->value.at(0, 0);
      if (v != base) ++bad_perm;  // bit-identical, no tolerance
    }

    for (int i = 0; i < n; ++i) {
      std::vector<double> rest(len, 0.0);
      for (int j = 0; j < n; ++j)
        if (j != i)
          for (int k = 0; k < len; ++k) rest[k] += refs[j][k];
      const double fixed =
          -metrics::si_snr(cue, refs[i]) - metrics::si_snr(res, rest) / (n - 1);
      if (base > fixed + 1e-12) ++bad_min;
    }
  }
  return {bad_perm == 0 && bad_min == 0,
          fmt("500 draws: %d permutation mismatches, %d minimality violations", bad_perm, bad_min)};
}

// ---------------------------------------------------------------------------
// 4. analytic gradients against central finite differences

struct FdStats {
  double worst_rel = 0.0;
  int checked = 0;
  int failures = 0;
  bool argmin_stable = true;
};

// rel error with an absolute floor so FD noise at true zeros cannot fail.
bool fd_close(double ad, double fd, double rel_tol, double abs_tol, double* worst) {
  const double diff = std::fabs(ad - fd);
  if (diff <= abs_tol) return true;
  const double rel = diff / std::max({std::fabs(ad), std::fabs(fd), 1e-12});
  *worst = std::max(*worst, rel);
  return rel <= rel_tol;
}

Outcome check_gradients() {
  Rng rng(1004);

  // Loss gradients w.r.t. both waveform inputs.
  FdStats ls;
  {
    const int len = 96;
    std::vector<std::vector<double>> refs(3);
    for (int i = 0; i < 3; ++i) refs[i] = toytest::toy_utterance(i, 41 + i, len);
    auto cue_data = refs[0];
    for (auto& x : cue_data) x += 0.1 * rng.uniform(-1.0, 1.0);
    std::vector<double> res_data(len, 0.0);
    for (int k = 0; k < len; ++k) res_data[k] = refs[1][k] + refs[2][k] + 0.05 * rng.uniform(-1.0, 1.0);

    auto cue = leaf_row(cue_data, true);
    auto res = leaf_row(res_data, true);
    const auto base = train::orpit_loss(cue, res, refs);
    nn::backward(base.loss);

    const double h = 1e-6;
    auto probe = [&](std::vector<double>& vec, int k) {
      nn::NoGradGuard ng;
      const double keep = vec[k];
      vec[k] = keep + h;
      auto hi = train::orpit_loss(leaf_row(cue_data, false), leaf_row(res_data, false), refs);
      vec[k] = keep - h;
      auto lo = train::orpit_loss(leaf_row(cue_data, false), leaf_row(res_data, false), refs);
      vec[k] = keep;
      if (hi.argmin != base.argmin || lo.argmin != base.argmin) ls.argmin_stable = false;
      return (hi.loss->value.at(0, 0) - lo.loss->value.at(0, 0)) / (2.0 * h);
    };
    for (int k = 0; k < len; ++k) {
      ++ls.checked;
      if (!fd_close(cue->grad.at(0, k), probe(cue_data, k), 1e-4, 1e-9, &ls.worst_rel)) ++ls.failures;
      ++ls.checked;
      if (!fd_close(res->grad.at(0, k), probe(res_data, k), 1e-4, 1e-9, &ls.worst_rel)) ++ls.failures;
    }
  }

  // Network gradients: every trainable parameter of a small two-output model
  // through the full forward pass and the assignment loss.
  FdStats ns;
  {
    const int len = 64;
    auto model = sep::SeparatorModel::init(toytest::grad_config(2), 31);
    std::vector<std::vector<double>> refs{toytest::toy_utterance(0, 51, len),
                                          toytest::toy_utterance(3, 52, len)};
    std::vector<double> mix(len, 0.0);
    for (int k = 0; k < len; ++k) mix[k] = refs[0][k] + refs[1][k];

    auto loss_of = [&](bool grad) {
      auto x = leaf_row(mix, false);
      (void)grad;
      auto outs = model.forward(x);
      return train::orpit_loss(outs[0], outs[1], refs);
    };

    auto base = loss_of(true);
    const int base_argmin = base.argmin;
    nn::backward(base.loss);
    // keep leaf gradients, drop the graph before thousands of FD passes
    nn::release_graph(base.loss);

    const double h = 1e-5;
    for (const auto& p : model.params.trainable()) {
      for (size_t e = 0; e < p->value.d.size(); ++e) {
        const double keep = p->value.d[e];
        double vhi, vlo;
        {
          nn::NoGradGuard ng;
          p->value.d[e] = keep + h;
          auto hi = loss_of(false);
          p->value.d[e] = keep - h;
          auto lo = loss_of(false);
          p->value.d[e] = keep;
          if (hi.argmin != base_argmin || lo.argmin != base_argmin) ns.argmin_stable = false;
          vhi = hi.loss->value.at(0, 0);
          vlo = lo.loss->value.at(0, 0);
        }
        const double fd = (vhi - vlo) / (2.0 * h);
        ++ns.checked;
        if (!fd_close(p->grad.d[e], fd, 1e-3, 1e-7, &ns.worst_rel)) ++ns.failures;
      }
    }
  }

  const bool pass = ls.failures == 0 && ns.failures == 0 && ls.argmin_stable && ns.argmin_stable;
  return {pass, fmt("loss: %d coords, %d fail, worst rel %.1e (tol 1e-4); "
                    "network: %d params, %d fail, worst rel %.1e (tol 1e-3)%s",
                    ls.checked, ls.failures, ls.worst_rel, ns.checked, ns.failures, ns.worst_rel,
                    (ls.argmin_stable && ns.argmin_stable) ? "" : "; UNSTABLE argmin")};
}

// ---------------------------------------------------------------------------
// 5. lossless plumbing: chunking, files, manifests

Outcome check_round_trips() {
  Rng rng(1005);

  for (int frames = 1; frames <= 1000; ++frames) {
    const auto plan = sep::plan_chunks(frames, 32);
    Tensor t(frames, 3);
    for (auto& x : t.d) x = rng.uniform(-2.0, 2.0);
    const Tensor back = sep::merge_rows(sep::chunk_to_rows(t, plan), plan);
    if (back.d != t.d || back.rows != t.rows)
      return {false, fmt("chunk round trip broke at %d frames", frames)};
  }

  const std::string dir = toytest::temp_dir("accept-roundtrip");
  for (int t = 0; t < 40; ++t) {
    const int len = 1 + static_cast<int>(rng.below(4000));
    audio::Waveform w{rand_vec(rng, len, -1.2, 1.2), audio::kPipelineRate};
    const std::string p1 = dir + "/a.wav", p2 = dir + "/b.wav";
    audio::write_wav(p1, w);
    const auto r1 = audio::read_wav(p1);
    audio::write_wav(p2, r1);
    const auto r2 = audio::read_wav(p2);
    if (r1.samples != r2.samples) return {false, fmt("wav quantization not idempotent at len %d", len)};
    std::ifstream f1(p1, std::ios::binary), f2(p2, std::ios::binary);
    std::string b1((std::istreambuf_iterator<char>(f1)), {}), b2((std::istreambuf_iterator<char>(f2)), {});
    if (b1 != b2) return {false, fmt("wav bytes drifted on rewrite at len %d", len)};
  }

  std::vector<audio::ManifestEntry> entries;
  for (int k = 0; k < 6; ++k) {
    audio::ManifestEntry e;
    e.mixture_path = fmt("mix_%d.wav", k);
    const int n = 2 + k % 3;
    for (int s = 0; s < n; ++s) {
      e.source_paths.push_back(fmt("s%d/src_%d.wav", s + 1, k));
      e.speaker_ids.push_back(fmt("spk%02d", 7 * k + s));
      e.gains_db.push_back(0.25 * s + k);
    }
    e.seed = 1000 + static_cast<uint64_t>(k);
    entries.push_back(e);
  }
  const std::string m1 = dir + "/m1.tsv", m2 = dir + "/m2.tsv";
  audio::save_manifest(m1, entries);
  const auto loaded = audio::load_manifest(m1);
  audio::save_manifest(m2, loaded);
  std::ifstream g1(m1, std::ios::binary), g2(m2, std::ios::binary);
  std::string mb1((std::istreambuf_iterator<char>(g1)), {}), mb2((std::istreambuf_iterator<char>(g2)), {});
  if (loaded.size() != entries.size() || mb1 != mb2) return {false, "manifest round trip drifted"};
  for (size_t i = 0; i < entries.size(); ++i) {
    if (loaded[i].mixture_path != entries[i].mixture_path ||
        loaded[i].speaker_ids != entries[i].speaker_ids || loaded[i].seed != entries[i].seed)
      return {false, fmt("manifest entry %zu corrupted", i)};
    for (size_t s = 0; s < entries[i].gains_db.size(); ++s)
      if (std::fabs(loaded[i].gains_db[s] - entries[i].gains_db[s]) > 1e-9)
        return {false, fmt("manifest gain drifted at entry %zu", i)};
  }

  return {true, "chunk merge exact for 1..1000 frames; wav and manifest stable"};
}

// ---------------------------------------------------------------------------
// 6. simulated mixtures: exact sums, recorded level offsets, segmentation

Outcome check_simulation() {
  const std::string dir = toytest::temp_dir("accept-sim");
  toytest::write_toy_corpus(dir + "/corpus", 4, 3, 1006);
  const auto index = mixsim::ingest_corpus(dir + "/corpus");

  mixsim::BuildOptions opt;
  opt.n_speakers = 2;
  opt.count = 12;
  opt.snr_lo_db = 0.0;
  opt.snr_hi_db = 5.0;
  opt.seed = 1006;
  const auto entries = mixsim::build_dataset(index, dir + "/out", opt);
  if (entries.size() != 12) return {false, fmt("expected 12 mixtures, built %zu", entries.size())};

  double worst_sum = 0.0, worst_off = 0.0;
  for (const auto& e : entries) {
    const auto ex = mixsim::load_example(dir + "/out", e);
    double peak = 1e-12, sum_err = 0.0;
    for (size_t k = 0; k < ex.mixture.samples.size(); ++k) {
      double s = 0.0;
      for (const auto& src : ex.sources) s += src.samples[k];
      peak = std::max(peak, std::fabs(ex.mixture.samples[k]));
      sum_err = std::max(sum_err, std::fabs(ex.mixture.samples[k] - s));
    }
    worst_sum = std::max(worst_sum, sum_err / peak);

    auto power = [](const std::vector<double>& v) {
      double p = 0.0;
      for (double x : v) p += x * x;
      return p / static_cast<double>(v.size());
    };
    const double p0 = power(ex.sources[0].samples);
    for (size_t s = 0; s < ex.sources.size(); ++s) {
      const double off = 10.0 * std::log10(p0 / power(ex.sources[s].samples));
      worst_off = std::max(worst_off, std::fabs(off - e.gains_db[s]));
    }
  }

  // window 4 s, hop 2 s; a partly covered tail of at least 2 s is padded out
  auto segs = [&](double seconds) {
    audio::Waveform w{toytest::toy_utterance(1, 99, static_cast<int>(seconds * audio::kPipelineRate)),
                      audio::kPipelineRate};
    return mixsim::segment_utterance(w).size();
  };
  const bool seg_ok = segs(6.0) == 2 && segs(3.0) == 1 && segs(1.5) == 0 && segs(5.0) == 2;

  const bool pass = worst_sum <= 1e-6 && worst_off <= 0.01 && seg_ok;
  return {pass, fmt("12 mixtures: worst rel sum error %.1e (tol 1e-6), worst offset error "
                    "%.4f dB (tol 0.01); segment counts %s",
                    worst_sum, worst_off, seg_ok ? "as documented" : "WRONG")};
}

// ---------------------------------------------------------------------------
// 7. two-speaker toy training reaches 5 dB improvement

double mean_train_si_snri(const sep::SeparatorModel& model, const std::vector<train::TrainItem>& items) {
  double acc = 0.0;
  for (const auto& it : items) {
    const auto [cue, res] = model.separate2(audio::Waveform{it.mix, audio::kPipelineRate});
    const auto rep = metrics::best_permutation_alignment({cue.samples, res.samples}, it.refs, it.mix);
    acc += rep.mean_si_snr_improvement_db.value();
  }
  return acc / static_cast<double>(items.size());
}

Outcome check_toy_training(Shared& sh) {
  const auto items = toytest::toy_items(2, 8, 501, 1600);
  const auto valid = toytest::toy_items(2, 4, 502, 1600);

  auto model = sep::SeparatorModel::init(toytest::tiny_config(2), 7);
  train::TrainConfig cfg;
  cfg.initial_lr = 2e-3;
  cfg.lr_halving_patience = 10;
  cfg.batch_size = 2;
  cfg.max_epochs = 500;
  cfg.max_steps = 2000;
  cfg.seed = 7;
  const auto out = train::train_stage1(model, items, valid, cfg);

  const double si = mean_train_si_snri(model, items);
  sh.stage1 = std::move(model);
  sh.stage1_train_si_snri = si;
  const bool pass = !out.diverged && out.steps <= 2000 && si >= 5.0;
  return {pass, fmt("mean si-snri %.2f dB over 8 mixtures (need 5.0) after %d steps%s", si,
                    out.steps, out.diverged ? "; DIVERGED" : "")};
}

// ---------------------------------------------------------------------------
// 8. conditioned refinement beats the coarse pass it refines

std::vector<audio::Waveform> coarse_cues3(const sep::SeparatorModel& s1, const audio::Waveform& x) {
  const auto [c1, r1] = s1.separate2(x);
  const auto [c2, r2] = s1.separate2(r1);
  return {c1, c2, r2};
}

Outcome check_refinement(Shared& sh) {
  if (!sh.stage1) return {false, "no trained two-speaker model to start from"};
  const auto three_train = toytest::toy_items(3, 48, 601, 1600);
  const auto three_eval = toytest::toy_items(3, 16, 602, 1600);
  // early stopping looks at its own small set so the scored set stays untouched
  const auto three_valid = toytest::toy_items(3, 8, 603, 1600);

  // deep copy through the serialized form, then adapt to 3-speaker residuals
  const std::string dir = toytest::temp_dir("accept-refine");
  (void)ckpt::save_separator(dir + "/s1.ckpt", *sh.stage1, "stage1");
  auto fine = ckpt::load_separator(dir + "/s1.ckpt").model;
  train::TrainConfig fcfg;
  fcfg.initial_lr = 1e-3;
  fcfg.lr_halving_patience = 6;
  fcfg.batch_size = 2;
  fcfg.max_epochs = 60;
  fcfg.seed = 8;
  const auto fout = train::finetune_stage1(fine, three_train, three_valid, fcfg);
  if (fout.diverged) return {false, "residual finetuning diverged"};

  double coarse_mean = 0.0;
  for (const auto& it : three_eval) {
    const audio::Waveform x{it.mix, audio::kPipelineRate};
    const auto cues = coarse_cues3(fine, x);
    std::vector<std::vector<double>> est;
    for (const auto& c : cues) est.push_back(c.samples);
    coarse_mean += metrics::best_permutation_alignment(est, it.refs, it.mix)
                       .mean_si_snr_improvement_db.value();
  }
  coarse_mean /= static_cast<double>(three_eval.size());

  int strictly_better = 0;
  double fine_sum = 0.0;
  double best_fine = -1e300;
  std::optional<sep::SeparatorModel> best_model;
  std::string per_seed;
  for (int s = 0; s < 10; ++s) {
    extractor::ConditionedConfig cond;
    cond.separator = toytest::tiny_config(1);
    cond.conditioning_blocks = {1, 2};
    auto stage2 = extractor::init_stage2(cond, fine, 900 + static_cast<uint64_t>(s));
    train::TrainConfig cfg;
    cfg.initial_lr = 2e-3;
    cfg.lr_halving_patience = 8;
    cfg.batch_size = 4;
    cfg.max_epochs = 100;
    cfg.max_steps = 1400;
    cfg.seed = 900 + static_cast<uint64_t>(s);
    const auto out = extractor::train_stage2(stage2, fine, three_train, three_valid, cfg);
    if (out.diverged) return {false, fmt("refinement training diverged on seed %d", s)};

    double fine_mean = 0.0;
    for (const auto& it : three_eval) {
      const audio::Waveform x{it.mix, audio::kPipelineRate};
      std::vector<std::vector<double>> est;
      for (const auto& cue : coarse_cues3(fine, x)) est.push_back(stage2.extract(x, cue).samples);
      fine_mean += metrics::best_permutation_alignment(est, it.refs, it.mix)
                       .mean_si_snr_improvement_db.value();
    }
    fine_mean /= static_cast<double>(three_eval.size());

    fine_sum += fine_mean;
    if (fine_mean > coarse_mean) ++strictly_better;
    if (fine_mean > best_fine) {
      best_fine = fine_mean;
      best_model = std::move(stage2);
    }
    per_seed += fmt("%s%.2f", s ? "," : "", fine_mean);
  }

  sh.stage1_fine = std::move(fine);
  sh.stage2 = std::move(best_model);
  // the dominance floor binds the seed-averaged mean on the held-out set; the
  // per-seed quantifier is the strictly-greater count
  const double fine_avg = fine_sum / 10.0;
  const bool floor_ok = fine_avg >= coarse_mean - 0.5;
  const bool pass = floor_ok && strictly_better >= 6;
  return {pass, fmt("coarse %.2f dB; fine per seed [%s], avg %.2f; %d/10 strictly better "
                    "(need 6), avg floor coarse-0.5 %s",
                    coarse_mean, per_seed.c_str(), fine_avg, strictly_better,
                    floor_ok ? "held" : "BROKEN")};
}

// ---------------------------------------------------------------------------
// 9. repeat-or-stop accuracy on held-out residuals

Outcome check_stop_classifier(Shared& sh) {
  if (!sh.stage1_fine) return {false, "no finetuned model for residual features"};
  const auto& s1 = *sh.stage1_fine;

  auto mixed = [&](int n2, int n3, uint64_t seed) {
    auto a = toytest::toy_items(2, n2, seed, 1600);
    auto b = toytest::toy_items(3, n3, seed + 1, 1600);
    a.insert(a.end(), b.begin(), b.end());
    return a;
  };
  auto train_ex = train::build_stop_examples(s1, mixed(64, 64, 701), 701);
  const auto valid_ex = train::build_stop_examples(s1, mixed(8, 8, 703), 703);
  // digital silence is rare in the generated stream; weight it up so the
  // stop side of the decision sees it during every epoch
  for (int k = 0; k < 8; ++k)
    train_ex.push_back(train::StopExample{std::vector<double>(1600, 0.0), false});

  sep::StopClassifierConfig sc;
  sc.hidden_dim = 32;
  auto clf = sep::StopClassifier::init(sc, s1.cfg, s1.params.get("enc.w")->value, 709);
  // the head is tiny, so the lr schedule needs a long leash before halving;
  // an impatient schedule freezes it at chance on the hard one-speaker-left
  // boundary
  train::TrainConfig cfg;
  cfg.initial_lr = 4e-3;
  cfg.lr_halving_patience = 25;
  cfg.batch_size = 4;
  cfg.max_epochs = 300;
  cfg.seed = 709;
  const auto out = train::train_stop_classifier(clf, train_ex, valid_ex, cfg);

  const double acc = train::stop_accuracy(clf, valid_ex);
  const bool silence_stops =
      !clf.should_continue(audio::Waveform{std::vector<double>(1600, 0.0), audio::kPipelineRate}).first;
  sh.stop = std::move(clf);
  const bool pass = !out.diverged && acc >= 0.90 && silence_stops;
  return {pass, fmt("held-out accuracy %.3f over %zu examples (need 0.90); silence -> %s", acc,
                    valid_ex.size(), silence_stops ? "stop" : "CONTINUE")};
}

// ---------------------------------------------------------------------------
// 10. full pipeline counts speakers and degrades gracefully per iteration

std::string write_eval_set(const std::string& dir, const std::vector<train::TrainItem>& items,
                           uint64_t seed0) {
  std::filesystem::create_directories(dir);
  std::vector<audio::ManifestEntry> entries;
  for (size_t k = 0; k < items.size(); ++k) {
    const auto& it = items[k];
    audio::ManifestEntry e;
    e.mixture_path = fmt("mix_%zu.wav", k);
    audio::write_wav(dir + "/" + e.mixture_path, audio::Waveform{it.mix, audio::kPipelineRate});
    for (size_t s = 0; s < it.refs.size(); ++s) {
      e.source_paths.push_back(fmt("src_%zu_%zu.wav", k, s));
      e.speaker_ids.push_back(fmt("t%zu", s));
      e.gains_db.push_back(2.0 * static_cast<double>(s));
      audio::write_wav(dir + "/" + e.source_paths.back(),
                       audio::Waveform{it.refs[s], audio::kPipelineRate});
    }
    e.seed = seed0 + k;
    entries.push_back(e);
  }
  const std::string manifest = dir + "/manifest.tsv";
  audio::save_manifest(manifest, entries);
  return manifest;
}

Outcome check_counting(Shared& sh) {
  if (!sh.stage1_fine || !sh.stage2 || !sh.stop) return {false, "missing trained models"};
  pipeline::Models models{*sh.stage1_fine, *sh.stop, *sh.stage2};

  auto items = toytest::toy_items(2, 10, 801, 1600);
  auto three = toytest::toy_items(3, 10, 803, 1600);
  items.insert(items.end(), three.begin(), three.end());
  const std::string manifest = write_eval_set(toytest::temp_dir("accept-count"), items, 801);

  pipeline::EvalOptions opt;
  opt.separate.max_iterations = 6;
  const auto report = pipeline::evaluate(manifest, models, opt);

  bool monotone = true;
  std::string means;
  for (const auto& [n, by_iter] : report.per_iteration) {
    double prev = 1e300;
    means += fmt("%sN=%d:", means.empty() ? "" : " ", n);
    bool first = true;
    for (const auto& [j, m] : by_iter) {
      means += fmt("%s%.2f", first ? " " : ",", m);
      first = false;
      if (m > prev + 1e-12) monotone = false;
      prev = m;
    }
  }

  const bool pass = report.counting_accuracy >= 0.80 && monotone;
  return {pass, fmt("counting accuracy %.2f over %zu mixtures (need 0.80); per-iteration "
                    "means %s(%s)",
                    report.counting_accuracy, report.num_mixtures, means.c_str(),
                    monotone ? "non-increasing" : "INCREASING somewhere")};
}

// ---------------------------------------------------------------------------
// 11. identical bytes from identical command lines

int run_cmd(const std::string& cmd) {
  const int rc = std::system(cmd.c_str());
  return rc == -1 ? -1 : (WIFEXITED(rc) ? WEXITSTATUS(rc) : -2);
}

std::optional<std::string> slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in.good()) return std::nullopt;
  return std::string(std::istreambuf_iterator<char>(in), {});
}

Outcome check_cli_determinism(Shared& sh) {
  const char* cli = std::getenv("CORFSEP_CLI");
  if (!cli || !*cli) return {false, "CORFSEP_CLI is not set"};
  const std::string bin = cli;
  const std::string dir = toytest::temp_dir("accept-cli");

  auto run = [&](const std::string& args) {
    return run_cmd(bin + " " + args + " >/dev/null 2>" + dir + "/err.txt");
  };
  auto differ = [&](const std::string& a, const std::string& b) {
    const auto ba = slurp(a), bb = slurp(b);
    return !ba || !bb || *ba != *bb;
  };

  toytest::write_toy_corpus(dir + "/corpus", 3, 3, 1011);
  for (const char* out : {"sim1", "sim2"})
    if (run(fmt("simulate --corpus %s/corpus --count 4 --seed 5 --out %s/%s", dir.c_str(),
                dir.c_str(), out)) != 0)
      return {false, "simulate failed: " + slurp(dir + "/err.txt").value_or("(no stderr)")};
  if (differ(dir + "/sim1/manifest.tsv", dir + "/sim2/manifest.tsv"))
    return {false, "simulate manifests differ between reruns"};
  const auto sim_entries = audio::load_manifest(dir + "/sim1/manifest.tsv");
  if (differ(dir + "/sim1/" + sim_entries[0].mixture_path,
             dir + "/sim2/" + sim_entries[0].mixture_path))
    return {false, "simulated mixture files differ between reruns"};

  // short training manifest: four tiny two-speaker items
  const std::string tm =
      write_eval_set(dir + "/train-items", toytest::toy_items(2, 4, 811, 800), 811);
  {
    std::ofstream cfg(dir + "/train.json");
    cfg << "{\"separator\": {\"encoder_window\": 32, \"encoder_stride\": 16, \"feature_dim\": 24,"
        << " \"chunk_size\": 32, \"num_blocks\": 2, \"hidden_dim\": 16},\n"
        << " \"train\": {\"initial_lr\": 0.001, \"batch_size\": 2, \"max_epochs\": 2},\n"
        << " \"seed\": 5}\n";
  }
  for (const char* out : {"tr1", "tr2"})
    if (run(fmt("train-stage1 --config %s/train.json --train-manifest %s --valid-manifest %s "
                "--out %s/%s",
                dir.c_str(), tm.c_str(), tm.c_str(), dir.c_str(), out)) != 0)
      return {false, "train-stage1 failed: " + slurp(dir + "/err.txt").value_or("(no stderr)")};
  if (differ(dir + "/tr1/stage1.log", dir + "/tr2/stage1.log"))
    return {false, "training logs differ between reruns"};
  if (differ(dir + "/tr1/stage1.ckpt", dir + "/tr2/stage1.ckpt"))
    return {false, "checkpoints differ between reruns"};

  // evaluation over the models trained by the earlier checks
  if (!sh.stage1_fine || !sh.stage2 || !sh.stop) return {false, "missing trained models"};
  const std::string d1 = ckpt::save_separator(dir + "/s1.ckpt", *sh.stage1_fine, "stage1");
  (void)ckpt::save_stop(dir + "/stop.ckpt", *sh.stop, d1);
  (void)ckpt::save_separator(dir + "/s2.ckpt", *sh.stage2, "stage2", d1);
  const std::string em = write_eval_set(dir + "/eval-items", toytest::toy_items(2, 3, 821, 1600), 821);
  for (const char* out : {"ev1", "ev2"})
    if (run(fmt("evaluate --stage1 %s/s1.ckpt --stop-ckpt %s/stop.ckpt --stage2 %s/s2.ckpt "
                "--manifest %s --out %s/%s",
                dir.c_str(), dir.c_str(), dir.c_str(), em.c_str(), dir.c_str(), out)) != 0)
      return {false, "evaluate failed: " + slurp(dir + "/err.txt").value_or("(no stderr)")};
  if (differ(dir + "/ev1/records.txt", dir + "/ev2/records.txt") ||
      differ(dir + "/ev1/summary.txt", dir + "/ev2/summary.txt"))
    return {false, "evaluation reports differ between reruns"};

  return {true, "simulate, train-stage1 and evaluate rerun byte-identically"};
}

}  // namespace

int main() {
  Shared sh;
  struct Row {
    const char* label;
    std::function<Outcome()> fn;
  };
  const std::vector<Row> rows{
      {"si-snr worked example", [] { return check_hand_oracle(); }},
      {"scale and shift invariance", [] { return check_scale_shift(); }},
      {"assignment-loss properties", [] { return check_orpit_properties(); }},
      {"finite-difference gradients", [] { return check_gradients(); }},
      {"lossless round trips", [] { return check_round_trips(); }},
      {"mixture simulation", [] { return check_simulation(); }},
      {"two-speaker toy training", [&] { return check_toy_training(sh); }},
      {"conditioned refinement", [&] { return check_refinement(sh); }},
      {"repeat-or-stop accuracy", [&] { return check_stop_classifier(sh); }},
      {"speaker counting", [&] { return check_counting(sh); }},
      {"command-line determinism", [&] { return check_cli_determinism(sh); }},
  };

  int failures = 0;
  for (size_t i = 0; i < rows.size(); ++i) {
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = rows[i].fn();
    } catch (const std::exception& e) {
      o = {false, fmt("exception: %s", e.what())};
    }
    const double secs =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    std::printf("[%2zu] %s %s: %s (%.1f s)\n", i + 1, o.pass ? "PASS" : "FAIL", rows[i].label,
                o.detail.c_str(), secs);
    std::fflush(stdout);
    if (!o.pass) ++failures;
  }
  std::printf("acceptance: %zu/%zu checks passed\n", rows.size() - failures, rows.size());
  return failures;
}
