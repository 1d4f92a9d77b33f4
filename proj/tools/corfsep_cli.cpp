#include <cinttypes>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "corfsep/checkpoint.hpp"
#include "corfsep/extractor.hpp"
#include "corfsep/mixsim.hpp"
#include "corfsep/pipeline.hpp"
#include "corfsep/train.hpp"

namespace fs = std::filesystem;
using namespace corfsep;

namespace {

// Every knob a subcommand can consume. Built-in defaults, then config-file
// values, then explicitly passed flags, in that order.
struct RunConfig {
  sep::SeparatorConfig separator;
  extractor::ConditionedConfig ext;
  sep::StopClassifierConfig stop_cfg;
  train::TrainConfig train_cfg;

  std::string out;
  uint64_t seed = 0;
  int workers = 1;
  bool deterministic = true;

  std::string corpus;
  int n_speakers = 2;
  int count = 20;
  double snr_lo_db = 0.0;
  double snr_hi_db = 5.0;

  std::vector<std::string> train_manifests;
  std::vector<std::string> valid_manifests;
  std::string stage1_path, stop_path, stage2_path;
  std::string mixture_path, manifest_path;

  int max_iterations = 10;
  bool terminal_residual_as_cue = true;
  bool score_coarse = false;
};

void read_train_config(const nlohmann::json& j, train::TrainConfig& c) {
  c.initial_lr = j.value("initial_lr", c.initial_lr);
  c.lr_halving_patience = j.value("lr_halving_patience", c.lr_halving_patience);
  c.grad_clip_l2 = j.value("grad_clip_l2", c.grad_clip_l2);
  c.beta1 = j.value("beta1", c.beta1);
  c.beta2 = j.value("beta2", c.beta2);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.max_epochs = j.value("max_epochs", c.max_epochs);
  c.max_steps = j.value("max_steps", c.max_steps);
  c.seed = j.value("seed", c.seed);
}

void merge_config_file(RunConfig& c, const std::string& path) {
  std::ifstream in(path);
  if (!in) fail(Errc::file_missing, "config file not found: " + path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    fail(Errc::config_invalid, "config parse error in " + path + ": " + e.what());
  }
  const char* section = "";
  try {
    section = "separator";
    if (j.count("separator")) j.at("separator").get_to(c.separator);
    section = "extractor";
    if (j.count("extractor")) {
      const auto& je = j.at("extractor");
      if (je.count("separator")) je.at("separator").get_to(c.ext.separator);
      if (je.count("conditioning_blocks")) je.at("conditioning_blocks").get_to(c.ext.conditioning_blocks);
    }
    section = "stop";
    if (j.count("stop")) j.at("stop").get_to(c.stop_cfg);
    section = "train";
    if (j.count("train")) read_train_config(j.at("train"), c.train_cfg);
    section = "top-level";
    c.out = j.value("out", c.out);
    c.seed = j.value("seed", c.seed);
    c.workers = j.value("workers", c.workers);
    c.deterministic = j.value("deterministic", c.deterministic);
    section = "simulate";
    if (j.count("simulate")) {
      const auto& js = j.at("simulate");
      c.corpus = js.value("corpus", c.corpus);
      c.n_speakers = js.value("n_speakers", c.n_speakers);
      c.count = js.value("count", c.count);
      c.snr_lo_db = js.value("snr_lo_db", c.snr_lo_db);
      c.snr_hi_db = js.value("snr_hi_db", c.snr_hi_db);
    }
    section = "data";
    if (j.count("data")) {
      const auto& jd = j.at("data");
      if (jd.count("train_manifests")) jd.at("train_manifests").get_to(c.train_manifests);
      if (jd.count("valid_manifests")) jd.at("valid_manifests").get_to(c.valid_manifests);
    }
    section = "paths";
    if (j.count("paths")) {
      const auto& jp = j.at("paths");
      c.stage1_path = jp.value("stage1", c.stage1_path);
      c.stop_path = jp.value("stop", c.stop_path);
      c.stage2_path = jp.value("stage2", c.stage2_path);
      c.mixture_path = jp.value("mixture", c.mixture_path);
      c.manifest_path = jp.value("manifest", c.manifest_path);
    }
    section = "pipeline";
    if (j.count("pipeline")) {
      const auto& jp = j.at("pipeline");
      c.max_iterations = jp.value("max_iterations", c.max_iterations);
      c.terminal_residual_as_cue = jp.value("terminal_residual_as_cue", c.terminal_residual_as_cue);
      c.score_coarse = jp.value("score_coarse", c.score_coarse);
    }
  } catch (const nlohmann::json::exception& e) {
    fail(Errc::config_invalid,
         "config error in " + path + ", section '" + section + "': " + e.what());
  }
}

// One mutable slot per flag; `apply` copies only values the user passed.
struct Flags {
  std::string config, out;
  uint64_t seed = 0;
  int workers = 1;
  bool det_on = false, det_off = false;

  std::string corpus;
  int n_speakers = 2;
  int count = 20;
  double snr_lo_db = 0.0, snr_hi_db = 5.0;

  std::vector<std::string> train_manifests, valid_manifests;
  std::string stage1, stop, stage2, mixture, manifest;

  double lr = 5e-4;
  int patience = 5, batch = 2, epochs = 50, max_steps = 0;
  int max_iterations = 10;
  bool score_coarse = false;
  bool full_final_pass = false;
};

void attach_common(CLI::App* sub, Flags& f) {
  sub->add_option("--config", f.config, "JSON config file");
  sub->add_option("--out", f.out, "output directory");
  sub->add_option("--seed", f.seed, "base random seed");
  sub->add_option("--workers", f.workers, "worker threads (forced to 1 in deterministic mode)");
  sub->add_flag("--deterministic", f.det_on, "serialize all work (default)");
  sub->add_flag("--no-deterministic", f.det_off, "allow parallel workers");
}

void attach_train_flags(CLI::App* sub, Flags& f) {
  sub->add_option("--train-manifest", f.train_manifests, "training manifest (repeatable)");
  sub->add_option("--valid-manifest", f.valid_manifests, "validation manifest (repeatable)");
  sub->add_option("--lr", f.lr, "initial learning rate");
  sub->add_option("--patience", f.patience, "epochs without improvement before halving");
  sub->add_option("--batch-size", f.batch, "items per optimizer step");
  sub->add_option("--epochs", f.epochs, "maximum epochs");
  sub->add_option("--max-steps", f.max_steps, "step budget, 0 for none");
}

bool passed(CLI::App* sub, const std::string& name) {
  const auto* opt = sub->get_option_no_throw(name);
  return opt && opt->count() > 0;
}

void apply_flags(CLI::App* sub, const Flags& f, RunConfig& c) {
  if (passed(sub, "--out")) c.out = f.out;
  if (passed(sub, "--seed")) c.seed = f.seed;
  if (passed(sub, "--workers")) c.workers = f.workers;
  if (passed(sub, "--deterministic")) c.deterministic = true;
  if (passed(sub, "--no-deterministic")) c.deterministic = false;

  if (passed(sub, "--corpus")) c.corpus = f.corpus;
  if (passed(sub, "--n-speakers")) c.n_speakers = f.n_speakers;
  if (passed(sub, "--count")) c.count = f.count;
  if (passed(sub, "--snr-lo")) c.snr_lo_db = f.snr_lo_db;
  if (passed(sub, "--snr-hi")) c.snr_hi_db = f.snr_hi_db;

  if (passed(sub, "--train-manifest")) c.train_manifests = f.train_manifests;
  if (passed(sub, "--valid-manifest")) c.valid_manifests = f.valid_manifests;
  if (passed(sub, "--stage1")) c.stage1_path = f.stage1;
  if (passed(sub, "--stop-ckpt")) c.stop_path = f.stop;
  if (passed(sub, "--stage2")) c.stage2_path = f.stage2;
  if (passed(sub, "--mixture")) c.mixture_path = f.mixture;
  if (passed(sub, "--manifest")) c.manifest_path = f.manifest;

  if (passed(sub, "--lr")) c.train_cfg.initial_lr = f.lr;
  if (passed(sub, "--patience")) c.train_cfg.lr_halving_patience = f.patience;
  if (passed(sub, "--batch-size")) c.train_cfg.batch_size = f.batch;
  if (passed(sub, "--epochs")) c.train_cfg.max_epochs = f.epochs;
  if (passed(sub, "--max-steps")) c.train_cfg.max_steps = f.max_steps;
  if (passed(sub, "--max-iterations")) c.max_iterations = f.max_iterations;
  if (passed(sub, "--score-coarse")) c.score_coarse = f.score_coarse;
  if (passed(sub, "--full-final-pass")) c.terminal_residual_as_cue = !f.full_final_pass;

  c.train_cfg.seed = c.seed;
  if (c.deterministic) c.workers = 1;
}

RunConfig build_config(CLI::App* sub, const Flags& f) {
  RunConfig c;
  if (!f.config.empty()) merge_config_file(c, f.config);
  apply_flags(sub, f, c);
  return c;
}

fs::path require_out(const RunConfig& c) {
  if (c.out.empty()) fail(Errc::config_invalid, "an output directory is required (--out)");
  fs::path out(c.out);
  fs::create_directories(out);
  return out;
}

void write_text(const fs::path& path, const std::string& content) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) fail(Errc::io_failure, "cannot write " + path.string());
  f << content;
  if (!f) fail(Errc::io_failure, "short write on " + path.string());
}

std::string training_log(const train::TrainOutcome& outcome) {
  std::string log;
  for (const auto& r : outcome.log) log += train::format_epoch(r) + "\n";
  return log;
}

void report_outcome(const train::TrainOutcome& outcome, const std::string& ckpt_path) {
  std::printf("checkpoint=%s best_valid_si_snr_db=%.6f epochs=%zu steps=%d diverged=%d\n",
              ckpt_path.c_str(), outcome.best_valid_metric_db, outcome.log.size(), outcome.steps,
              outcome.diverged ? 1 : 0);
}

std::vector<train::TrainItem> require_items(const std::vector<std::string>& manifests, const char* what) {
  if (manifests.empty()) fail(Errc::config_invalid, std::string("no ") + what + " manifests given");
  return train::load_items(manifests);
}

int cmd_simulate(CLI::App* sub, const Flags& f) {
  RunConfig c = build_config(sub, f);
  if (c.corpus.empty()) fail(Errc::config_invalid, "simulate needs --corpus");
  const fs::path out = require_out(c);
  auto index = mixsim::ingest_corpus(c.corpus);
  mixsim::BuildOptions opt;
  opt.n_speakers = c.n_speakers;
  opt.count = c.count;
  opt.seed = c.seed;
  opt.snr_lo_db = c.snr_lo_db;
  opt.snr_hi_db = c.snr_hi_db;
  opt.workers = c.workers;
  const auto entries = mixsim::build_dataset(index, out.string(), opt);
  std::printf("manifest=%s mixtures=%zu\n", (out / "manifest.tsv").string().c_str(), entries.size());
  return 0;
}

int cmd_train_stage1(CLI::App* sub, const Flags& f) {
  RunConfig c = build_config(sub, f);
  const fs::path out = require_out(c);
  const auto train_items = require_items(c.train_manifests, "training");
  const auto valid_items = require_items(c.valid_manifests, "validation");
  auto model = sep::SeparatorModel::init(c.separator, c.seed);
  const auto outcome = train::train_stage1(model, train_items, valid_items, c.train_cfg);
  const std::string ckpt_path = (out / "stage1.ckpt").string();
  ckpt::save_separator(ckpt_path, model, "stage1");
  write_text(out / "stage1.log", training_log(outcome));
  report_outcome(outcome, ckpt_path);
  return outcome.diverged ? 3 : 0;
}

int cmd_finetune_stage1(CLI::App* sub, const Flags& f) {
  RunConfig c = build_config(sub, f);
  const fs::path out = require_out(c);
  if (c.stage1_path.empty()) fail(Errc::config_invalid, "finetune needs --stage1");
  auto loaded = ckpt::load_separator(c.stage1_path);
  if (loaded.kind != "stage1") fail(Errc::checkpoint_incompatible, "finetune needs a stage-1 checkpoint");
  const auto threemix = require_items(c.train_manifests, "training");
  const auto valid_items = require_items(c.valid_manifests, "validation");

  // Derived residual mixtures are a pure function of (stage-1 weights,
  // manifests), so they can be reused across runs via CORFSEP_CACHE.
  std::vector<train::TrainItem> derived;
  const char* cache_root = std::getenv("CORFSEP_CACHE");
  fs::path cache_dir;
  if (cache_root && *cache_root) {
    uint64_t key = 1469598103934665603ULL;
    for (const auto& m : c.train_manifests)
      for (char ch : m) {
        key ^= static_cast<uint8_t>(ch);
        key *= 1099511628211ULL;
      }
    char name[80];
    std::snprintf(name, sizeof name, "derived-%s-%016" PRIx64, loaded.digest.c_str(), key);
    cache_dir = fs::path(cache_root) / name;
  }
  if (!cache_dir.empty() && fs::exists(cache_dir / "manifest.tsv")) {
    derived = train::load_items((cache_dir / "manifest.tsv").string());
  } else {
    derived = train::derive_residual_items(loaded.model, threemix);
    if (!cache_dir.empty()) {
      fs::create_directories(cache_dir);
      std::vector<audio::ManifestEntry> entries;
      for (size_t k = 0; k < derived.size(); ++k) {
        audio::ManifestEntry e;
        e.mixture_path = "mix_" + std::to_string(k) + ".wav";
        audio::write_wav((cache_dir / e.mixture_path).string(),
                         audio::Waveform{derived[k].mix, audio::kPipelineRate});
        for (size_t s = 0; s < derived[k].refs.size(); ++s) {
          const std::string rp = "ref_" + std::to_string(k) + "_" + std::to_string(s) + ".wav";
          audio::write_wav((cache_dir / rp).string(),
                           audio::Waveform{derived[k].refs[s], audio::kPipelineRate});
          e.source_paths.push_back(rp);
          e.speaker_ids.push_back(std::string(1, static_cast<char>('a' + s)));
          e.gains_db.push_back(0.0);
        }
        e.seed = k;
        entries.push_back(std::move(e));
      }
      audio::save_manifest((cache_dir / "manifest.tsv").string(), entries);
    }
  }

  auto combined = std::move(derived);
  combined.insert(combined.end(), threemix.begin(), threemix.end());
  const auto outcome = train::train_stage1(loaded.model, combined, valid_items, c.train_cfg);
  const std::string ckpt_path = (out / "stage1_finetuned.ckpt").string();
  ckpt::save_separator(ckpt_path, loaded.model, "stage1");
  write_text(out / "stage1_finetuned.log", training_log(outcome));
  report_outcome(outcome, ckpt_path);
  return outcome.diverged ? 3 : 0;
}

int cmd_train_stop(CLI::App* sub, const Flags& f) {
  RunConfig c = build_config(sub, f);
  const fs::path out = require_out(c);
  if (c.stage1_path.empty()) fail(Errc::config_invalid, "train-stop needs --stage1");
  auto loaded = ckpt::load_separator(c.stage1_path);
  const auto train_items = require_items(c.train_manifests, "training");
  const auto valid_items = require_items(c.valid_manifests, "validation");
  const auto train_examples = train::build_stop_examples(loaded.model, train_items, c.seed);
  const auto valid_examples = train::build_stop_examples(loaded.model, valid_items, sub_seed(c.seed, 1));
  auto clf = sep::StopClassifier::init(c.stop_cfg, loaded.model.cfg,
                                       loaded.model.params.get("enc.w")->value, c.seed);
  const auto outcome = train::train_stop_classifier(clf, train_examples, valid_examples, c.train_cfg);
  const std::string ckpt_path = (out / "stop.ckpt").string();
  ckpt::save_stop(ckpt_path, clf, loaded.digest);
  write_text(out / "stop.log", training_log(outcome));
  report_outcome(outcome, ckpt_path);
  return outcome.diverged ? 3 : 0;
}

int cmd_train_stage2(CLI::App* sub, const Flags& f) {
  RunConfig c = build_config(sub, f);
  const fs::path out = require_out(c);
  if (c.stage1_path.empty()) fail(Errc::config_invalid, "train-stage2 needs --stage1");
  auto loaded = ckpt::load_separator(c.stage1_path);
  if (loaded.kind != "stage1") fail(Errc::checkpoint_incompatible, "train-stage2 needs a stage-1 checkpoint");
  const auto train_items = require_items(c.train_manifests, "training");
  const auto valid_items = require_items(c.valid_manifests, "validation");
  auto stage2 = extractor::init_stage2(c.ext, loaded.model, c.seed);
  const auto outcome = extractor::train_stage2(stage2, loaded.model, train_items, valid_items, c.train_cfg);
  const std::string ckpt_path = (out / "stage2.ckpt").string();
  ckpt::save_separator(ckpt_path, stage2, "stage2", loaded.digest);
  write_text(out / "stage2.log", training_log(outcome));
  report_outcome(outcome, ckpt_path);
  return outcome.diverged ? 3 : 0;
}

pipeline::Models load_models_from(const RunConfig& c) {
  if (c.stage1_path.empty() || c.stop_path.empty() || c.stage2_path.empty())
    fail(Errc::config_invalid, "need --stage1, --stop-ckpt and --stage2 checkpoints");
  return pipeline::load_models(c.stage1_path, c.stop_path, c.stage2_path);
}

int cmd_separate(CLI::App* sub, const Flags& f) {
  RunConfig c = build_config(sub, f);
  const fs::path out = require_out(c);
  if (c.mixture_path.empty()) fail(Errc::config_invalid, "separate needs --mixture");
  const auto models = load_models_from(c);
  const auto x = audio::read_wav(c.mixture_path);
  pipeline::SeparateOptions opt;
  opt.max_iterations = c.max_iterations;
  opt.terminal_residual_as_cue = c.terminal_residual_as_cue;
  const auto result = pipeline::separate(x, models, opt);

  std::string record = "mixture=" + c.mixture_path + "\n";
  record += "iterations=" + std::to_string(result.iterations) + "\n";
  record += "truncated=" + std::to_string(result.truncated ? 1 : 0) + "\n";
  record += "decisions=";
  for (size_t i = 0; i < result.stop_decisions.size(); ++i) {
    char buf[48];
    std::snprintf(buf, sizeof buf, "%s%s:%.6f", i ? ";" : "",
                  result.stop_decisions[i].first ? "continue" : "stop",
                  result.stop_decisions[i].second);
    record += buf;
  }
  record += "\nsources=";
  for (size_t j = 0; j < result.fine_sources.size(); ++j) {
    const std::string name = "source_" + std::to_string(j + 1) + ".wav";
    audio::write_wav((out / name).string(), result.fine_sources[j]);
    record += (j ? ";" : "") + name;
  }
  record += "\n";
  write_text(out / "result.txt", record);
  std::printf("sources=%d truncated=%d out=%s\n", result.iterations, result.truncated ? 1 : 0,
              out.string().c_str());
  return 0;
}

int cmd_evaluate(CLI::App* sub, const Flags& f) {
  RunConfig c = build_config(sub, f);
  const fs::path out = require_out(c);
  if (c.manifest_path.empty()) fail(Errc::config_invalid, "evaluate needs --manifest");
  const auto models = load_models_from(c);
  pipeline::EvalOptions opt;
  opt.separate.max_iterations = c.max_iterations;
  opt.separate.terminal_residual_as_cue = c.terminal_residual_as_cue;
  opt.score_coarse = c.score_coarse;
  opt.workers = c.workers;
  const auto report = pipeline::evaluate(c.manifest_path, models, opt);
  write_text(out / "records.txt", pipeline::format_records(report));
  const std::string summary = pipeline::format_summary(report);
  write_text(out / "summary.txt", summary);
  std::fputs(summary.c_str(), stdout);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"coarse-to-fine recursive speech separation"};
  app.require_subcommand(1);

  Flags f;
  auto* sim = app.add_subcommand("simulate", "build a mixture dataset from a clean corpus");
  attach_common(sim, f);
  sim->add_option("--corpus", f.corpus, "clean corpus root (speaker/*.wav)");
  sim->add_option("--n-speakers", f.n_speakers, "speakers per mixture");
  sim->add_option("--count", f.count, "number of mixtures");
  sim->add_option("--snr-lo", f.snr_lo_db, "lower relative level bound (dB)");
  sim->add_option("--snr-hi", f.snr_hi_db, "upper relative level bound (dB)");

  auto* t1 = app.add_subcommand("train-stage1", "train the recursive two-output separator");
  attach_common(t1, f);
  attach_train_flags(t1, f);

  auto* ft = app.add_subcommand("finetune-stage1", "fine-tune stage 1 on derived residual mixtures");
  attach_common(ft, f);
  attach_train_flags(ft, f);
  ft->add_option("--stage1", f.stage1, "stage-1 checkpoint to start from");

  auto* ts = app.add_subcommand("train-stop", "train the repeat-or-stop classifier");
  attach_common(ts, f);
  attach_train_flags(ts, f);
  ts->add_option("--stage1", f.stage1, "stage-1 checkpoint providing the front-end");

  auto* t2 = app.add_subcommand("train-stage2", "train the cue-conditioned extractor");
  attach_common(t2, f);
  attach_train_flags(t2, f);
  t2->add_option("--stage1", f.stage1, "frozen stage-1 checkpoint");

  auto* sp = app.add_subcommand("separate", "separate one mixture into per-speaker WAVs");
  attach_common(sp, f);
  sp->add_option("--stage1", f.stage1, "stage-1 checkpoint");
  sp->add_option("--stop-ckpt", f.stop, "stop-classifier checkpoint");
  sp->add_option("--stage2", f.stage2, "stage-2 checkpoint");
  sp->add_option("--mixture", f.mixture, "input mixture WAV");
  sp->add_option("--max-iterations", f.max_iterations, "hard recursion cap");
  sp->add_flag("--full-final-pass", f.full_final_pass,
               "derive the last source from one more full pass instead of the residual");

  auto* ev = app.add_subcommand("evaluate", "score a manifest with the full pipeline");
  attach_common(ev, f);
  ev->add_option("--stage1", f.stage1, "stage-1 checkpoint");
  ev->add_option("--stop-ckpt", f.stop, "stop-classifier checkpoint");
  ev->add_option("--stage2", f.stage2, "stage-2 checkpoint");
  ev->add_option("--manifest", f.manifest, "evaluation manifest");
  ev->add_option("--max-iterations", f.max_iterations, "hard recursion cap");
  ev->add_flag("--score-coarse", f.score_coarse, "also score the stage-1 cues");
  ev->add_flag("--full-final-pass", f.full_final_pass,
               "derive the last source from one more full pass instead of the residual");

  CLI11_PARSE(app, argc, argv);

  try {
    if (sim->parsed()) return cmd_simulate(sim, f);
    if (t1->parsed()) return cmd_train_stage1(t1, f);
    if (ft->parsed()) return cmd_finetune_stage1(ft, f);
    if (ts->parsed()) return cmd_train_stop(ts, f);
    if (t2->parsed()) return cmd_train_stage2(t2, f);
    if (sp->parsed()) return cmd_separate(sp, f);
    if (ev->parsed()) return cmd_evaluate(ev, f);
  } catch (const Error& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}
