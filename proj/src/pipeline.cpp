#include "corfsep/pipeline.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <limits>
#include <thread>

#include "corfsep/metrics.hpp"

namespace corfsep::pipeline {

namespace {

constexpr double kPadScore = -1e9;

bool same_frontend(const sep::SeparatorConfig& a, const sep::SeparatorConfig& b) {
  return a.encoder_window == b.encoder_window && a.encoder_stride == b.encoder_stride &&
         a.feature_dim == b.feature_dim;
}

// Best bijection on a possibly rectangular score matrix; pads to square so
// the min(count) best pairs survive. Returns est index -> ref index or -1.
std::vector<int> align(const std::vector<std::vector<double>>& score, size_t n_refs) {
  const size_t m = score.size();
  const size_t side = std::max(m, n_refs);
  std::vector<std::vector<double>> padded(side, std::vector<double>(side, kPadScore));
  for (size_t i = 0; i < m; ++i)
    for (size_t j = 0; j < n_refs; ++j) padded[i][j] = score[i][j];
  const std::vector<int> perm = side <= 6 ? metrics::exhaustive_max_assignment(padded)
                                          : metrics::hungarian_max_assignment(padded);
  std::vector<int> out(m, -1);
  for (size_t i = 0; i < m; ++i)
    if (perm[i] >= 0 && static_cast<size_t>(perm[i]) < n_refs) out[i] = perm[i];
  return out;
}

std::vector<double> aligned_scores(const std::vector<std::vector<double>>& ests,
                                   const std::vector<std::vector<double>>& refs) {
  const auto score = metrics::pairwise_si_snr(ests, refs);
  const auto match = align(score, refs.size());
  std::vector<double> out(ests.size(), std::numeric_limits<double>::quiet_NaN());
  for (size_t i = 0; i < ests.size(); ++i)
    if (match[i] >= 0) out[i] = score[i][static_cast<size_t>(match[i])];
  return out;
}

// Sort before summing so the mean is independent of record order.
double sorted_mean(std::vector<double> values) {
  if (values.empty()) return std::numeric_limits<double>::quiet_NaN();
  std::sort(values.begin(), values.end());
  double sum = 0.0;
  for (double v : values) sum += v;
  return sum / static_cast<double>(values.size());
}

std::string fmt_db(double v) {
  if (std::isnan(v)) return "na";
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.6f", v);
  return buf;
}

std::string join_scores(const std::vector<double>& v) {
  std::string out;
  for (size_t i = 0; i < v.size(); ++i) {
    if (i) out += ";";
    out += fmt_db(v[i]);
  }
  return out;
}

}  // namespace

Models load_models(const std::string& stage1_path, const std::string& stop_path,
                   const std::string& stage2_path) {
  auto s1 = ckpt::load_separator(stage1_path);
  if (s1.kind != "stage1")
    fail(Errc::checkpoint_incompatible, stage1_path + " is not a stage-1 checkpoint");
  auto stop = ckpt::load_stop(stop_path);
  auto s2 = ckpt::load_separator(stage2_path);
  if (s2.kind != "stage2")
    fail(Errc::checkpoint_incompatible, stage2_path + " is not a stage-2 checkpoint");

  if (!stop.stage1_digest.empty() && stop.stage1_digest != s1.digest)
    fail(Errc::checkpoint_incompatible, "stop classifier was trained against a different stage-1 model");
  if (s2.stage1_digest != s1.digest)
    fail(Errc::checkpoint_incompatible, "stage-2 model was trained against a different stage-1 model");
  if (!same_frontend(stop.classifier.frontend, s1.model.cfg))
    fail(Errc::geometry_mismatch, "stop classifier geometry differs from stage 1");
  if (!same_frontend(s2.model.cfg, s1.model.cfg))
    fail(Errc::geometry_mismatch, "stage-2 geometry differs from stage 1");
  return Models{std::move(s1.model), std::move(stop.classifier), std::move(s2.model)};
}

SeparationResult separate(const audio::Waveform& x, const Models& models, const SeparateOptions& opt) {
  if (opt.max_iterations < 1) fail(Errc::config_invalid, "max_iterations must be at least 1");
  if (models.stage1.cfg.num_outputs != 2)
    fail(Errc::checkpoint_incompatible, "stage 1 must be a two-output model");
  if (models.stage2.cfg.num_outputs != 1 || !models.stage2.has_cue_encoder())
    fail(Errc::checkpoint_incompatible, "stage 2 must be a conditioned single-output model");
  audio::validate(x);

  SeparationResult result;
  result.residual_trace.push_back(x);
  audio::Waveform r = x;
  const size_t cap = static_cast<size_t>(opt.max_iterations);
  while (true) {
    auto [cue, res] = models.stage1.separate2(r);
    result.coarse_cues.push_back(std::move(cue));
    result.residual_trace.push_back(res);
    r = std::move(res);
    const auto decision = models.stop.should_continue(r);
    result.stop_decisions.push_back(decision);
    if (!decision.first) {
      if (result.coarse_cues.size() < cap) {
        if (opt.terminal_residual_as_cue) {
          result.coarse_cues.push_back(r);
        } else {
          auto [final_cue, final_res] = models.stage1.separate2(r);
          result.coarse_cues.push_back(std::move(final_cue));
          result.residual_trace.push_back(std::move(final_res));
        }
      }
      break;
    }
    if (result.coarse_cues.size() >= cap) {
      result.truncated = true;
      break;
    }
  }

  result.iterations = static_cast<int>(result.coarse_cues.size());
  for (size_t j = 0; j < result.coarse_cues.size(); ++j) {
    if (opt.stage2_probe) opt.stage2_probe(x, static_cast<int>(j + 1));
    result.fine_sources.push_back(models.stage2.extract(x, result.coarse_cues[j]));
  }
  return result;
}

MixtureScore score_estimates(size_t index, const std::vector<std::vector<double>>& fine,
                             const std::vector<std::vector<double>>& coarse,
                             const std::vector<std::vector<double>>& refs) {
  if (refs.empty()) fail(Errc::empty_input, "no references to score against");
  if (fine.empty()) fail(Errc::empty_input, "no estimates to score");
  MixtureScore s;
  s.index = index;
  s.true_n = static_cast<int>(refs.size());
  s.predicted_n = static_cast<int>(fine.size());
  s.fine_per_iteration = aligned_scores(fine, refs);
  if (!coarse.empty()) s.coarse_per_iteration = aligned_scores(coarse, refs);
  return s;
}

EvalReport aggregate_scores(std::vector<MixtureScore> records) {
  if (records.empty()) fail(Errc::empty_corpus, "nothing to aggregate");
  EvalReport report;
  report.num_mixtures = records.size();

  std::map<int, std::vector<double>> fine_by_n, coarse_by_n;
  std::map<int, std::map<int, std::vector<double>>> fine_by_nj;
  size_t counted = 0;
  for (const auto& r : records) {
    if (r.predicted_n == r.true_n) ++counted;
    for (size_t j = 0; j < r.fine_per_iteration.size(); ++j) {
      const double v = r.fine_per_iteration[j];
      if (std::isnan(v)) continue;
      fine_by_n[r.true_n].push_back(v);
      fine_by_nj[r.true_n][static_cast<int>(j + 1)].push_back(v);
    }
    for (double v : r.coarse_per_iteration)
      if (!std::isnan(v)) coarse_by_n[r.true_n].push_back(v);
  }
  for (auto& [n, vals] : fine_by_n) report.per_num_speakers[n] = sorted_mean(std::move(vals));
  for (auto& [n, byj] : fine_by_nj)
    for (auto& [j, vals] : byj) report.per_iteration[n][j] = sorted_mean(std::move(vals));
  for (auto& [n, vals] : coarse_by_n) report.per_num_speakers_coarse[n] = sorted_mean(std::move(vals));
  report.counting_accuracy = static_cast<double>(counted) / static_cast<double>(records.size());

  std::sort(records.begin(), records.end(),
            [](const MixtureScore& a, const MixtureScore& b) { return a.index < b.index; });
  report.records = std::move(records);
  return report;
}

EvalReport evaluate(const std::string& manifest_path, const Models& models, const EvalOptions& opt) {
  const auto items = train::load_items(manifest_path);
  if (items.empty()) fail(Errc::empty_corpus, "empty manifest: " + manifest_path);

  std::vector<MixtureScore> records(items.size());
  auto score_one = [&](size_t i) {
    const auto& item = items[i];
    auto result = separate(audio::Waveform{item.mix, audio::kPipelineRate}, models, opt.separate);
    std::vector<std::vector<double>> fine, coarse;
    for (auto& w : result.fine_sources) fine.push_back(std::move(w.samples));
    if (opt.score_coarse)
      for (auto& w : result.coarse_cues) coarse.push_back(std::move(w.samples));
    records[i] = score_estimates(i, fine, coarse, item.refs);
  };

  const int workers = std::max(1, opt.workers);
  if (workers == 1) {
    for (size_t i = 0; i < items.size(); ++i) score_one(i);
  } else {
    std::atomic<size_t> next{0};
    std::vector<std::thread> pool;
    for (int w = 0; w < workers; ++w)
      pool.emplace_back([&] {
        for (size_t i = next.fetch_add(1); i < items.size(); i = next.fetch_add(1)) score_one(i);
      });
    for (auto& t : pool) t.join();
  }
  return aggregate_scores(std::move(records));
}

std::string format_records(const EvalReport& report) {
  std::string out;
  for (const auto& r : report.records) {
    out += "mixture=" + std::to_string(r.index);
    out += " true_n=" + std::to_string(r.true_n);
    out += " predicted_n=" + std::to_string(r.predicted_n);
    out += " fine=" + join_scores(r.fine_per_iteration);
    if (!r.coarse_per_iteration.empty()) out += " coarse=" + join_scores(r.coarse_per_iteration);
    out += "\n";
  }
  return out;
}

std::string format_summary(const EvalReport& report) {
  int max_j = 0;
  for (const auto& [n, byj] : report.per_iteration)
    for (const auto& [j, v] : byj) max_j = std::max(max_j, j);

  std::map<int, int> count_by_n, counted_by_n;
  for (const auto& r : report.records) {
    ++count_by_n[r.true_n];
    if (r.predicted_n == r.true_n) ++counted_by_n[r.true_n];
  }

  char buf[64];
  std::string out = "true_n  mixtures  counting_acc  mean_si_snr_db";
  for (int j = 1; j <= max_j; ++j) {
    std::snprintf(buf, sizeof buf, "  %-10s", ("j=" + std::to_string(j)).c_str());
    out += buf;
  }
  out += "\n";
  for (const auto& [n, mean] : report.per_num_speakers) {
    const int cnt = count_by_n[n];
    const double acc = cnt ? static_cast<double>(counted_by_n[n]) / cnt : 0.0;
    std::snprintf(buf, sizeof buf, "%-6d  %-8d  %-12.3f  %-14.6f", n, cnt, acc, mean);
    out += buf;
    for (int j = 1; j <= max_j; ++j) {
      const auto n_it = report.per_iteration.find(n);
      const bool have = n_it != report.per_iteration.end() && n_it->second.count(j);
      std::snprintf(buf, sizeof buf, "  %-10s", have ? fmt_db(n_it->second.at(j)).c_str() : "-");
      out += buf;
    }
    out += "\n";
  }
  if (!report.per_num_speakers_coarse.empty()) {
    out += "coarse cues (stage 1 only)\n";
    for (const auto& [n, mean] : report.per_num_speakers_coarse) {
      std::snprintf(buf, sizeof buf, "%-6d  mean_si_snr_db=%.6f\n", n, mean);
      out += buf;
    }
  }
  std::snprintf(buf, sizeof buf, "overall counting_accuracy=%.6f mixtures=%zu\n",
                report.counting_accuracy, report.num_mixtures);
  out += buf;
  return out;
}

}  // namespace corfsep::pipeline
