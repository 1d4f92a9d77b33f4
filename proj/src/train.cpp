#include "corfsep/train.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <map>
#include <numeric>

#include "corfsep/metrics.hpp"
#include "corfsep/mixsim.hpp"
#include "corfsep/rng.hpp"

namespace corfsep::train {

using nn::Tensor;
using nn::Var;

void TrainConfig::validate() const {
  if (initial_lr <= 0 || grad_clip_l2 <= 0 || batch_size < 1 || max_epochs < 1 || max_steps < 0)
    fail(Errc::config_invalid, "training config fields must be positive");
  if (lr_halving_patience < 1) fail(Errc::config_invalid, "lr_halving_patience must be >= 1");
  if (!(beta1 > 0 && beta1 < 1 && beta2 > 0 && beta2 < 1))
    fail(Errc::config_invalid, "momentum parameters must lie in (0,1)");
}

std::vector<TrainItem> load_items(const std::string& manifest_path) {
  const auto entries = audio::load_manifest(manifest_path);
  const std::string dir = std::filesystem::path(manifest_path).parent_path().string();
  std::vector<TrainItem> items;
  items.reserve(entries.size());
  for (const auto& e : entries) {
    auto ex = mixsim::load_example(dir, e);
    TrainItem item;
    item.mix = std::move(ex.mixture.samples);
    for (auto& s : ex.sources) item.refs.push_back(std::move(s.samples));
    items.push_back(std::move(item));
  }
  return items;
}

std::vector<TrainItem> load_items(const std::vector<std::string>& manifest_paths) {
  std::vector<TrainItem> items;
  for (const auto& p : manifest_paths) {
    auto part = load_items(p);
    std::move(part.begin(), part.end(), std::back_inserter(items));
  }
  return items;
}

nn::Var si_snr_node(const Var& est, const std::vector<double>& ref) {
  if (est->value.rows != 1) fail(Errc::shape_mismatch, "estimate must be a 1xL row");
  const size_t len = ref.size();
  if (static_cast<size_t>(est->value.cols) != len)
    fail(Errc::length_mismatch, "estimate and reference lengths differ");
  if (len == 0) fail(Errc::empty_input, "empty signals");

  auto ref_zm = metrics::mean_normalize(ref);
  double ref_energy = 0.0;
  for (double v : ref_zm) ref_energy += v * v;
  if (ref_energy == 0.0) fail(Errc::zero_energy_reference, "reference has zero energy");
  Var ref_c = nn::constant(Tensor::row(std::move(ref_zm)));

  const double n = static_cast<double>(len);
  Var mean = nn::scale(nn::sum_all(est), 1.0 / n);
  Var est_zm = nn::add_bscalar(est, nn::scale(mean, -1.0));
  Var dot = nn::sum_all(nn::mul(est_zm, ref_c));
  Var target = nn::mul_bscalar(ref_c, nn::scale(dot, 1.0 / ref_energy));
  Var noise = nn::sub(est_zm, target);
  Var target_e = nn::sum_all(nn::mul(target, target));
  Var noise_e = nn::sum_all(nn::mul(noise, noise));
  Var denom = nn::add(noise_e, nn::scale(target_e, metrics::kSiSnrEpsRel));
  Var ratio = nn::mul(target_e, nn::reciprocal(denom));
  return nn::scale(nn::log_(ratio), 10.0 / std::log(10.0));
}

namespace {

// Leave-one-out sums built from a content-sorted total, so every candidate
// sees bit-identical values regardless of the caller's reference order.
std::vector<std::vector<double>> leave_one_out_sums(const std::vector<std::vector<double>>& refs) {
  const size_t n = refs.size();
  const size_t len = refs[0].size();
  std::vector<int> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](int a, int b) {
    return std::lexicographical_compare(refs[static_cast<size_t>(a)].begin(), refs[static_cast<size_t>(a)].end(),
                                        refs[static_cast<size_t>(b)].begin(), refs[static_cast<size_t>(b)].end());
  });
  std::vector<double> total(len, 0.0);
  for (int i : order)
    for (size_t t = 0; t < len; ++t) total[t] += refs[static_cast<size_t>(i)][t];
  std::vector<std::vector<double>> rest(n, std::vector<double>(len));
  for (size_t i = 0; i < n; ++i)
    for (size_t t = 0; t < len; ++t) rest[i][t] = total[t] - refs[i][t];
  return rest;
}

void check_orpit_inputs(size_t cue_len, size_t res_len, const std::vector<std::vector<double>>& refs) {
  if (refs.size() < 2) fail(Errc::insufficient_speakers, "OR-PIT needs at least two references");
  if (cue_len != res_len) fail(Errc::length_mismatch, "cue and residual lengths differ");
  for (const auto& r : refs)
    if (r.size() != cue_len) fail(Errc::length_mismatch, "reference length differs from estimates");
}

std::vector<Tensor> snapshot(const std::vector<Var>& ps) {
  std::vector<Tensor> out;
  out.reserve(ps.size());
  for (const auto& p : ps) out.push_back(p->value);
  return out;
}

void restore(const std::vector<Var>& ps, const std::vector<Tensor>& snap) {
  for (size_t i = 0; i < ps.size(); ++i) ps[i]->value = snap[i];
}

}  // namespace

TrainOutcome run_training(const LoopSpec& spec, const TrainConfig& cfg) {
  cfg.validate();
  Adam opt(spec.trainables, cfg);
  PlateauHalver halver(cfg.initial_lr, cfg.lr_halving_patience);
  auto best = snapshot(spec.trainables);
  auto last_finite = best;
  double best_metric = -1e300;
  bool have_best = false;
  TrainOutcome out;
  int steps = 0;

  for (int epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
    Rng rng(sub_seed(cfg.seed, 0x10000u + static_cast<uint64_t>(epoch)));
    const auto batches = spec.make_batches(rng);
    double loss_sum = 0.0;
    int done = 0;
    bool nan_abort = false;
    bool budget_hit = false;
    for (const auto& batch : batches) {
      if (cfg.max_steps > 0 && steps >= cfg.max_steps) {
        budget_hit = true;
        break;
      }
      opt.zero_grad();
      Var total;
      for (int idx : batch) {
        Var l = spec.item_loss(idx);
        total = total ? nn::add(total, l) : l;
      }
      Var loss = nn::scale(total, 1.0 / static_cast<double>(batch.size()));
      const double lv = loss->value.d[0];
      if (!std::isfinite(lv)) {
        nn::release_graph(loss);
        nan_abort = true;
        break;
      }
      nn::backward(loss);
      nn::release_graph(loss);
      opt.clip_global_norm(cfg.grad_clip_l2);
      opt.step();
      ++steps;
      loss_sum += lv;
      ++done;
    }
    out.steps = steps;
    if (!nan_abort)
      for (const auto& p : spec.trainables)
        if (!p->value.all_finite()) {
          nan_abort = true;
          break;
        }
    if (nan_abort) {
      restore(spec.trainables, last_finite);
      out.diverged = true;
      break;
    }
    if (done == 0) break;
    const double vm = spec.validation_metric();
    out.log.push_back({epoch, loss_sum / done, vm, opt.lr()});
    if (vm > best_metric) {
      best_metric = vm;
      best = snapshot(spec.trainables);
      have_best = true;
    }
    last_finite = snapshot(spec.trainables);
    opt.set_lr(halver.observe(vm));
    if (budget_hit) break;
  }
  if (have_best) out.best_valid_metric_db = best_metric;
  if (!out.diverged && have_best) restore(spec.trainables, best);
  return out;
}

namespace {

// Plain (no tape) OR-PIT candidate scores: (si_snr vs ref_i, si_snr vs rest_i).
std::vector<std::pair<double, double>> orpit_candidates_plain(const std::vector<double>& cue,
                                                              const std::vector<double>& res,
                                                              const std::vector<std::vector<double>>& refs) {
  check_orpit_inputs(cue.size(), res.size(), refs);
  const auto rest = leave_one_out_sums(refs);
  std::vector<std::pair<double, double>> out;
  out.reserve(refs.size());
  for (size_t i = 0; i < refs.size(); ++i)
    out.emplace_back(metrics::si_snr(cue, refs[i]), metrics::si_snr(res, rest[i]));
  return out;
}

std::vector<std::vector<int>> grouped_batches(const std::vector<TrainItem>& items, int batch_size, Rng& rng) {
  std::map<size_t, std::vector<int>> groups;
  for (size_t i = 0; i < items.size(); ++i) groups[items[i].refs.size()].push_back(static_cast<int>(i));
  std::vector<std::vector<int>> batches;
  for (auto& [n, idxs] : groups) {
    rng.shuffle(idxs);
    for (size_t at = 0; at < idxs.size(); at += static_cast<size_t>(batch_size)) {
      const size_t end = std::min(idxs.size(), at + static_cast<size_t>(batch_size));
      batches.emplace_back(idxs.begin() + static_cast<long>(at), idxs.begin() + static_cast<long>(end));
    }
  }
  rng.shuffle(batches);
  return batches;
}

// Mean over items of the two-channel SI-SNR under the OR-PIT assignment.
double separator_validation(const sep::SeparatorModel& model, const std::vector<TrainItem>& items) {
  nn::NoGradGuard ng;
  double sum = 0.0;
  for (const auto& item : items) {
    Var x = nn::constant(Tensor::row(item.mix));
    auto outs = model.forward(x);
    const auto cand = orpit_candidates_plain(outs[0]->value.d, outs[1]->value.d, item.refs);
    const double w = 1.0 / static_cast<double>(item.refs.size() - 1);
    size_t best = 0;
    double best_loss = 1e300;
    for (size_t i = 0; i < cand.size(); ++i) {
      const double l = -cand[i].first - w * cand[i].second;
      if (l < best_loss) {
        best_loss = l;
        best = i;
      }
    }
    sum += 0.5 * (cand[best].first + cand[best].second);
  }
  return sum / static_cast<double>(items.size());
}

void check_items(const std::vector<TrainItem>& items, const char* what) {
  if (items.empty()) fail(Errc::empty_corpus, std::string("no ") + what + " items");
  for (const auto& item : items) {
    if (item.refs.size() < 2) fail(Errc::insufficient_speakers, "items need at least two references");
    for (const auto& r : item.refs)
      if (r.size() != item.mix.size()) fail(Errc::length_mismatch, "reference length differs from mixture");
  }
}

}  // namespace

OrpitResult orpit_loss(const Var& cue, const Var& res, const std::vector<std::vector<double>>& refs) {
  if (cue->value.rows != 1 || res->value.rows != 1) fail(Errc::shape_mismatch, "estimates must be 1xL rows");
  check_orpit_inputs(static_cast<size_t>(cue->value.cols), static_cast<size_t>(res->value.cols), refs);
  const auto rest = leave_one_out_sums(refs);
  const double w = 1.0 / static_cast<double>(refs.size() - 1);
  OrpitResult out;
  double best = 1e300;
  for (size_t i = 0; i < refs.size(); ++i) {
    Var cand = nn::add(nn::scale(si_snr_node(cue, refs[i]), -1.0),
                       nn::scale(si_snr_node(res, rest[i]), -w));
    if (cand->value.d[0] < best) {
      best = cand->value.d[0];
      out.loss = cand;
      out.argmin = static_cast<int>(i);
    }
  }
  return out;
}

int orpit_argmin(const std::vector<double>& cue, const std::vector<double>& res,
                 const std::vector<std::vector<double>>& refs) {
  const auto cand = orpit_candidates_plain(cue, res, refs);
  const double w = 1.0 / static_cast<double>(refs.size() - 1);
  int best = 0;
  double best_loss = 1e300;
  for (size_t i = 0; i < cand.size(); ++i) {
    const double l = -cand[i].first - w * cand[i].second;
    if (l < best_loss) {
      best_loss = l;
      best = static_cast<int>(i);
    }
  }
  return best;
}

Adam::Adam(std::vector<Var> params, const TrainConfig& cfg)
    : params_(std::move(params)), lr_(cfg.initial_lr), b1_(cfg.beta1), b2_(cfg.beta2) {
  for (const auto& p : params_) {
    m_.emplace_back(p->value.rows, p->value.cols);
    v_.emplace_back(p->value.rows, p->value.cols);
  }
}

void Adam::zero_grad() {
  for (const auto& p : params_) p->zero_grad();
}

double Adam::clip_global_norm(double max_norm) {
  double sq = 0.0;
  for (const auto& p : params_) {
    p->ensure_grad();
    for (double g : p->grad.d) sq += g * g;
  }
  const double norm = std::sqrt(sq);
  if (norm > max_norm && norm > 0.0) {
    const double s = max_norm / norm;
    for (const auto& p : params_)
      for (auto& g : p->grad.d) g *= s;
  }
  return norm;
}

void Adam::step() {
  ++t_;
  const double c1 = 1.0 - std::pow(b1_, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(b2_, static_cast<double>(t_));
  for (size_t k = 0; k < params_.size(); ++k) {
    auto& p = params_[k];
    p->ensure_grad();
    for (size_t i = 0; i < p->value.d.size(); ++i) {
      const double g = p->grad.d[i];
      m_[k].d[i] = b1_ * m_[k].d[i] + (1.0 - b1_) * g;
      v_[k].d[i] = b2_ * v_[k].d[i] + (1.0 - b2_) * g * g;
      const double mhat = m_[k].d[i] / c1;
      const double vhat = v_[k].d[i] / c2;
      p->value.d[i] -= lr_ * mhat / (std::sqrt(vhat) + eps_);
    }
  }
}

double PlateauHalver::observe(double metric) {
  if (metric > best_) {
    best_ = metric;
    streak_ = 0;
  } else if (++streak_ == patience_) {
    lr_ *= 0.5;
    streak_ = 0;
  }
  return lr_;
}

std::string format_epoch(const EpochRecord& r) {
  char buf[160];
  std::snprintf(buf, sizeof buf, "epoch=%d train_loss=%.6f valid_si_snr_db=%.6f lr=%.6e", r.epoch,
                r.train_loss, r.valid_metric_db, r.lr);
  return buf;
}

TrainOutcome train_stage1(sep::SeparatorModel& model, const std::vector<TrainItem>& train_items,
                          const std::vector<TrainItem>& valid_items, const TrainConfig& cfg) {
  if (model.cfg.num_outputs != 2) fail(Errc::config_invalid, "stage-1 training requires a two-output model");
  check_items(train_items, "training");
  check_items(valid_items, "validation");

  LoopSpec spec;
  spec.trainables = model.params.trainable();
  spec.make_batches = [&](Rng& rng) { return grouped_batches(train_items, cfg.batch_size, rng); };
  spec.item_loss = [&](int idx) {
    const auto& item = train_items[static_cast<size_t>(idx)];
    Var x = nn::constant(Tensor::row(item.mix));
    auto outs = model.forward(x);
    return orpit_loss(outs[0], outs[1], item.refs).loss;
  };
  spec.validation_metric = [&] { return separator_validation(model, valid_items); };
  return run_training(spec, cfg);
}

std::vector<TrainItem> derive_residual_items(const sep::SeparatorModel& stage1,
                                             const std::vector<TrainItem>& threemix) {
  std::vector<TrainItem> derived;
  derived.reserve(threemix.size());
  for (const auto& item : threemix) {
    if (item.refs.size() != 3) fail(Errc::invalid_entry, "residual derivation expects 3-speaker mixtures");
    audio::Waveform x{item.mix, audio::kPipelineRate};
    auto [cue, res] = stage1.separate2(x);
    const int claimed = orpit_argmin(cue.samples, res.samples, item.refs);
    TrainItem d;
    d.mix = std::move(res.samples);
    for (size_t j = 0; j < item.refs.size(); ++j)
      if (static_cast<int>(j) != claimed) d.refs.push_back(item.refs[j]);
    derived.push_back(std::move(d));
  }
  return derived;
}

TrainOutcome finetune_stage1(sep::SeparatorModel& model, const std::vector<TrainItem>& threemix,
                             const std::vector<TrainItem>& valid_items, const TrainConfig& cfg) {
  check_items(threemix, "fine-tuning");
  auto combined = derive_residual_items(model, threemix);
  combined.insert(combined.end(), threemix.begin(), threemix.end());
  return train_stage1(model, combined, valid_items, cfg);
}

std::vector<StopExample> build_stop_examples(const sep::SeparatorModel& stage1,
                                             const std::vector<TrainItem>& items, uint64_t seed) {
  check_items(items, "stop-classifier source");
  (void)seed;
  std::vector<StopExample> out;
  for (size_t k = 0; k < items.size(); ++k) {
    const auto& item = items[k];
    const int n = static_cast<int>(item.refs.size());
    audio::Waveform r{item.mix, audio::kPipelineRate};
    out.push_back({r.samples, n >= 2});
    // one pass beyond the true count exposes an over-recursed residual
    for (int j = 1; j <= n; ++j) {
      auto [cue, res] = stage1.separate2(r);
      r = std::move(res);
      out.push_back({r.samples, n - j >= 2});
    }
    if (k % 8 == 0) out.push_back({std::vector<double>(item.mix.size(), 0.0), false});
  }
  return out;
}

TrainOutcome train_stop_classifier(sep::StopClassifier& clf, const std::vector<StopExample>& train_examples,
                                   const std::vector<StopExample>& valid_examples, const TrainConfig& cfg) {
  if (train_examples.empty() || valid_examples.empty())
    fail(Errc::empty_corpus, "stop-classifier training needs examples");
  bool any_cont = false, any_stop = false;
  for (const auto& e : train_examples) (e.continue_label ? any_cont : any_stop) = true;
  if (!any_cont || !any_stop)
    fail(Errc::single_class_data, "stop-classifier training needs both classes");

  LoopSpec spec;
  spec.trainables = clf.params.trainable();
  spec.make_batches = [&](Rng& rng) {
    std::vector<int> order(train_examples.size());
    std::iota(order.begin(), order.end(), 0);
    rng.shuffle(order);
    std::vector<std::vector<int>> batches;
    for (size_t at = 0; at < order.size(); at += static_cast<size_t>(cfg.batch_size)) {
      const size_t end = std::min(order.size(), at + static_cast<size_t>(cfg.batch_size));
      batches.emplace_back(order.begin() + static_cast<long>(at), order.begin() + static_cast<long>(end));
    }
    return batches;
  };
  spec.item_loss = [&](int idx) {
    const auto& e = train_examples[static_cast<size_t>(idx)];
    Var x = nn::constant(Tensor::row(e.samples));
    Var p = clf.continue_probability_node(x);
    Var q = nn::add_const(nn::scale(p, -1.0), 1.0);  // 1 - p
    const double y = e.continue_label ? 1.0 : 0.0;
    return nn::add(nn::scale(nn::log_(nn::add_const(p, 1e-12)), -y),
                   nn::scale(nn::log_(nn::add_const(q, 1e-12)), -(1.0 - y)));
  };
  spec.validation_metric = [&] { return stop_accuracy(clf, valid_examples); };
  return run_training(spec, cfg);
}

double stop_accuracy(const sep::StopClassifier& clf, const std::vector<StopExample>& examples) {
  if (examples.empty()) fail(Errc::empty_input, "no examples to score");
  size_t correct = 0;
  for (const auto& e : examples) {
    if (clf.should_continue(audio::Waveform{e.samples, audio::kPipelineRate}).first == e.continue_label)
      ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(examples.size());
}

}  // namespace corfsep::train
