#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "corfsep/autograd.hpp"
#include "corfsep/rng.hpp"
#include "corfsep/separator.hpp"

namespace corfsep::train {

struct TrainConfig {
  double initial_lr = 5e-4;
  int lr_halving_patience = 5;
  double grad_clip_l2 = 5.0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  int batch_size = 2;
  int max_epochs = 50;
  int max_steps = 0;  // 0: no step budget
  uint64_t seed = 0;

  void validate() const;
  bool operator==(const TrainConfig&) const = default;
};

// One supervised example held in memory: a mixture and its references.
struct TrainItem {
  std::vector<double> mix;
  std::vector<std::vector<double>> refs;
};

std::vector<TrainItem> load_items(const std::string& manifest_path);
std::vector<TrainItem> load_items(const std::vector<std::string>& manifest_paths);

// Differentiable SI-SNR (dB) of a 1xL estimate row against a fixed reference.
nn::Var si_snr_node(const nn::Var& est, const std::vector<double>& ref);

struct OrpitResult {
  nn::Var loss;  // 1x1
  int argmin = -1;
};

// min over i of [-si_snr(cue, refs[i]) + (-si_snr(res, sum of the others))/(N-1)].
// The leave-one-out sums are formed from a content-sorted total so the value
// is bit-identical under any permutation of refs.
OrpitResult orpit_loss(const nn::Var& cue, const nn::Var& res,
                       const std::vector<std::vector<double>>& refs);

// Plain-valued assignment of a (cue, residual) pair: index minimizing the
// OR-PIT candidate loss, no gradient tape.
int orpit_argmin(const std::vector<double>& cue, const std::vector<double>& res,
                 const std::vector<std::vector<double>>& refs);

class Adam {
 public:
  Adam(std::vector<nn::Var> params, const TrainConfig& cfg);
  double lr() const { return lr_; }
  void set_lr(double lr) { lr_ = lr; }
  void zero_grad();
  // Rescales all gradients so their global L2 norm is at most max_norm.
  // Returns the pre-clip norm.
  double clip_global_norm(double max_norm);
  void step();

 private:
  std::vector<nn::Var> params_;
  std::vector<nn::Tensor> m_, v_;
  double lr_, b1_, b2_, eps_ = 1e-8;
  int64_t t_ = 0;
};

// Halves the learning rate after exactly `patience` consecutive epochs
// without improvement of a higher-is-better metric.
class PlateauHalver {
 public:
  PlateauHalver(double initial_lr, int patience) : lr_(initial_lr), patience_(patience) {}
  double observe(double metric);
  double lr() const { return lr_; }

 private:
  double lr_;
  int patience_;
  double best_ = -1e300;
  int streak_ = 0;
};

struct EpochRecord {
  int epoch = 0;
  double train_loss = 0.0;
  double valid_metric_db = 0.0;
  double lr = 0.0;
};

std::string format_epoch(const EpochRecord& r);

struct TrainOutcome {
  std::vector<EpochRecord> log;
  double best_valid_metric_db = 0.0;
  int steps = 0;
  bool diverged = false;
};

// The schedule engine shared by every trainer: epoch loop, Adam with global
// gradient clipping, plateau halving, best-validation snapshots and the
// NaN-divergence abort that restores the last finite parameters.
struct LoopSpec {
  std::vector<nn::Var> trainables;
  std::function<std::vector<std::vector<int>>(Rng&)> make_batches;
  std::function<nn::Var(int)> item_loss;
  std::function<double()> validation_metric;  // higher is better
};

TrainOutcome run_training(const LoopSpec& spec, const TrainConfig& cfg);

// OR-PIT training over mixtures of any speaker count; batches are grouped by
// N. On return the model carries the best-validation parameters (or the last
// finite ones if a NaN loss aborted the run).
TrainOutcome train_stage1(sep::SeparatorModel& model, const std::vector<TrainItem>& train_items,
                          const std::vector<TrainItem>& valid_items, const TrainConfig& cfg);

// One stage-1 pass per 3-speaker mixture; the residual becomes a derived
// 2-speaker mixture whose references are the two sources the cue did not
// claim under the Eq.-style assignment.
std::vector<TrainItem> derive_residual_items(const sep::SeparatorModel& stage1,
                                             const std::vector<TrainItem>& threemix);

TrainOutcome finetune_stage1(sep::SeparatorModel& model, const std::vector<TrainItem>& threemix,
                             const std::vector<TrainItem>& valid_items, const TrainConfig& cfg);

struct StopExample {
  std::vector<double> samples;
  bool continue_label = false;
};

// Residual snapshots from running the stage-1 model on k-speaker mixtures,
// labeled CONTINUE while at least two speakers remain. Includes the
// untouched mixtures (r^0), over-recursion residuals and digital silence.
std::vector<StopExample> build_stop_examples(const sep::SeparatorModel& stage1,
                                             const std::vector<TrainItem>& items, uint64_t seed);

TrainOutcome train_stop_classifier(sep::StopClassifier& clf, const std::vector<StopExample>& train_examples,
                                   const std::vector<StopExample>& valid_examples, const TrainConfig& cfg);

double stop_accuracy(const sep::StopClassifier& clf, const std::vector<StopExample>& examples);

}  // namespace corfsep::train
