#include "corfsep/extractor.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "corfsep/metrics.hpp"

namespace corfsep::extractor {

using nn::Tensor;
using nn::Var;

void ConditionedConfig::validate() const {
  separator.validate();
  if (separator.num_outputs != 1)
    fail(Errc::config_invalid, "the conditioned extractor is a single-output model");
  if (conditioning_blocks.empty())
    fail(Errc::config_invalid, "conditioning_blocks must not be empty");
  for (int b : conditioning_blocks)
    if (b < 1 || b > separator.num_blocks)
      fail(Errc::config_invalid, "conditioning block index out of range");
}

sep::SeparatorModel init_stage2(const ConditionedConfig& cfg, const sep::SeparatorModel& stage1,
                                uint64_t seed) {
  cfg.validate();
  if (stage1.cfg.encoder_window != cfg.separator.encoder_window ||
      stage1.cfg.encoder_stride != cfg.separator.encoder_stride ||
      stage1.cfg.feature_dim != cfg.separator.feature_dim)
    fail(Errc::geometry_mismatch, "stage-1 encoder geometry differs from the extractor config");
  auto model = sep::SeparatorModel::init(cfg.separator, seed, cfg.conditioning_blocks);
  model.params.get("cue_enc.w")->value = stage1.params.get("enc.w")->value;
  // Warm start: the extractor refines what the coarse model already does, so
  // every trainable parameter it shares with stage 1 (by name and shape)
  // starts from the stage-1 value. Conditioning-specific parameters and any
  // shape mismatches keep their fresh initialization.
  for (const auto& name : model.params.names()) {
    if (name == "cue_enc.w" || !stage1.params.has(name)) continue;
    auto dst = model.params.get(name);
    const auto src = stage1.params.get(name);
    if (src->value.rows == dst->value.rows && src->value.cols == dst->value.cols)
      dst->value = src->value;
  }
  // The cue norm starts as an identity gate (gamma 0, beta 1) so the product
  // at the conditioned blocks leaves the copied behavior intact at step 0;
  // training grows the modulation from there instead of recovering from a
  // randomly scaled representation.
  model.params.get("cue_gln.gamma")->value = Tensor(1, cfg.separator.feature_dim);
  model.params.get("cue_gln.beta")->value = Tensor::full(1, cfg.separator.feature_dim, 1.0);
  return model;
}

sep::FeatureMap encode_cue(const sep::SeparatorModel& stage2, const audio::Waveform& cue) {
  if (!stage2.has_cue_encoder())
    fail(Errc::checkpoint_incompatible, "model has no cue encoder");
  audio::validate(cue);
  nn::NoGradGuard ng;
  Var row = nn::constant(Tensor::row(cue.samples));
  Var f = stage2.encode_node(row, "cue_enc.w");
  return sep::FeatureMap{f->value, stage2.cfg.encoder_window, stage2.cfg.encoder_stride,
                         static_cast<int>(cue.samples.size()), cue.rate};
}

nn::Tensor condition(const Tensor& features, const Tensor& cue_features) {
  if (!features.same_shape(cue_features))
    fail(Errc::shape_mismatch, "conditioning arrays must share a shape");
  Tensor out = features;
  for (size_t i = 0; i < out.d.size(); ++i) out.d[i] *= cue_features.d[i];
  return out;
}

std::vector<ExtractPair> build_extract_pairs(const sep::SeparatorModel& stage1,
                                             const std::vector<train::TrainItem>& threemix) {
  std::vector<ExtractPair> pairs;
  pairs.reserve(threemix.size() * 3);
  for (const auto& item : threemix) {
    if (item.refs.size() != 3) fail(Errc::invalid_entry, "extractor training expects 3-speaker mixtures");
    audio::Waveform r{item.mix, audio::kPipelineRate};
    std::vector<size_t> available(item.refs.size());
    std::iota(available.begin(), available.end(), 0);
    for (int j = 0; j < 3; ++j) {
      auto [cue, res] = stage1.separate2(r);
      size_t pick = 0;
      double best = -1e300;
      for (size_t a = 0; a < available.size(); ++a) {
        const double s = metrics::si_snr(cue.samples, item.refs[available[a]]);
        if (s > best) {
          best = s;
          pick = a;
        }
      }
      pairs.push_back({item.mix, std::move(cue.samples), item.refs[available[pick]]});
      available.erase(available.begin() + static_cast<long>(pick));
      r = std::move(res);
    }
  }
  return pairs;
}

namespace {

double extraction_validation(const sep::SeparatorModel& stage2, const std::vector<ExtractPair>& pairs) {
  nn::NoGradGuard ng;
  double sum = 0.0;
  for (const auto& p : pairs) {
    Var x = nn::constant(Tensor::row(p.mix));
    Var cue = nn::constant(Tensor::row(p.cue));
    auto outs = stage2.forward(x, &cue);
    sum += metrics::si_snr(outs[0]->value.d, p.ref);
  }
  return sum / static_cast<double>(pairs.size());
}

}  // namespace

train::TrainOutcome train_stage2(sep::SeparatorModel& stage2, const sep::SeparatorModel& stage1,
                                 const std::vector<train::TrainItem>& threemix_train,
                                 const std::vector<train::TrainItem>& threemix_valid,
                                 const train::TrainConfig& cfg) {
  if (stage2.cfg.num_outputs != 1 || !stage2.has_cue_encoder())
    fail(Errc::config_invalid, "stage-2 training requires a conditioned single-output model");
  if (threemix_train.empty() || threemix_valid.empty())
    fail(Errc::empty_corpus, "stage-2 training needs nonempty train and validation sets");

  const auto train_pairs = build_extract_pairs(stage1, threemix_train);
  const auto valid_pairs = build_extract_pairs(stage1, threemix_valid);

  train::LoopSpec spec;
  spec.trainables = stage2.params.trainable();
  spec.make_batches = [&](Rng& rng) {
    std::vector<int> order(train_pairs.size());
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
    const auto& p = train_pairs[static_cast<size_t>(idx)];
    Var x = nn::constant(Tensor::row(p.mix));
    Var cue = nn::constant(Tensor::row(p.cue));
    auto outs = stage2.forward(x, &cue);
    return nn::scale(train::si_snr_node(outs[0], p.ref), -1.0);
  };
  spec.validation_metric = [&] { return extraction_validation(stage2, valid_pairs); };
  return train::run_training(spec, cfg);
}

}  // namespace corfsep::extractor
