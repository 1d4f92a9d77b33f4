#include "corfsep/separator.hpp"

#include <algorithm>
#include <cmath>

#include "corfsep/rng.hpp"

namespace corfsep::sep {

using nn::Tensor;
using nn::Var;

void SeparatorConfig::validate() const {
  if (encoder_window < 1 || encoder_stride < 1 || feature_dim < 1 || chunk_size < 1 ||
      num_blocks < 1 || hidden_dim < 1 || num_outputs < 1)
    fail(Errc::config_invalid, "separator config fields must be positive");
  if (encoder_window % 2 == 0) {
    if (encoder_stride != encoder_window / 2)
      fail(Errc::config_invalid, "encoder_stride must be encoder_window/2 for even windows");
  } else if (encoder_stride != encoder_window) {
    fail(Errc::config_invalid, "encoder_stride must equal encoder_window for odd windows");
  }
  if (chunk_size % 2 != 0)
    fail(Errc::config_invalid, "chunk_size must be even (hop is chunk_size/2)");
}

int SeparatorConfig::frames_for(int len) const {
  if (len < encoder_window) fail(Errc::too_short_input, "input shorter than one encoder window");
  return (len - encoder_window) / encoder_stride + 1;
}

nn::Var ParamStore::add(const std::string& name, Tensor init, bool trainable) {
  if (by_name_.count(name)) fail(Errc::config_invalid, "duplicate parameter name " + name);
  names_.push_back(name);
  auto v = nn::make_leaf(std::move(init), trainable);
  by_name_[name] = v;
  return v;
}

const nn::Var& ParamStore::get(const std::string& name) const {
  auto it = by_name_.find(name);
  if (it == by_name_.end()) fail(Errc::checkpoint_incompatible, "missing parameter " + name);
  return it->second;
}

std::vector<nn::Var> ParamStore::trainable() const {
  std::vector<nn::Var> out;
  for (const auto& n : names_) {
    const auto& v = by_name_.at(n);
    if (v->requires_grad) out.push_back(v);
  }
  return out;
}

void ParamStore::set_trainable(bool on) {
  for (const auto& n : names_) {
    auto& v = by_name_.at(n);
    v->requires_grad = on;
    if (on) v->ensure_grad();
  }
}

ChunkPlan plan_chunks(int frames, int chunk_size) {
  if (frames < 1) fail(Errc::empty_input, "cannot chunk an empty feature map");
  const int hop = chunk_size / 2;
  ChunkPlan plan;
  plan.frames = frames;
  plan.chunk_size = chunk_size;
  plan.num_chunks = (frames + hop - 1) / hop;
  plan.row_of.assign(static_cast<size_t>(plan.num_chunks) * chunk_size, -1);
  std::vector<int> coverage(static_cast<size_t>(frames), 0);
  for (int c = 0; c < plan.num_chunks; ++c)
    for (int t = 0; t < chunk_size; ++t) {
      const int f = c * hop + t;
      if (f < frames) {
        plan.row_of[static_cast<size_t>(c) * chunk_size + t] = f;
        ++coverage[static_cast<size_t>(f)];
      }
    }
  plan.merge_scale.resize(static_cast<size_t>(frames));
  for (int f = 0; f < frames; ++f) plan.merge_scale[static_cast<size_t>(f)] = 1.0 / coverage[static_cast<size_t>(f)];
  return plan;
}

Tensor chunk_to_rows(const Tensor& features, const ChunkPlan& plan) {
  Tensor out(plan.num_chunks * plan.chunk_size, features.cols);
  for (size_t r = 0; r < plan.row_of.size(); ++r) {
    const int f = plan.row_of[r];
    if (f < 0) continue;
    for (int j = 0; j < features.cols; ++j) out.at(static_cast<int>(r), j) = features.at(f, j);
  }
  return out;
}

Tensor merge_rows(const Tensor& chunked, const ChunkPlan& plan) {
  Tensor out(plan.frames, chunked.cols);
  for (size_t r = 0; r < plan.row_of.size(); ++r) {
    const int f = plan.row_of[r];
    if (f < 0) continue;
    for (int j = 0; j < chunked.cols; ++j) out.at(f, j) += chunked.at(static_cast<int>(r), j);
  }
  for (int f = 0; f < plan.frames; ++f)
    for (int j = 0; j < out.cols; ++j) out.at(f, j) *= plan.merge_scale[static_cast<size_t>(f)];
  return out;
}

namespace {

constexpr double kNormEps = 1e-8;

std::vector<int> im2col_indices(int window, int stride, int frames) {
  std::vector<int> idx(static_cast<size_t>(frames) * window);
  for (int t = 0; t < frames; ++t)
    for (int k = 0; k < window; ++k) idx[static_cast<size_t>(t) * window + k] = t * stride + k;
  return idx;
}

// Per-feature gain/bias layer norm with statistics over the whole map.
Var gln(const Var& x, const Var& gamma, const Var& beta) {
  const double n = static_cast<double>(x->value.numel());
  Var mean = nn::scale(nn::sum_all(x), 1.0 / n);
  Var centered = nn::add_bscalar(x, nn::scale(mean, -1.0));
  Var var = nn::scale(nn::sum_all(nn::mul(centered, centered)), 1.0 / n);
  Var inv = nn::reciprocal(nn::sqrt_(nn::add_const(var, kNormEps)));
  return nn::add_rowvec(nn::mul_rowvec(nn::mul_bscalar(centered, inv), gamma), beta);
}

Tensor lstm_weight(int in_dim, int hidden, Rng& rng) {
  const double s = 1.0 / std::sqrt(static_cast<double>(in_dim));
  return Tensor::uniform(in_dim, 4 * hidden, -s, s, rng);
}

Tensor lstm_bias(int hidden) {
  Tensor b(1, 4 * hidden);
  // forget gate opens at init so state flows through early training
  for (int j = hidden; j < 2 * hidden; ++j) b.d[static_cast<size_t>(j)] = 1.0;
  return b;
}

Tensor linear_weight(int in_dim, int out_dim, Rng& rng) {
  const double s = 1.0 / std::sqrt(static_cast<double>(in_dim));
  return Tensor::uniform(in_dim, out_dim, -s, s, rng);
}

// One direction over steps; steps[t] lists the tall-matrix rows forming the
// batch at time t. Returns the hidden state per step.
std::vector<Var> lstm_direction(const Var& tall, const std::vector<std::vector<int>>& steps,
                                const Var& wx, const Var& wh, const Var& b, int hidden) {
  const int batch = static_cast<int>(steps.front().size());
  Var h = nn::constant(Tensor(batch, hidden));
  Var c = nn::constant(Tensor(batch, hidden));
  std::vector<Var> outs;
  outs.reserve(steps.size());
  for (const auto& idx : steps) {
    Var xt = nn::gather_rows(tall, idx);
    Var gates = nn::add_rowvec(nn::add(nn::matmul(xt, wx), nn::matmul(h, wh)), b);
    Var gi = nn::sigmoid(nn::slice_cols(gates, 0, hidden));
    Var gf = nn::sigmoid(nn::slice_cols(gates, hidden, 2 * hidden));
    Var gg = nn::tanh_(nn::slice_cols(gates, 2 * hidden, 3 * hidden));
    Var go = nn::sigmoid(nn::slice_cols(gates, 3 * hidden, 4 * hidden));
    c = nn::add(nn::mul(gf, c), nn::mul(gi, gg));
    h = nn::mul(go, nn::tanh_(c));
    outs.push_back(h);
  }
  return outs;
}

// Bidirectional pass, projection back to feature_dim, layer norm, residual.
Var sequence_pass(const Var& x_tall, const std::vector<std::vector<int>>& steps,
                  const ParamStore& params, const std::string& prefix, int hidden) {
  auto fw = lstm_direction(x_tall, steps, params.get(prefix + ".fw.wx"), params.get(prefix + ".fw.wh"),
                           params.get(prefix + ".fw.b"), hidden);
  std::vector<std::vector<int>> rev(steps.rbegin(), steps.rend());
  auto bw = lstm_direction(x_tall, rev, params.get(prefix + ".bw.wx"), params.get(prefix + ".bw.wh"),
                           params.get(prefix + ".bw.b"), hidden);
  const size_t T = steps.size();
  std::vector<Var> parts;
  parts.reserve(T);
  for (size_t t = 0; t < T; ++t) parts.push_back(nn::concat_cols(fw[t], bw[T - 1 - t]));
  Var seq_out = nn::stack_rows(parts, steps, x_tall->value.rows);
  Var proj = nn::add_rowvec(nn::matmul(seq_out, params.get(prefix + ".proj.w")), params.get(prefix + ".proj.b"));
  Var normed = gln(proj, params.get(prefix + ".ln.gamma"), params.get(prefix + ".ln.beta"));
  return nn::add(x_tall, normed);
}

void add_sequence_params(ParamStore& params, const std::string& prefix, int feature, int hidden, Rng& rng) {
  params.add(prefix + ".fw.wx", lstm_weight(feature, hidden, rng));
  params.add(prefix + ".fw.wh", lstm_weight(hidden, hidden, rng));
  params.add(prefix + ".fw.b", lstm_bias(hidden));
  params.add(prefix + ".bw.wx", lstm_weight(feature, hidden, rng));
  params.add(prefix + ".bw.wh", lstm_weight(hidden, hidden, rng));
  params.add(prefix + ".bw.b", lstm_bias(hidden));
  params.add(prefix + ".proj.w", linear_weight(2 * hidden, feature, rng));
  params.add(prefix + ".proj.b", Tensor(1, feature));
  params.add(prefix + ".ln.gamma", Tensor::full(1, feature, 1.0));
  params.add(prefix + ".ln.beta", Tensor(1, feature));
}

std::string block_prefix(int b, const char* path) {
  return "block" + std::to_string(b) + "." + path;
}

}  // namespace

SeparatorModel SeparatorModel::init(const SeparatorConfig& cfg, uint64_t seed,
                                    std::vector<int> conditioning_blocks) {
  cfg.validate();
  std::sort(conditioning_blocks.begin(), conditioning_blocks.end());
  for (int b : conditioning_blocks)
    if (b < 1 || b > cfg.num_blocks)
      fail(Errc::config_invalid, "conditioning block index out of range");

  SeparatorModel m;
  m.cfg = cfg;
  m.conditioning_blocks = std::move(conditioning_blocks);
  Rng rng(sub_seed(seed, 0xC0F5));

  m.params.add("enc.w", linear_weight(cfg.encoder_window, cfg.feature_dim, rng));
  m.params.add("gln.gamma", Tensor::full(1, cfg.feature_dim, 1.0));
  m.params.add("gln.beta", Tensor(1, cfg.feature_dim));
  if (!m.conditioning_blocks.empty()) {
    // cue front-end: a borrowed frozen encoder (filled in by the caller)
    // plus this model's own normalization of the cue features
    m.params.add("cue_enc.w", Tensor(cfg.encoder_window, cfg.feature_dim), false);
    m.params.add("cue_gln.gamma", Tensor::full(1, cfg.feature_dim, 1.0));
    m.params.add("cue_gln.beta", Tensor(1, cfg.feature_dim));
  }
  for (int b = 0; b < cfg.num_blocks; ++b) {
    add_sequence_params(m.params, block_prefix(b, "intra"), cfg.feature_dim, cfg.hidden_dim, rng);
    add_sequence_params(m.params, block_prefix(b, "inter"), cfg.feature_dim, cfg.hidden_dim, rng);
  }
  for (int o = 0; o < cfg.num_outputs; ++o) {
    const std::string p = "mask" + std::to_string(o);
    m.params.add(p + ".w", linear_weight(cfg.feature_dim, cfg.feature_dim, rng));
    m.params.add(p + ".b", Tensor(1, cfg.feature_dim));
    m.params.add(p + ".slope", Tensor::full(1, cfg.feature_dim, 0.25));
  }
  m.params.add("dec.w", linear_weight(cfg.feature_dim, cfg.encoder_window, rng));
  return m;
}

nn::Var SeparatorModel::encode_node(const Var& x_row, const std::string& enc_name) const {
  const int len = x_row->value.cols;
  const int frames = cfg.frames_for(len);
  auto idx = im2col_indices(cfg.encoder_window, cfg.encoder_stride, frames);
  Var cols = nn::gather_elems(x_row, std::move(idx), frames, cfg.encoder_window);
  return nn::relu(nn::matmul(cols, params.get(enc_name)));
}

nn::Var SeparatorModel::run_blocks_(const Var& chunked, const ChunkPlan& plan, const Var* cue_chunked) const {
  std::vector<std::vector<int>> intra_steps(static_cast<size_t>(plan.chunk_size));
  for (int t = 0; t < plan.chunk_size; ++t) {
    auto& s = intra_steps[static_cast<size_t>(t)];
    s.resize(static_cast<size_t>(plan.num_chunks));
    for (int c = 0; c < plan.num_chunks; ++c) s[static_cast<size_t>(c)] = c * plan.chunk_size + t;
  }
  std::vector<std::vector<int>> inter_steps(static_cast<size_t>(plan.num_chunks));
  for (int c = 0; c < plan.num_chunks; ++c) {
    auto& s = inter_steps[static_cast<size_t>(c)];
    s.resize(static_cast<size_t>(plan.chunk_size));
    for (int t = 0; t < plan.chunk_size; ++t) s[static_cast<size_t>(t)] = c * plan.chunk_size + t;
  }

  Var x = chunked;
  for (int b = 0; b < cfg.num_blocks; ++b) {
    if (cue_chunked &&
        std::binary_search(conditioning_blocks.begin(), conditioning_blocks.end(), b + 1))
      x = nn::mul(x, *cue_chunked);
    x = sequence_pass(x, intra_steps, params, block_prefix(b, "intra"), cfg.hidden_dim);
    x = sequence_pass(x, inter_steps, params, block_prefix(b, "inter"), cfg.hidden_dim);
  }
  return x;
}

std::vector<nn::Var> SeparatorModel::forward(const Var& x_row, const Var* cue_row) const {
  if (cue_row && !has_cue_encoder())
    fail(Errc::checkpoint_incompatible, "model has no cue encoder; cannot condition");
  if (!cue_row && !conditioning_blocks.empty())
    fail(Errc::empty_input, "conditioned model requires a cue input");

  const int len = x_row->value.cols;
  const int frames = cfg.frames_for(len);
  Var features = encode_node(x_row, "enc.w");
  Var normed = gln(features, params.get("gln.gamma"), params.get("gln.beta"));
  ChunkPlan plan = plan_chunks(frames, cfg.chunk_size);
  Var chunked = nn::gather_rows(normed, plan.row_of);

  Var cue_chunked;
  if (cue_row) {
    Var cue_feat = encode_node(*cue_row, "cue_enc.w");
    Var cue_norm = gln(cue_feat, params.get("cue_gln.gamma"), params.get("cue_gln.beta"));
    if (cue_norm->value.rows != frames) {
      // guard for callers handing in a cue of a different length
      std::vector<int> fit(static_cast<size_t>(frames));
      for (int f = 0; f < frames; ++f) fit[static_cast<size_t>(f)] = f < cue_norm->value.rows ? f : -1;
      cue_norm = nn::gather_rows(cue_norm, std::move(fit));
    }
    cue_chunked = nn::gather_rows(cue_norm, plan.row_of);
  }

  Var hidden = run_blocks_(chunked, plan, cue_row ? &cue_chunked : nullptr);
  Var merged = nn::rows_scale(nn::scatter_add_rows(hidden, plan.row_of, frames), plan.merge_scale);

  auto ola_idx = im2col_indices(cfg.encoder_window, cfg.encoder_stride, frames);
  std::vector<Var> outs;
  outs.reserve(static_cast<size_t>(cfg.num_outputs));
  for (int o = 0; o < cfg.num_outputs; ++o) {
    const std::string p = "mask" + std::to_string(o);
    Var mask = nn::prelu(nn::add_rowvec(nn::matmul(merged, params.get(p + ".w")), params.get(p + ".b")),
                         params.get(p + ".slope"));
    Var masked = nn::mul(mask, features);
    Var dec_frames = nn::matmul(masked, params.get("dec.w"));
    outs.push_back(nn::scatter_add_elems(dec_frames, ola_idx, len));
  }
  return outs;
}

std::pair<Waveform, Waveform> SeparatorModel::separate2(const Waveform& x) const {
  if (cfg.num_outputs != 2) fail(Errc::config_invalid, "separate2 requires a two-output model");
  audio::validate(x);
  nn::NoGradGuard ng;
  Var x_row = nn::constant(Tensor::row(x.samples));
  auto outs = forward(x_row);
  Waveform cue{outs[0]->value.d, x.rate};
  Waveform residual{outs[1]->value.d, x.rate};
  return {std::move(cue), std::move(residual)};
}

Waveform SeparatorModel::extract(const Waveform& x, const Waveform& cue) const {
  if (cfg.num_outputs != 1) fail(Errc::config_invalid, "extract requires a single-output model");
  audio::validate(x);
  audio::validate(cue);
  nn::NoGradGuard ng;
  Var x_row = nn::constant(Tensor::row(x.samples));
  Var cue_row = nn::constant(Tensor::row(cue.samples));
  auto outs = forward(x_row, &cue_row);
  return Waveform{outs[0]->value.d, x.rate};
}

FeatureMap SeparatorModel::encode(const Waveform& w) const {
  audio::validate(w);
  nn::NoGradGuard ng;
  Var x_row = nn::constant(Tensor::row(w.samples));
  Var f = encode_node(x_row, "enc.w");
  return FeatureMap{f->value, cfg.encoder_window, cfg.encoder_stride,
                    static_cast<int>(w.samples.size()), w.rate};
}

Waveform SeparatorModel::decode(const FeatureMap& f) const {
  if (f.window != cfg.encoder_window || f.stride != cfg.encoder_stride)
    fail(Errc::geometry_mismatch, "feature map geometry does not match this model");
  if (f.values.cols != cfg.feature_dim)
    fail(Errc::geometry_mismatch, "feature dim does not match this model");
  const int expect = cfg.frames_for(f.source_len);
  if (f.values.rows != expect) fail(Errc::geometry_mismatch, "frame count inconsistent with source length");
  nn::NoGradGuard ng;
  Var feat = nn::constant(f.values);
  Var frames = nn::matmul(feat, params.get("dec.w"));
  auto idx = im2col_indices(f.window, f.stride, f.values.rows);
  Var out = nn::scatter_add_elems(frames, std::move(idx), f.source_len);
  return Waveform{out->value.d, f.rate};
}

void StopClassifierConfig::validate() const {
  if (hidden_dim < 1) fail(Errc::config_invalid, "stop classifier hidden_dim must be positive");
  if (!(threshold > 0.0 && threshold < 1.0))
    fail(Errc::config_invalid, "stop classifier threshold must lie in (0,1)");
}

StopClassifier StopClassifier::init(const StopClassifierConfig& cfg, const SeparatorConfig& frontend,
                                    const Tensor& frozen_encoder, uint64_t seed) {
  cfg.validate();
  frontend.validate();
  if (frozen_encoder.rows != frontend.encoder_window || frozen_encoder.cols != frontend.feature_dim)
    fail(Errc::geometry_mismatch, "encoder weight shape does not match frontend geometry");
  StopClassifier c;
  c.cfg = cfg;
  c.frontend = frontend;
  Rng rng(sub_seed(seed, 0x570F));
  c.params.add("enc.w", frozen_encoder, false);
  c.params.add("ff1.w", linear_weight(2 * frontend.feature_dim, cfg.hidden_dim, rng));
  c.params.add("ff1.b", Tensor(1, cfg.hidden_dim));
  c.params.add("ff2.w", linear_weight(cfg.hidden_dim, 1, rng));
  c.params.add("ff2.b", Tensor(1, 1));
  return c;
}

nn::Var StopClassifier::continue_probability_node(const Var& x_row) const {
  const int len = x_row->value.cols;
  const int frames = frontend.frames_for(len);
  auto idx = im2col_indices(frontend.encoder_window, frontend.encoder_stride, frames);
  Var cols = nn::gather_elems(x_row, std::move(idx), frames, frontend.encoder_window);
  Var feat = nn::relu(nn::matmul(cols, params.get("enc.w")));
  Var mean = nn::scale(nn::sum_rows(feat), 1.0 / frames);
  Var mx = nn::max_rows(feat);
  Var pooled = nn::concat_cols(mean, mx);
  Var h = nn::relu(nn::add_rowvec(nn::matmul(pooled, params.get("ff1.w")), params.get("ff1.b")));
  Var logit = nn::add_rowvec(nn::matmul(h, params.get("ff2.w")), params.get("ff2.b"));
  return nn::sigmoid(logit);
}

double StopClassifier::continue_probability(const Waveform& residual) const {
  audio::validate(residual);
  nn::NoGradGuard ng;
  Var x_row = nn::constant(Tensor::row(residual.samples));
  return continue_probability_node(x_row)->value.d[0];
}

std::pair<bool, double> StopClassifier::should_continue(const Waveform& residual) const {
  const double p = continue_probability(residual);
  const bool cont = p >= cfg.threshold;
  return {cont, cont ? p : 1.0 - p};
}

}  // namespace corfsep::sep
