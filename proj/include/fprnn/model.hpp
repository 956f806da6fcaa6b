#pragma once

// Token-level sequence model around one fixed-point layer:
//   e = embed(ids), x = e W_in^T, y* = FP layer(x), z = e + y* W_out^T,
//   logits = z W_head^T + b_head.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "fprnn/autodiff.hpp"
#include "fprnn/diagonal_scan.hpp"
#include "fprnn/fixed_point.hpp"
#include "fprnn/fp_mamba.hpp"
#include "fprnn/train.hpp"

namespace fprnn {

enum class ModelKind { fp_mamba, fp_rnn_vector, diagonal_baseline };

inline ModelKind parse_model_kind(const std::string& s) {
  if (s == "fp_mamba") return ModelKind::fp_mamba;
  if (s == "fp_rnn_vector") return ModelKind::fp_rnn_vector;
  if (s == "diagonal_baseline") return ModelKind::diagonal_baseline;
  throw std::invalid_argument("unknown model: " + s);
}

inline const char* to_string(ModelKind k) {
  switch (k) {
    case ModelKind::fp_mamba: return "fp_mamba";
    case ModelKind::fp_rnn_vector: return "fp_rnn_vector";
    case ModelKind::diagonal_baseline: return "diagonal_baseline";
  }
  return "?";
}

struct ModelConfig {
  ModelKind kind = ModelKind::fp_mamba;
  std::size_t vocab = 0;
  std::size_t d_model = 8;
  std::size_t expansion = 2;
  std::size_t d_state = 16;
  MixerVariant mixer = MixerVariant::kronecker;
  std::size_t rank = 2;
  double contraction_eps = 0.01;
  bool rescale_alpha = false;
  std::size_t power_iters = 50;
  FpMambaDependence dep;
  std::size_t conv_width = 0;
  bool skip_uses_adjusted = true;

  std::size_t d_inner() const { return expansion * d_model; }

  /// Layer configuration with the model-kind overrides applied.
  FpMambaConfig layer() const {
    FpMambaConfig c;
    c.d_model = d_model;
    c.expansion = expansion;
    c.d_state = d_state;
    c.conv_width = conv_width;
    c.skip_uses_adjusted = skip_uses_adjusted;
    c.dep = dep;
    if (kind == ModelKind::diagonal_baseline) {
      c.use_mixer = false;
      c.dep = FpMambaDependence::none();
    }
    c.mixer = mixer_spec();
    c.mixer.hidden_dependence = c.dep.q;
    return c;
  }

  MixerSpec mixer_spec() const {
    MixerSpec m;
    m.variant = mixer;
    m.rank = rank;
    m.d_inner = d_inner();
    m.contraction_eps = contraction_eps;
    m.rescale_alpha = rescale_alpha;
    m.power_iters = power_iters;
    m.hidden_dependence = dep.q;
    return m;
  }

  void validate() const {
    if (vocab == 0) throw std::invalid_argument("ModelConfig: vocab must be set");
    if (kind == ModelKind::fp_rnn_vector) {
      mixer_spec().validate();
    } else {
      layer().validate();
    }
  }
};

struct Model {
  ModelConfig cfg;
  Mat embed;   // vocab x d_model
  Mat head;    // vocab x d_model
  Mat head_b;  // 1 x vocab
  FpMambaParams mamba;       // fp_mamba, diagonal_baseline (owns in/out projections)
  GatedDiagonalParams rnn;   // fp_rnn_vector
  Mat rnn_in, rnn_out;       // d x d_model, d_model x d

  static Model zeros(const ModelConfig& cfg) {
    cfg.validate();
    Model m;
    m.cfg = cfg;
    m.embed = Mat(cfg.vocab, cfg.d_model);
    m.head = Mat(cfg.vocab, cfg.d_model);
    m.head_b = Mat(1, cfg.vocab);
    if (cfg.kind == ModelKind::fp_rnn_vector) {
      const std::size_t d = cfg.d_inner();
      m.rnn.dim = d;
      m.rnn.mixer = cfg.mixer_spec();
      m.rnn.gate_w = Mat(d, d);
      m.rnn.gate_b = Mat(1, d);
      m.rnn.in_map = Mat(d, d);
      m.rnn.mixer_w = MixerWeights::zeros(m.rnn.mixer);
      m.rnn_in = Mat(d, cfg.d_model);
      m.rnn_out = Mat(cfg.d_model, d);
    } else {
      m.mamba = FpMambaParams::zeros(cfg.layer());
    }
    return m;
  }

  static Model init(const ModelConfig& cfg, std::mt19937_64& rng) {
    Model m = zeros(cfg);
    const double sd = 1.0 / std::sqrt(static_cast<double>(cfg.d_model));
    m.embed = random_normal(cfg.vocab, cfg.d_model, 1.0, rng);
    m.head = random_normal(cfg.vocab, cfg.d_model, sd, rng);
    if (cfg.kind == ModelKind::fp_rnn_vector) {
      const std::size_t d = cfg.d_inner();
      m.rnn = GatedDiagonalParams::init(d, cfg.mixer_spec(), rng);
      m.rnn_in = random_normal(d, cfg.d_model, sd, rng);
      m.rnn_out = random_normal(cfg.d_model, d, 1.0 / std::sqrt(static_cast<double>(d)), rng);
    } else {
      m.mamba = FpMambaParams::init(cfg.layer(), rng);
    }
    return m;
  }

  template <class F>
  void for_each_param(const std::string& prefix, F&& f) {
    f(prefix + "embed", embed);
    f(prefix + "head", head);
    f(prefix + "head_b", head_b);
    if (cfg.kind == ModelKind::fp_rnn_vector) {
      f(prefix + "rnn_in", rnn_in);
      f(prefix + "rnn_out", rnn_out);
      rnn.for_each_param(prefix + "layer.", f);
    } else {
      mamba.for_each_param(prefix + "layer.", f);
    }
  }

  std::vector<Mat*> params() {
    std::vector<Mat*> out;
    for_each_param("", [&](const std::string&, Mat& m) { out.push_back(&m); });
    return out;
  }

  std::size_t parameter_count() {
    std::size_t n = 0;
    for (Mat* m : params()) n += m->size();
    return n;
  }
};

struct ModelVars {
  ad::Var embed, head, head_b, in_proj, out_proj;
  FpMambaVars mamba;
  GatedDiagonalVars rnn;
};

inline ModelVars bind(ad::Tape& t, const Model& m, Model* g) {
  ModelVars v;
  v.embed = t.param(m.embed, g ? &g->embed : nullptr);
  v.head = t.param(m.head, g ? &g->head : nullptr);
  v.head_b = t.param(m.head_b, g ? &g->head_b : nullptr);
  if (m.cfg.kind == ModelKind::fp_rnn_vector) {
    v.in_proj = t.param(m.rnn_in, g ? &g->rnn_in : nullptr);
    v.out_proj = t.param(m.rnn_out, g ? &g->rnn_out : nullptr);
    v.rnn = bind(t, m.rnn, g ? &g->rnn : nullptr);
  } else {
    v.in_proj = t.param(m.mamba.in_proj, g ? &g->mamba.in_proj : nullptr);
    v.out_proj = t.param(m.mamba.out_proj, g ? &g->mamba.out_proj : nullptr);
    v.mamba = bind(t, m.mamba, g ? &g->mamba : nullptr);
  }
  return v;
}

/// One fixed-point iteration of the model's layer.
inline ad::Var layer_step(const Model& m, const ModelVars& v, ad::Var x, ad::Var y_prev, std::size_t seq_len) {
  if (m.cfg.kind == ModelKind::fp_rnn_vector) return fp_rnn_step(m.rnn, v.rnn, x, y_prev, seq_len);
  return fp_mamba_step(m.mamba, v.mamba, x, y_prev, seq_len);
}

inline ad::Var readout(const ModelVars& v, ad::Var e, ad::Var y) {
  ad::Var z = ad::add(e, ad::linear(y, v.out_proj));
  return ad::add_row(ad::linear(z, v.head), v.head_b);
}

/// The diagonal baseline runs exactly one iteration.
inline FixedPointConfig effective_solver(const Model& m, FixedPointConfig c) {
  if (m.cfg.kind == ModelKind::diagonal_baseline) {
    c.ell_max = 1;
    c.sample_ell_max = false;
  }
  return c;
}

struct ForwardResult {
  double loss = 0.0;
  Mat logits;
  Mat y_star;
  FixedPointResult solve;
  std::size_t correct = 0;
  std::size_t supervised = 0;
  double accuracy() const { return supervised ? static_cast<double>(correct) / static_cast<double>(supervised) : 0.0; }
};

inline std::vector<std::size_t> masked_argmax_hits(const Mat& logits, std::span<const int> targets,
                                                   std::span<const int> mask, std::size_t* supervised) {
  std::vector<std::size_t> hits;
  std::size_t n = 0;
  for (std::size_t r = 0; r < logits.rows; ++r) {
    if (!mask[r]) continue;
    ++n;
    const auto row = logits.row(r);
    const auto best = static_cast<int>(std::max_element(row.begin(), row.end()) - row.begin());
    if (best == targets[r]) hits.push_back(r);
  }
  if (supervised) *supervised = n;
  return hits;
}

/// Solves the layer without a tape, then (if `grads` is given) replays the
/// last k + 1 iterations on a tape and accumulates parameter gradients of
/// the masked cross-entropy into `grads`.
inline ForwardResult model_forward(const Model& m, std::span<const int> ids, std::span<const int> targets,
                                   std::span<const int> mask, std::size_t batch, std::size_t seq_len,
                                   FixedPointConfig solver, std::size_t k, Model* grads = nullptr,
                                   std::mt19937_64* rng = nullptr) {
  if (ids.size() != batch * seq_len) throw DimensionError("model_forward: ids size != batch * seq_len");
  solver = effective_solver(m, solver);
  solver.keep_last = std::max(solver.keep_last, k + 1);

  Mat x_plain;
  {
    ad::Tape t(false);
    const ModelVars v = bind(t, m, nullptr);
    x_plain = ad::linear(ad::embedding(ids, v.embed), v.in_proj).value();
  }
  StepFn step = [&](const Mat& y_prev) {
    ad::Tape t(false);
    const ModelVars v = bind(t, m, nullptr);
    return layer_step(m, v, t.constant(x_plain), t.constant(y_prev), seq_len).value();
  };
  ForwardResult out;
  out.solve = solve(step, batch, seq_len, x_plain.cols, solver, rng);

  ad::Tape t(grads != nullptr);
  const ModelVars v = bind(t, m, grads);
  ad::Var e = ad::embedding(ids, v.embed);
  ad::Var x = ad::linear(e, v.in_proj);
  StepRecorder rec = [&](ad::Tape&, ad::Var y) { return layer_step(m, v, x, y, seq_len); };
  ad::Var y = replay_fixed_point(t, rec, out.solve, k);
  ad::Var logits = readout(v, e, y);
  out.y_star = y.value();
  out.logits = logits.value();
  const auto hits = masked_argmax_hits(out.logits, targets, mask, &out.supervised);
  out.correct = hits.size();
  ad::Var loss = ad::cross_entropy_masked(logits, targets, mask);
  out.loss = loss.value()(0, 0);
  if (grads) t.backward(loss);
  return out;
}

}  // namespace fprnn
