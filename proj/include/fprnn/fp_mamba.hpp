#pragma once

// Matrix-state fixed-point Mamba layer.
//
// One iteration maps the previous output iterate y^{l-1} (T x d_inner) to
//   x~_t   = Q_t (x_t - y_t^{l-1}) + y_t^{l-1}
//   H_t    = lambda_t * H_{t-1} + b_t (Delta_t * x~_t)^T
//   y_t    = c_t^T H_t + D * x~_t
//   out_t  = normalize(SiLU(W_g x_t) * y_t)
// where lambda, Q, b and c may also read the shifted iterate y_{t-1}^{l-1}.

#include <cmath>
#include <cstddef>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "fprnn/autodiff.hpp"
#include "fprnn/fixed_point.hpp"
#include "fprnn/mixers.hpp"
#include "fprnn/numerics.hpp"

namespace fprnn {

/// Which selective parameters read the shifted iterate y_{t-1}^{l-1}.
struct FpMambaDependence {
  bool lambda = true;
  bool q = true;
  bool b = true;
  bool c = true;

  static FpMambaDependence none() { return {false, false, false, false}; }
  static FpMambaDependence bc_only() { return {false, false, true, true}; }
};

struct FpMambaConfig {
  std::size_t d_model = 8;
  std::size_t expansion = 2;
  std::size_t d_state = 16;
  MixerSpec mixer;
  // false forces Q = I (plain selective SSM when iterated once).
  bool use_mixer = true;
  FpMambaDependence dep;
  // Skip term D * x~ (true) or D * x (false).
  bool skip_uses_adjusted = true;
  bool normalize_output = true;
  // Depthwise causal convolution on the layer input; 0 disables it.
  std::size_t conv_width = 0;
  double dt_min = 1e-3;
  double dt_max = 1e-1;

  std::size_t d_inner() const { return expansion * d_model; }

  void validate() const {
    if (d_model == 0 || expansion == 0 || d_state == 0) throw DimensionError("FpMambaConfig: zero dimension");
    if (use_mixer) {
      if (mixer.d_inner != d_inner()) throw DimensionError("FpMambaConfig: mixer.d_inner must equal d_inner");
      if (mixer.hidden_dependence != dep.q)
        throw std::invalid_argument("FpMambaConfig: mixer.hidden_dependence must match dep.q");
      mixer.validate();
    }
    if (!(dt_min > 0.0 && dt_max >= dt_min)) throw std::invalid_argument("FpMambaConfig: bad dt range");
  }
};

struct FpMambaParams {
  FpMambaConfig cfg;
  Mat omega;               // d_state x d_inner, lambda_log = exp(omega)
  Mat w_delta, w_delta_y;  // d_inner x d_inner
  Mat b_delta;             // 1 x d_inner
  Mat w_b_x, w_b_y;        // d_state x d_inner
  Mat w_c_x, w_c_y;        // d_state x d_inner
  Mat w_gate;              // d_inner x d_inner
  Mat skip_d;              // 1 x d_inner
  Mat in_proj;             // d_inner x d_model
  Mat out_proj;            // d_model x d_inner
  std::vector<Mat> conv;   // conv_width taps, 1 x d_inner each
  MixerWeights mixer_w;

  static FpMambaParams zeros(const FpMambaConfig& cfg) {
    cfg.validate();
    FpMambaParams p;
    p.cfg = cfg;
    const std::size_t d = cfg.d_inner(), s = cfg.d_state;
    p.omega = Mat(s, d);
    p.w_delta = Mat(d, d);
    p.w_delta_y = Mat(d, d);
    p.b_delta = Mat(1, d);
    p.w_b_x = Mat(s, d);
    p.w_b_y = Mat(s, d);
    p.w_c_x = Mat(s, d);
    p.w_c_y = Mat(s, d);
    p.w_gate = Mat(d, d);
    p.skip_d = Mat(1, d);
    p.in_proj = Mat(d, cfg.d_model);
    p.out_proj = Mat(cfg.d_model, d);
    p.conv.assign(cfg.conv_width, Mat(1, d));
    if (cfg.use_mixer) p.mixer_w = MixerWeights::zeros(cfg.mixer);
    return p;
  }

  static FpMambaParams init(const FpMambaConfig& cfg, std::mt19937_64& rng) {
    FpMambaParams p = zeros(cfg);
    const std::size_t d = cfg.d_inner(), s = cfg.d_state;
    const double sd = 1.0 / std::sqrt(static_cast<double>(d));
    for (std::size_t i = 0; i < s; ++i)
      for (std::size_t j = 0; j < d; ++j) p.omega(i, j) = std::log(static_cast<double>(i + 1));
    p.w_delta = random_normal(d, d, sd, rng);
    if (cfg.dep.lambda) p.w_delta_y = random_normal(d, d, sd, rng);
    std::uniform_real_distribution<double> u(std::log(cfg.dt_min), std::log(cfg.dt_max));
    for (std::size_t j = 0; j < d; ++j) {
      const double dt = std::exp(u(rng));
      p.b_delta(0, j) = dt + std::log(-std::expm1(-dt));  // softplus^{-1}(dt)
    }
    p.w_b_x = random_normal(s, d, sd, rng);
    p.w_c_x = random_normal(s, d, sd, rng);
    if (cfg.dep.b) p.w_b_y = random_normal(s, d, sd, rng);
    if (cfg.dep.c) p.w_c_y = random_normal(s, d, sd, rng);
    p.w_gate = random_normal(d, d, sd, rng);
    p.skip_d = Mat(1, d, 1.0);
    p.in_proj = random_normal(d, cfg.d_model, 1.0 / std::sqrt(static_cast<double>(cfg.d_model)), rng);
    p.out_proj = random_normal(cfg.d_model, d, sd, rng);
    for (std::size_t k = 0; k < cfg.conv_width; ++k) p.conv[k] = Mat(1, d, k == 0 ? 1.0 : 0.0);
    if (cfg.use_mixer) p.mixer_w = MixerWeights::init(cfg.mixer, rng);
    return p;
  }

  template <class F>
  void for_each_param(const std::string& prefix, F&& f) {
    f(prefix + "omega", omega);
    f(prefix + "w_delta", w_delta);
    if (cfg.dep.lambda) f(prefix + "w_delta_y", w_delta_y);
    f(prefix + "b_delta", b_delta);
    f(prefix + "w_b_x", w_b_x);
    if (cfg.dep.b) f(prefix + "w_b_y", w_b_y);
    f(prefix + "w_c_x", w_c_x);
    if (cfg.dep.c) f(prefix + "w_c_y", w_c_y);
    f(prefix + "w_gate", w_gate);
    f(prefix + "skip_d", skip_d);
    f(prefix + "in_proj", in_proj);
    f(prefix + "out_proj", out_proj);
    for (std::size_t k = 0; k < conv.size(); ++k) f(prefix + "conv." + std::to_string(k), conv[k]);
    if (cfg.use_mixer) mixer_w.for_each_param(prefix + "mixer.", f);
  }
};

struct FpMambaVars {
  ad::Var omega_flat, w_delta, w_delta_y, b_delta, w_b_x, w_b_y, w_c_x, w_c_y, w_gate, skip_d;
  std::vector<ad::Var> conv;
  MixerVars mixer;
};

inline FpMambaVars bind(ad::Tape& t, const FpMambaParams& p, FpMambaParams* g) {
  auto P = [&](const Mat& m, Mat* gm) { return t.param(m, g ? gm : nullptr); };
  FpMambaVars v;
  v.omega_flat = ad::reshape(P(p.omega, g ? &g->omega : nullptr), 1, p.omega.size());
  v.w_delta = P(p.w_delta, g ? &g->w_delta : nullptr);
  v.w_delta_y = P(p.w_delta_y, g && p.cfg.dep.lambda ? &g->w_delta_y : nullptr);
  v.b_delta = P(p.b_delta, g ? &g->b_delta : nullptr);
  v.w_b_x = P(p.w_b_x, g ? &g->w_b_x : nullptr);
  v.w_b_y = P(p.w_b_y, g && p.cfg.dep.b ? &g->w_b_y : nullptr);
  v.w_c_x = P(p.w_c_x, g ? &g->w_c_x : nullptr);
  v.w_c_y = P(p.w_c_y, g && p.cfg.dep.c ? &g->w_c_y : nullptr);
  v.w_gate = P(p.w_gate, g ? &g->w_gate : nullptr);
  v.skip_d = P(p.skip_d, g ? &g->skip_d : nullptr);
  for (std::size_t k = 0; k < p.conv.size(); ++k) v.conv.push_back(P(p.conv[k], g ? &g->conv[k] : nullptr));
  if (p.cfg.use_mixer) v.mixer = bind(t, p.cfg.mixer, p.mixer_w, g ? &g->mixer_w : nullptr);
  return v;
}

/// Causal depthwise convolution followed by SiLU, when enabled.
inline ad::Var conv_input(const FpMambaParams& p, const FpMambaVars& v, ad::Var x, std::size_t seq_len) {
  if (p.conv.empty()) return x;
  ad::Var acc = ad::mul_row(x, v.conv[0]);
  ad::Var shifted = x;
  for (std::size_t k = 1; k < v.conv.size(); ++k) {
    shifted = ad::shift_within(shifted, seq_len);
    acc = ad::add(acc, ad::mul_row(shifted, v.conv[k]));
  }
  return ad::silu(acc);
}

/// One fixed-point iteration over rows grouped into sequences of seq_len.
/// `x` is the layer input in d_inner space. If `state_out` is given it
/// receives the matrix states, N x (d_state * d_inner), entry [s * d + j].
inline ad::Var fp_mamba_step(const FpMambaParams& p, const FpMambaVars& v, ad::Var x, ad::Var y_prev,
                             std::size_t seq_len, ad::Var* state_out = nullptr) {
  const FpMambaConfig& cfg = p.cfg;
  const std::size_t d = cfg.d_inner(), S = cfg.d_state;
  if (x.cols() != d) throw DimensionError("fp_mamba_step: x has " + std::to_string(x.cols()) + " columns, expected " + std::to_string(d));
  if (!y_prev.value().same_shape(x.value())) throw DimensionError("fp_mamba_step: y_prev shape " + shape_str(y_prev.value()));

  ad::Var xs = conv_input(p, v, x, seq_len);
  ad::Var y_shift = ad::shift_within(y_prev, seq_len);

  ad::Var dx = ad::linear(xs, v.w_delta);
  ad::Var delta = ad::softplus(ad::add_row(dx, v.b_delta));
  ad::Var delta_gate = cfg.dep.lambda ? ad::softplus(ad::add_row(ad::add(dx, ad::linear(y_shift, v.w_delta_y)), v.b_delta))
                                      : delta;
  // lambda[s, j] = exp(-exp(omega[s, j]) * delta[j])
  ad::Var rate = ad::exp(v.omega_flat);
  ad::Var lambda = ad::exp(ad::neg(ad::mul_row(ad::tile_cols(delta_gate, S), rate)));

  ad::Var b_raw = ad::linear(xs, v.w_b_x);
  if (cfg.dep.b) b_raw = ad::add(b_raw, ad::linear(y_shift, v.w_b_y));
  ad::Var c_raw = ad::linear(xs, v.w_c_x);
  if (cfg.dep.c) c_raw = ad::add(c_raw, ad::linear(y_shift, v.w_c_y));
  ad::Var b_bar = ad::row_normalize(b_raw);
  ad::Var c_bar = ad::row_normalize(c_raw);

  ad::Var x_adj = xs;
  if (cfg.use_mixer) {
    MixerNodes q = mixer_nodes(cfg.mixer, v.mixer, xs, cfg.dep.q ? std::optional<ad::Var>(y_shift) : std::nullopt);
    x_adj = ad::add(apply_q(q, ad::sub(xs, y_prev)), y_prev);
  }
  ad::Var drive = ad::outer_rows(b_bar, ad::mul(delta, x_adj));
  ad::Var H = ad::diag_scan(lambda, drive, seq_len);
  if (state_out) *state_out = H;
  ad::Var y = ad::add(ad::contract_rows(c_bar, H), ad::mul_row(cfg.skip_uses_adjusted ? x_adj : xs, v.skip_d));
  ad::Var gated = ad::mul(ad::silu(ad::linear(x, v.w_gate)), y);
  return cfg.normalize_output ? ad::row_normalize(gated) : gated;
}

namespace detail {
inline void check_rows_finite(const Mat& m, const char* what) {
  for (std::size_t r = 0; r < m.rows; ++r)
    if (!all_finite(m.row(r))) throw NumericError(std::string(what) + ": non-finite output at token " + std::to_string(r));
}
}  // namespace detail

/// Plain-matrix iteration for a single sequence (rows = time).
inline Mat fp_mamba_step(const FpMambaParams& p, const Mat& x, const Mat& y_prev) {
  ad::Tape t(false);
  const FpMambaVars v = bind(t, p, nullptr);
  Mat out = fp_mamba_step(p, v, t.constant(x), t.constant(y_prev), x.rows).value();
  detail::check_rows_finite(out, "fp_mamba_step");
  return out;
}

struct SelectiveParams {
  Mat lambda;  // d_state x d_inner
  Vec delta;   // d_inner
  Vec b_bar;   // d_state
  Vec c_bar;   // d_state
};

/// Per-token selective parameters (without the input convolution).
inline SelectiveParams selective_params(const FpMambaParams& p, std::span<const double> x, std::span<const double> y_shift) {
  const std::size_t d = p.cfg.d_inner(), S = p.cfg.d_state;
  if (x.size() != d || y_shift.size() != d) throw DimensionError("selective_params: dimension mismatch");
  SelectiveParams sp;
  const Vec wx = matvec(p.w_delta, x);
  sp.delta.resize(d);
  Vec delta_gate(d);
  const Vec wy = p.cfg.dep.lambda ? matvec(p.w_delta_y, y_shift) : Vec(d, 0.0);
  for (std::size_t j = 0; j < d; ++j) {
    sp.delta[j] = softplus(wx[j] + p.b_delta(0, j));
    delta_gate[j] = p.cfg.dep.lambda ? softplus(wx[j] + wy[j] + p.b_delta(0, j)) : sp.delta[j];
  }
  sp.lambda = Mat(S, d);
  for (std::size_t s = 0; s < S; ++s)
    for (std::size_t j = 0; j < d; ++j) sp.lambda(s, j) = std::exp(-std::exp(p.omega(s, j)) * delta_gate[j]);
  auto proj = [&](const Mat& wxm, const Mat& wym, bool dep) {
    Vec z = matvec(wxm, x);
    if (dep) {
      const Vec zy = matvec(wym, y_shift);
      for (std::size_t i = 0; i < z.size(); ++i) z[i] += zy[i];
    }
    return l2_normalize(z);
  };
  sp.b_bar = proj(p.w_b_x, p.w_b_y, p.cfg.dep.b);
  sp.c_bar = proj(p.w_c_x, p.w_c_y, p.cfg.dep.c);
  return sp;
}

/// Q (x - y_prev) + y_prev = Q x + (I - Q) y_prev.
inline Vec adjusted_input(const MixerCoefficients& c, std::span<const double> x, std::span<const double> y_prev) {
  if (x.size() != y_prev.size()) throw DimensionError("adjusted_input: dimension mismatch");
  Vec diff(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) diff[i] = x[i] - y_prev[i];
  Vec out = apply_q(c, diff);
  for (std::size_t i = 0; i < x.size(); ++i) out[i] += y_prev[i];
  return out;
}

struct FpMambaOutput {
  Mat y_star;   // N x d_inner
  Mat h_star;   // N x (d_state * d_inner)
  FixedPointResult solve;
};

/// Solves the layer's fixed point for `batch` sequences of `seq_len` rows.
/// Residuals are measured on the iterate y.
inline FpMambaOutput fp_mamba_forward(const FpMambaParams& p, const Mat& x, std::size_t batch, std::size_t seq_len,
                                      const FixedPointConfig& cfg, std::mt19937_64* rng = nullptr,
                                      bool want_states = true) {
  if (x.rows != batch * seq_len) throw DimensionError("fp_mamba_forward: x rows != batch * seq_len");
  StepFn step = [&](const Mat& y_prev) {
    ad::Tape t(false);
    const FpMambaVars v = bind(t, p, nullptr);
    Mat out = fp_mamba_step(p, v, t.constant(x), t.constant(y_prev), seq_len).value();
    return out;
  };
  FpMambaOutput out;
  out.solve = solve(step, batch, seq_len, p.cfg.d_inner(), cfg, rng);
  out.y_star = out.solve.h_star;
  if (want_states && !out.solve.tail.empty()) {
    // States of the final iteration, recomputed from its input.
    ad::Tape t(false);
    const FpMambaVars v = bind(t, p, nullptr);
    ad::Var H;
    fp_mamba_step(p, v, t.constant(x), t.constant(out.solve.tail.back().input), seq_len, &H);
    out.h_star = H.value();
  }
  return out;
}

}  // namespace fprnn
