#pragma once

// Gated diagonal recurrence h_t = g_t * h_{t-1} + u_t, evaluated either
// sequentially or with a two-pass tree scan, and one fixed-point iteration of
// the vector-state FP-RNN built on top of it.

#include <cstddef>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "fprnn/autodiff.hpp"
#include "fprnn/mixers.hpp"
#include "fprnn/numerics.hpp"

namespace fprnn {

namespace detail {
inline void check_scan_shapes(const Mat& gates, const Mat& drive, std::span<const double> h0) {
  require_same_shape(gates, drive, "scan");
  if (!h0.empty() && h0.size() != gates.cols)
    throw DimensionError("scan: h0 has " + std::to_string(h0.size()) + " entries, expected " + std::to_string(gates.cols));
}
}  // namespace detail

/// Rows are time steps, columns channels. An empty h0 means zero.
inline Mat scan_sequential(const Mat& gates, const Mat& drive, std::span<const double> h0 = {}) {
  detail::check_scan_shapes(gates, drive, h0);
  const std::size_t d = gates.cols;
  Mat h(gates.rows, d);
  Vec prev(d, 0.0);
  if (!h0.empty()) prev.assign(h0.begin(), h0.end());
  for (std::size_t t = 0; t < gates.rows; ++t)
    for (std::size_t j = 0; j < d; ++j) {
      prev[j] = gates(t, j) * prev[j] + drive(t, j);
      h(t, j) = prev[j];
    }
  return h;
}

/// Blelloch up-sweep / down-sweep over (gate, drive) pairs with the
/// associative combine (a, b) then (a', b') = (a a', a' b + b'). The time axis
/// is padded to a power of two with identity pairs (1, 0); h0 is folded into
/// the first drive. The tree shape depends only on T, so results are
/// reproducible bit for bit.
inline Mat scan_parallel(const Mat& gates, const Mat& drive, std::span<const double> h0 = {}) {
  detail::check_scan_shapes(gates, drive, h0);
  const std::size_t T = gates.rows;
  const std::size_t d = gates.cols;
  if (T == 0) return Mat(0, d);
  std::size_t n = 1;
  while (n < T) n *= 2;
  Vec a(n * d, 1.0), b(n * d, 0.0);
  for (std::size_t t = 0; t < T; ++t)
    for (std::size_t j = 0; j < d; ++j) {
      a[t * d + j] = gates(t, j);
      b[t * d + j] = drive(t, j);
    }
  if (!h0.empty())
    for (std::size_t j = 0; j < d; ++j) b[j] += a[j] * h0[j];
  const Vec elem_a = a, elem_b = b;

  for (std::size_t stride = 1; stride < n; stride *= 2)
    for (std::size_t i = 2 * stride - 1; i < n; i += 2 * stride) {
      const std::size_t l = (i - stride) * d, r = i * d;
      for (std::size_t j = 0; j < d; ++j) {
        b[r + j] = a[r + j] * b[l + j] + b[r + j];
        a[r + j] = a[l + j] * a[r + j];
      }
    }
  for (std::size_t j = 0; j < d; ++j) {
    a[(n - 1) * d + j] = 1.0;
    b[(n - 1) * d + j] = 0.0;
  }
  for (std::size_t stride = n / 2; stride >= 1; stride /= 2) {
    for (std::size_t i = 2 * stride - 1; i < n; i += 2 * stride) {
      const std::size_t l = (i - stride) * d, r = i * d;
      for (std::size_t j = 0; j < d; ++j) {
        const double la = a[l + j], lb = b[l + j];
        a[l + j] = a[r + j];
        b[l + j] = b[r + j];
        // prefix (right slot) followed by the left subtree
        b[r + j] = la * b[r + j] + lb;
        a[r + j] = a[r + j] * la;
      }
    }
    if (stride == 1) break;
  }
  Mat h(T, d);
  for (std::size_t t = 0; t < T; ++t)
    for (std::size_t j = 0; j < d; ++j) h(t, j) = elem_a[t * d + j] * b[t * d + j] + elem_b[t * d + j];
  return h;
}

// ---------------------------------------------------------------------------
// Vector-state FP-RNN

struct GatedDiagonalParams {
  std::size_t dim = 0;
  MixerSpec mixer;
  Mat gate_w;   // dim x dim, lambda = sigmoid(gate_w x + gate_b)
  Mat gate_b;   // 1 x dim
  Mat in_map;   // B: dim x dim
  MixerWeights mixer_w;
  bool input_dependent_gate = true;
  // Drive without the (1 - lambda) input normalization.
  bool ungated = false;
  // Same coefficients for every token (input-independent Q).
  std::optional<MixerCoefficients> fixed_mixer;

  static GatedDiagonalParams init(std::size_t dim, const MixerSpec& mixer, std::mt19937_64& rng) {
    GatedDiagonalParams p;
    p.dim = dim;
    p.mixer = mixer;
    p.mixer.d_inner = dim;
    const double sd = 1.0 / std::sqrt(static_cast<double>(dim));
    p.gate_w = random_normal(dim, dim, sd, rng);
    p.gate_b = Mat(1, dim, 2.0);
    p.in_map = random_normal(dim, dim, sd, rng);
    p.mixer_w = MixerWeights::init(p.mixer, rng);
    return p;
  }

  template <class F>
  void for_each_param(const std::string& prefix, F&& f) {
    if (input_dependent_gate) f(prefix + "gate_w", gate_w);
    f(prefix + "gate_b", gate_b);
    f(prefix + "in_map", in_map);
    if (!fixed_mixer) mixer_w.for_each_param(prefix + "mixer.", f);
  }

  void validate() const {
    if (gate_b.rows != 1 || gate_b.cols != dim || in_map.rows != dim || in_map.cols != dim)
      throw DimensionError("GatedDiagonalParams: inconsistent shapes");
    if (input_dependent_gate && (gate_w.rows != dim || gate_w.cols != dim))
      throw DimensionError("GatedDiagonalParams: gate_w must be dim x dim");
    if (mixer.d_inner != dim) throw DimensionError("GatedDiagonalParams: mixer dimension differs from state dimension");
    if (fixed_mixer && fixed_mixer->dim != dim) throw DimensionError("GatedDiagonalParams: fixed mixer dimension");
  }
};

struct GatedDiagonalVars {
  ad::Var gate_w, gate_b, in_map;
  MixerVars mixer;
};

inline GatedDiagonalVars bind(ad::Tape& t, const GatedDiagonalParams& p, GatedDiagonalParams* g) {
  GatedDiagonalVars v;
  v.gate_w = t.param(p.gate_w, g && p.input_dependent_gate ? &g->gate_w : nullptr);
  v.gate_b = t.param(p.gate_b, g ? &g->gate_b : nullptr);
  v.in_map = t.param(p.in_map, g ? &g->in_map : nullptr);
  if (!p.fixed_mixer) v.mixer = bind(t, p.mixer, p.mixer_w, g ? &g->mixer_w : nullptr);
  return v;
}

/// Per-token gates lambda_t in (0,1), N x dim.
inline ad::Var gate_values(const GatedDiagonalParams& p, const GatedDiagonalVars& v, ad::Var x) {
  if (p.input_dependent_gate) return ad::sigmoid(ad::add_row(ad::linear(x, v.gate_w), v.gate_b));
  ad::Var zero = x.tape->constant(Mat(x.rows(), p.dim));
  return ad::sigmoid(ad::add_row(zero, v.gate_b));
}

/// One iteration h^l = scan(lambda, (1 - lambda) * (Q B x + (I - Q) h^{l-1}))
/// over rows grouped into sequences of `seq_len`. With the mixer's
/// hidden_dependence set, Q_t is computed from x_t + h_{t-1}^{l-1}.
inline ad::Var fp_rnn_step(const GatedDiagonalParams& p, const GatedDiagonalVars& v, ad::Var x, ad::Var h_prev,
                           std::size_t seq_len) {
  p.validate();
  if (x.cols() != p.dim) throw DimensionError("fp_rnn_step: x has " + std::to_string(x.cols()) + " columns");
  if (!h_prev.value().same_shape(x.value())) throw DimensionError("fp_rnn_step: h_prev shape " + shape_str(h_prev.value()));
  ad::Var lambda = gate_values(p, v, x);
  MixerNodes q;
  if (p.fixed_mixer) {
    q = constant_mixer_nodes(*x.tape, *p.fixed_mixer, x.rows());
  } else {
    MixerSpec plain = p.mixer;
    plain.hidden_dependence = false;
    ad::Var m_in = p.mixer.hidden_dependence ? ad::add(x, ad::shift_within(h_prev, seq_len)) : x;
    q = mixer_nodes(plain, v.mixer, m_in, std::nullopt);
  }
  ad::Var bx = ad::linear(x, v.in_map);
  ad::Var inner = ad::add(apply_q(q, bx), apply_i_minus_q(q, h_prev));
  ad::Var drive = p.ungated ? inner : ad::mul(ad::one_minus(lambda), inner);
  return ad::diag_scan(lambda, drive, seq_len);
}

/// Plain-matrix form of fp_rnn_step for a single sequence (rows = time).
inline Mat fp_iteration_step(const GatedDiagonalParams& p, const Mat& x, const Mat& h_prev) {
  ad::Tape t(false);
  const GatedDiagonalVars v = bind(t, p, nullptr);
  return fp_rnn_step(p, v, t.constant(x), t.constant(h_prev), x.rows).value();
}

}  // namespace fprnn
