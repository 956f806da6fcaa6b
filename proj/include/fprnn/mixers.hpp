#pragma once

// Structured channel mixers Q = I - (low-rank / reflection / Kronecker term).
//
// Two evaluation paths share one parameterization: per-token functions on
// plain vectors (coefficients_from_input, apply_q, ...) and row-batched tape
// nodes (mixer_nodes, apply_q on Vars) used by the layers during training.

#include <array>
#include <cmath>
#include <cstddef>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "fprnn/autodiff.hpp"
#include "fprnn/numerics.hpp"

namespace fprnn {

enum class MixerVariant { dplr, householder, kronecker };

inline const char* to_string(MixerVariant v) {
  switch (v) {
    case MixerVariant::dplr: return "dplr";
    case MixerVariant::householder: return "householder";
    case MixerVariant::kronecker: return "kronecker";
  }
  return "?";
}

inline MixerVariant parse_mixer_variant(const std::string& s) {
  if (s == "dplr") return MixerVariant::dplr;
  if (s == "householder") return MixerVariant::householder;
  if (s == "kronecker") return MixerVariant::kronecker;
  throw std::invalid_argument("unknown mixer variant: " + s);
}

struct MixerSpec {
  MixerVariant variant = MixerVariant::householder;
  std::size_t rank = 1;
  std::size_t d_inner = 0;
  bool hidden_dependence = false;
  // Kronecker factors are scaled to spectral norm (1 - contraction_eps).
  // 0 gives plain largest-eigenvalue normalization; negative values
  // deliberately break contraction (used as a negative control).
  double contraction_eps = 0.01;
  // Divide every alpha by rank so that sum(alpha) < 1.
  bool rescale_alpha = false;
  std::size_t power_iters = 50;

  std::size_t kron_side() const {
    const auto s = static_cast<std::size_t>(std::llround(std::sqrt(static_cast<double>(d_inner))));
    return s;
  }
  std::size_t kron_params() const {
    const std::size_t s = kron_side();
    return s * (s + 1) / 2;
  }

  void validate() const {
    if (d_inner == 0) throw DimensionError("MixerSpec: d_inner must be positive");
    if (variant == MixerVariant::kronecker) {
      const std::size_t s = kron_side();
      if (s * s != d_inner) throw DimensionError("MixerSpec: kronecker needs a square d_inner, got " + std::to_string(d_inner));
    } else if (rank == 0) {
      throw DimensionError("MixerSpec: rank must be >= 1");
    }
    if (!(contraction_eps < 1.0)) throw std::invalid_argument("MixerSpec: contraction_eps must be < 1");
    if (power_iters == 0) throw std::invalid_argument("MixerSpec: power_iters must be >= 1");
  }
};

struct MixerWeights {
  // dplr / householder: one entry per reflection
  std::vector<Mat> u_x, u_y;  // d x d
  Mat alpha_x, alpha_y;       // rank x d
  Mat alpha_b;                // 1 x rank
  // kronecker: two factors
  std::array<Mat, 2> k_x, k_y;  // s(s+1)/2 x d
  std::array<Mat, 2> k_b;       // 1 x s(s+1)/2

  static MixerWeights zeros(const MixerSpec& spec) {
    spec.validate();
    MixerWeights w;
    const std::size_t d = spec.d_inner;
    if (spec.variant == MixerVariant::kronecker) {
      const std::size_t m = spec.kron_params();
      for (int n = 0; n < 2; ++n) {
        w.k_x[n] = Mat(m, d);
        w.k_y[n] = Mat(m, d);
        w.k_b[n] = Mat(1, m);
      }
    } else {
      w.u_x.assign(spec.rank, Mat(d, d));
      w.u_y.assign(spec.rank, Mat(d, d));
      w.alpha_x = Mat(spec.rank, d);
      w.alpha_y = Mat(spec.rank, d);
      w.alpha_b = Mat(1, spec.rank);
    }
    return w;
  }

  static MixerWeights init(const MixerSpec& spec, std::mt19937_64& rng, double gain = 1.0) {
    MixerWeights w = zeros(spec);
    const double sd = gain / std::sqrt(static_cast<double>(spec.d_inner));
    auto fill = [&](Mat& m, double s) { m = random_normal(m.rows, m.cols, s, rng); };
    if (spec.variant == MixerVariant::kronecker) {
      for (int n = 0; n < 2; ++n) {
        fill(w.k_x[n], sd);
        if (spec.hidden_dependence) fill(w.k_y[n], sd);
        fill(w.k_b[n], 0.5);
      }
    } else {
      for (std::size_t i = 0; i < spec.rank; ++i) {
        fill(w.u_x[i], sd);
        if (spec.hidden_dependence) fill(w.u_y[i], sd);
      }
      fill(w.alpha_x, sd);
      if (spec.hidden_dependence) fill(w.alpha_y, sd);
    }
    return w;
  }

  template <class F>
  void for_each_param(const std::string& prefix, F&& f) {
    for (std::size_t i = 0; i < u_x.size(); ++i) f(prefix + "u_x." + std::to_string(i), u_x[i]);
    for (std::size_t i = 0; i < u_y.size(); ++i) f(prefix + "u_y." + std::to_string(i), u_y[i]);
    if (alpha_x.size()) {
      f(prefix + "alpha_x", alpha_x);
      f(prefix + "alpha_y", alpha_y);
      f(prefix + "alpha_b", alpha_b);
    }
    for (int n = 0; n < 2; ++n) {
      if (!k_x[n].size()) continue;
      const std::string k = std::to_string(n + 1);
      f(prefix + "k" + k + "_x", k_x[n]);
      f(prefix + "k" + k + "_y", k_y[n]);
      f(prefix + "k" + k + "_b", k_b[n]);
    }
  }
};

struct MixerCoefficients {
  MixerVariant variant = MixerVariant::householder;
  std::size_t dim = 0;
  Vec alpha;             // dplr / householder
  std::vector<Vec> u;    // unit (or zero) vectors
  Mat k1, k2;            // kronecker factors, s x s

  static MixerCoefficients identity(MixerVariant variant, std::size_t dim) {
    MixerCoefficients c;
    c.variant = variant;
    c.dim = dim;
    if (variant == MixerVariant::kronecker) {
      const auto s = static_cast<std::size_t>(std::llround(std::sqrt(static_cast<double>(dim))));
      c.k1 = Mat(s, s);
      c.k2 = Mat(s, s);
    }
    return c;
  }
};

namespace detail {

inline void require_dim(std::span<const double> v, std::size_t d, const char* what) {
  if (v.size() != d)
    throw DimensionError(std::string(what) + ": expected dimension " + std::to_string(d) + ", got " +
                         std::to_string(v.size()));
}

inline Mat tril_from_params(std::span<const double> p, std::size_t s) {
  Mat l(s, s);
  std::size_t idx = 0;
  for (std::size_t i = 0; i < s; ++i)
    for (std::size_t j = 0; j <= i; ++j) l(i, j) = p[idx++];
  return l;
}

inline double kron_scale(const MixerSpec& spec) { return 1.0 - spec.contraction_eps; }

constexpr double kTinyEigen = 1e-12;

}  // namespace detail

inline MixerCoefficients coefficients_from_input(const MixerSpec& spec, const MixerWeights& w, std::span<const double> x,
                                                 std::optional<std::span<const double>> y_shift = std::nullopt) {
  spec.validate();
  const std::size_t d = spec.d_inner;
  detail::require_dim(x, d, "coefficients_from_input x");
  if (spec.hidden_dependence != y_shift.has_value())
    throw DimensionError("coefficients_from_input: y_shift must be given iff hidden_dependence");
  if (y_shift) detail::require_dim(*y_shift, d, "coefficients_from_input y_shift");

  auto affine = [&](const Mat& wx, const Mat* wy) {
    Vec z = matvec(wx, x);
    if (y_shift && wy) {
      const Vec zy = matvec(*wy, *y_shift);
      for (std::size_t i = 0; i < z.size(); ++i) z[i] += zy[i];
    }
    return z;
  };

  MixerCoefficients c;
  c.variant = spec.variant;
  c.dim = d;
  if (spec.variant == MixerVariant::kronecker) {
    const std::size_t s = spec.kron_side();
    for (int n = 0; n < 2; ++n) {
      Vec z = affine(w.k_x[n], &w.k_y[n]);
      for (std::size_t i = 0; i < z.size(); ++i) z[i] = silu(z[i] + w.k_b[n](0, i));
      const Mat l = detail::tril_from_params(z, s);
      const Mat k = matmul(l, transpose(l));
      const TopEigen e = top_eigen_psd({k.data.data(), k.size()}, s, spec.power_iters);
      const Mat kb = scale(k, detail::kron_scale(spec) / std::max(e.value, detail::kTinyEigen));
      (n == 0 ? c.k1 : c.k2) = kb;
    }
    return c;
  }

  const double a_scale = spec.rescale_alpha ? 1.0 / static_cast<double>(spec.rank) : 1.0;
  for (std::size_t i = 0; i < spec.rank; ++i) {
    Vec z = affine(w.u_x[i], &w.u_y[i]);
    for (double& v : z) v = silu(v);
    c.u.push_back(l2_normalize(z));
    double logit = dot(w.alpha_x.row(i), x) + w.alpha_b(0, i);
    if (y_shift) logit += dot(w.alpha_y.row(i), *y_shift);
    c.alpha.push_back(a_scale * sigmoid(logit));
  }
  return c;
}

/// (K1 (x) K2) v using the row-major reshape X[i][j] = v[i*s + j].
inline Vec kron_matvec(const Mat& k1, const Mat& k2, std::span<const double> v) {
  const std::size_t s = k1.rows;
  detail::require_dim(v, s * s, "kron_matvec");
  Vec tmp(s * s, 0.0), out(s * s, 0.0);
  for (std::size_t i = 0; i < s; ++i)
    for (std::size_t j = 0; j < s; ++j)
      for (std::size_t q = 0; q < s; ++q) tmp[i * s + j] += v[i * s + q] * k2(j, q);
  for (std::size_t i = 0; i < s; ++i)
    for (std::size_t j = 0; j < s; ++j)
      for (std::size_t q = 0; q < s; ++q) out[i * s + j] += k1(i, q) * tmp[q * s + j];
  return out;
}

inline Vec apply_q(const MixerCoefficients& c, std::span<const double> v) {
  detail::require_dim(v, c.dim, "apply_q");
  Vec out(v.begin(), v.end());
  switch (c.variant) {
    case MixerVariant::dplr:
      for (std::size_t i = 0; i < c.u.size(); ++i) {
        const double p = c.alpha[i] * dot(c.u[i], v);
        for (std::size_t j = 0; j < out.size(); ++j) out[j] -= p * c.u[i][j];
      }
      break;
    case MixerVariant::householder:
      // Q = (I - a_1 u_1 u_1^T) ... (I - a_r u_r u_r^T): the last factor acts first.
      for (std::size_t i = c.u.size(); i-- > 0;) {
        const double p = c.alpha[i] * dot(c.u[i], out);
        for (std::size_t j = 0; j < out.size(); ++j) out[j] -= p * c.u[i][j];
      }
      break;
    case MixerVariant::kronecker: {
      const Vec kv = kron_matvec(c.k1, c.k2, v);
      for (std::size_t j = 0; j < out.size(); ++j) out[j] -= kv[j];
      break;
    }
  }
  return out;
}

inline Vec apply_i_minus_q(const MixerCoefficients& c, std::span<const double> v) {
  const Vec q = apply_q(c, v);
  Vec out(v.size());
  for (std::size_t j = 0; j < v.size(); ++j) out[j] = v[j] - q[j];
  return out;
}

/// Dense Q, column by column. Diagnostics and oracles only.
inline Mat materialize_q(const MixerCoefficients& c) {
  Mat q(c.dim, c.dim);
  Vec e(c.dim, 0.0);
  for (std::size_t j = 0; j < c.dim; ++j) {
    e[j] = 1.0;
    const Vec col = apply_q(c, e);
    for (std::size_t i = 0; i < c.dim; ++i) q(i, j) = col[i];
    e[j] = 0.0;
  }
  return q;
}

/// ||I - Q||_2 of the materialized mixer.
inline double contraction_margin(const MixerCoefficients& c, std::size_t d_inner, std::size_t iters = 200) {
  if (c.dim != d_inner) throw DimensionError("contraction_margin: dimension mismatch");
  const Mat iq = sub(Mat::identity(d_inner), materialize_q(c));
  if (max_abs(iq) == 0.0) return 0.0;
  return spectral_norm(iq, iters);
}

// ---------------------------------------------------------------------------
// Tape path: rows are tokens.

struct MixerVars {
  std::vector<ad::Var> u_x, u_y;
  ad::Var alpha_x, alpha_y, alpha_b;
  std::array<ad::Var, 2> k_x, k_y, k_b;
};

inline MixerVars bind(ad::Tape& t, const MixerSpec& spec, const MixerWeights& w, MixerWeights* g) {
  MixerVars v;
  if (spec.variant == MixerVariant::kronecker) {
    for (int n = 0; n < 2; ++n) {
      v.k_x[n] = t.param(w.k_x[n], g ? &g->k_x[n] : nullptr);
      v.k_y[n] = t.param(w.k_y[n], g ? &g->k_y[n] : nullptr);
      v.k_b[n] = t.param(w.k_b[n], g ? &g->k_b[n] : nullptr);
    }
  } else {
    for (std::size_t i = 0; i < spec.rank; ++i) {
      v.u_x.push_back(t.param(w.u_x[i], g ? &g->u_x[i] : nullptr));
      v.u_y.push_back(t.param(w.u_y[i], g ? &g->u_y[i] : nullptr));
    }
    v.alpha_x = t.param(w.alpha_x, g ? &g->alpha_x : nullptr);
    v.alpha_y = t.param(w.alpha_y, g ? &g->alpha_y : nullptr);
    v.alpha_b = t.param(w.alpha_b, g ? &g->alpha_b : nullptr);
  }
  return v;
}

struct MixerNodes {
  MixerVariant variant = MixerVariant::householder;
  std::vector<ad::Var> u;      // N x d each
  std::vector<ad::Var> alpha;  // N x 1 each
  ad::Var k1, k2;              // N x s*s
  std::size_t side = 0;
};

/// Per-token coefficients for every row of x (and y_shift when the mixer
/// depends on the hidden state).
inline MixerNodes mixer_nodes(const MixerSpec& spec, const MixerVars& w, ad::Var x, std::optional<ad::Var> y_shift) {
  if (spec.hidden_dependence != y_shift.has_value())
    throw DimensionError("mixer_nodes: y_shift must be given iff hidden_dependence");
  if (x.cols() != spec.d_inner) throw DimensionError("mixer_nodes: x has " + std::to_string(x.cols()) + " columns");
  MixerNodes m;
  m.variant = spec.variant;
  auto affine = [&](ad::Var wx, ad::Var wy) {
    ad::Var z = ad::linear(x, wx);
    if (y_shift) z = ad::add(z, ad::linear(*y_shift, wy));
    return z;
  };
  if (spec.variant == MixerVariant::kronecker) {
    const std::size_t s = spec.kron_side();
    m.side = s;
    for (int n = 0; n < 2; ++n) {
      ad::Var z = ad::silu(ad::add_row(affine(w.k_x[n], w.k_y[n]), w.k_b[n]));
      ad::Var k = ad::tril_gram(z, s);
      ad::Var kb = ad::eig_normalize(k, s, detail::kron_scale(spec), spec.power_iters, detail::kTinyEigen);
      (n == 0 ? m.k1 : m.k2) = kb;
    }
    return m;
  }
  ad::Var logits = ad::add_row(affine(w.alpha_x, w.alpha_y), w.alpha_b);
  ad::Var a = ad::sigmoid(logits);
  if (spec.rescale_alpha) a = ad::scale(a, 1.0 / static_cast<double>(spec.rank));
  for (std::size_t i = 0; i < spec.rank; ++i) {
    m.u.push_back(ad::row_normalize(ad::silu(affine(w.u_x[i], w.u_y[i]))));
    m.alpha.push_back(ad::col(a, i));
  }
  return m;
}

/// The same coefficients repeated for every one of `rows` tokens.
inline MixerNodes constant_mixer_nodes(ad::Tape& t, const MixerCoefficients& c, std::size_t rows) {
  MixerNodes m;
  m.variant = c.variant;
  auto tile = [&](std::span<const double> v) {
    Mat r(rows, v.size());
    for (std::size_t n = 0; n < rows; ++n) std::copy(v.begin(), v.end(), r.row(n).begin());
    return t.constant(std::move(r));
  };
  if (c.variant == MixerVariant::kronecker) {
    m.side = c.k1.rows;
    m.k1 = tile({c.k1.data.data(), c.k1.size()});
    m.k2 = tile({c.k2.data.data(), c.k2.size()});
    return m;
  }
  for (std::size_t i = 0; i < c.u.size(); ++i) {
    m.u.push_back(tile(c.u[i]));
    const double a = c.alpha[i];
    m.alpha.push_back(tile(std::span<const double>(&a, 1)));
  }
  return m;
}

inline ad::Var apply_i_minus_q(const MixerNodes& m, ad::Var v);

inline ad::Var apply_q(const MixerNodes& m, ad::Var v) {
  switch (m.variant) {
    case MixerVariant::dplr:
      return ad::sub(v, apply_i_minus_q(m, v));
    case MixerVariant::householder: {
      ad::Var out = v;
      for (std::size_t i = m.u.size(); i-- > 0;) {
        ad::Var p = ad::mul(m.alpha[i], ad::row_dot(m.u[i], out));
        out = ad::sub(out, ad::mul_col(m.u[i], p));
      }
      return out;
    }
    case MixerVariant::kronecker:
      return ad::sub(v, ad::kron_apply(m.k1, m.k2, v, m.side));
  }
  throw std::logic_error("apply_q: bad variant");
}

inline ad::Var apply_i_minus_q(const MixerNodes& m, ad::Var v) {
  switch (m.variant) {
    case MixerVariant::dplr: {
      std::optional<ad::Var> acc;
      for (std::size_t i = 0; i < m.u.size(); ++i) {
        ad::Var p = ad::mul(m.alpha[i], ad::row_dot(m.u[i], v));
        ad::Var term = ad::mul_col(m.u[i], p);
        acc = acc ? ad::add(*acc, term) : term;
      }
      return *acc;
    }
    case MixerVariant::householder:
      return ad::sub(v, apply_q(m, v));
    case MixerVariant::kronecker:
      return ad::kron_apply(m.k1, m.k2, v, m.side);
  }
  throw std::logic_error("apply_i_minus_q: bad variant");
}

}  // namespace fprnn
