#pragma once

// Random input-independent FP-RNN instances used by the property checks.

#include <cmath>
#include <random>

#include "fprnn/diagonal_scan.hpp"
#include "fprnn/mixers.hpp"

namespace fprnn::check {

/// Input-independent mixer drawn through the regular parameterization.
inline MixerCoefficients random_fixed_mixer(MixerVariant v, std::size_t d, std::size_t rank, std::mt19937_64& rng,
                                            double contraction_eps = 0.01) {
  MixerSpec s;
  s.variant = v;
  s.d_inner = d;
  s.rank = rank;
  s.contraction_eps = contraction_eps;
  s.power_iters = 500;
  const MixerWeights w = MixerWeights::init(s, rng);
  const Vec x = random_normal(1, d, 1.0, rng).to_vec();
  return coefficients_from_input(s, w, x);
}

inline double logit(double p) { return std::log(p / (1.0 - p)); }

/// Vector FP-RNN with constant gates lambda (entries in [lo, hi]) and a
/// fixed mixer.
inline GatedDiagonalParams fixed_parameter_rnn(std::size_t d, const MixerCoefficients& q, double lo, double hi,
                                              std::mt19937_64& rng) {
  MixerSpec ms;
  ms.variant = q.variant;
  ms.d_inner = d;
  ms.rank = std::max<std::size_t>(1, q.u.size());
  GatedDiagonalParams p = GatedDiagonalParams::init(d, ms, rng);
  p.input_dependent_gate = false;
  p.gate_w = Mat(d, d);
  std::uniform_real_distribution<double> u(lo, hi);
  for (std::size_t j = 0; j < d; ++j) p.gate_b(0, j) = logit(u(rng));
  p.fixed_mixer = q;
  return p;
}

inline Vec gate_vector(const GatedDiagonalParams& p) {
  Vec l(p.dim);
  for (std::size_t j = 0; j < p.dim; ++j) l[j] = sigmoid(p.gate_b(0, j));
  return l;
}

}  // namespace fprnn::check
