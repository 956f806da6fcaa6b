#pragma once

// Invariant suites shared by `fprnn verify` and the acceptance runner. Each
// suite returns a report entry instead of throwing on a failed check.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "fprnn/diagonal_scan.hpp"
#include "fprnn/fixed_point.hpp"
#include "fprnn/gradcheck.hpp"
#include "fprnn/instances.hpp"
#include "fprnn/train.hpp"

namespace fprnn {

struct SuiteReport {
  std::string name;
  bool passed = false;
  double metric = 0.0;     // worst observed value of the suite's statistic
  double threshold = 0.0;  // pass bound for `metric`
  std::size_t cases = 0;
  std::string detail;
};

namespace detail {

inline double rel_inf(const Mat& a, const Mat& ref) { return max_abs_diff(a, ref) / std::max(max_abs(ref), 1e-300); }

inline FixedPointConfig plain_solver(double tol, std::size_t ell_max) {
  FixedPointConfig c;
  c.tol = tol;
  c.ell_max = ell_max;
  c.batch_quantile = 1.0;
  c.damping.enabled = false;
  return c;
}

}  // namespace detail

/// Fixed-point solve at tol 1e-8 against the dense oracle for input-
/// independent householder (r = 1) and kronecker instances, d <= 16, T <= 64.
inline SuiteReport oracle_equivalence_suite(std::size_t per_variant = 100, std::uint64_t seed = 15,
                                            double contraction_eps = 0.01) {
  SuiteReport rep{"oracle_equivalence", true, 0.0, 1e-5, 0, ""};
  std::mt19937_64 rng(seed);
  for (MixerVariant v : {MixerVariant::householder, MixerVariant::kronecker}) {
    for (std::size_t inst = 0; inst < per_variant; ++inst) {
      const std::size_t d = v == MixerVariant::kronecker ? (inst % 2 ? 16 : 9) : 4 + inst % 13;
      const std::size_t T = 8 + (inst * 7) % 57;
      const auto q = check::random_fixed_mixer(v, d, 1, rng, contraction_eps);
      const auto p = check::fixed_parameter_rnn(d, q, 0.05, 0.95, rng);
      const Mat x = random_normal(T, d, 1.0, rng);
      ++rep.cases;
      try {
        const Mat ref = dense_oracle(check::gate_vector(p), materialize_q(q), p.in_map, x, true);
        const auto r = solve([&](const Mat& h) { return fp_iteration_step(p, x, h); }, 1, T, d,
                             detail::plain_solver(1e-8, 100000));
        const double e = r.converged[0] ? detail::rel_inf(r.h_star, ref) : INFINITY;
        rep.metric = std::max(rep.metric, e);
      } catch (const std::exception& ex) {
        rep.metric = INFINITY;
        rep.detail = ex.what();
      }
    }
  }
  rep.passed = rep.metric < rep.threshold;
  return rep;
}

/// Operator 2-norm of the h-Jacobian of an h-affine step, by power
/// iteration on J^T J through the tape.
inline double affine_step_norm(const std::function<ad::Var(ad::Var)>& step, std::size_t rows, std::size_t cols,
                               std::mt19937_64& rng, std::size_t iters = 60) {
  Mat zero(rows, cols);
  Mat base;
  {
    ad::Tape t(false);
    base = step(t.constant(zero)).value();
  }
  Mat v = random_normal(rows, cols, 1.0, rng);
  double sigma = 0.0;
  for (std::size_t it = 0; it < iters; ++it) {
    const double n = frobenius_norm(v);
    if (n == 0.0) return 0.0;
    for (double& e : v.data) e /= n;
    ad::Tape t;
    ad::Var h = t.input(v);
    ad::Var out = step(h);
    const Mat jv = sub(out.value(), base);
    sigma = frobenius_norm(jv);
    t.backward(out, jv);
    v = t.grad(h);
  }
  return sigma;
}

/// Contraction of the vector FP-RNN iteration in h for constant gates and
/// input-dependent mixers that do not read h: random pairs must contract
/// strictly, the power-iterated Lipschitz constant must be below 1, and
/// step norms of every solve must decay at least like the analytic bound.
inline SuiteReport lipschitz_suite(std::size_t pairs = 1000, std::uint64_t seed = 6, double contraction_eps = 0.01) {
  SuiteReport rep{"lipschitz", true, 0.0, 1.0, 0, ""};
  std::mt19937_64 rng(seed);
  struct Setting {
    MixerVariant v;
    std::size_t rank, d;
  };
  bool geometric_ok = true;
  for (const Setting s : {Setting{MixerVariant::householder, 1, 8}, Setting{MixerVariant::householder, 2, 8},
                          Setting{MixerVariant::kronecker, 2, 9}}) {
    const std::size_t T = 12;
    MixerSpec ms;
    ms.variant = s.v;
    ms.rank = s.rank;
    ms.d_inner = s.d;
    ms.contraction_eps = contraction_eps;
    ms.power_iters = 500;
    GatedDiagonalParams p = GatedDiagonalParams::init(s.d, ms, rng);
    p.input_dependent_gate = false;
    p.gate_w = Mat(s.d, s.d);
    for (std::size_t j = 0; j < s.d; ++j) p.gate_b(0, j) = check::logit(0.2 + 0.75 * (static_cast<double>(j) + 0.5) / static_cast<double>(s.d));
    const Mat x = random_normal(T, s.d, 1.0, rng);
    for (std::size_t k = 0; k < pairs; ++k) {
      const Mat h1 = random_normal(T, s.d, 1.0, rng), h2 = random_normal(T, s.d, 1.0, rng);
      const double ratio =
          frobenius_norm(sub(fp_iteration_step(p, x, h1), fp_iteration_step(p, x, h2))) / frobenius_norm(sub(h1, h2));
      rep.metric = std::max(rep.metric, ratio);
      ++rep.cases;
    }
    const auto step = [&](ad::Var h) {
      const GatedDiagonalVars v = bind(*h.tape, p, nullptr);
      return fp_rnn_step(p, v, h.tape->constant(x), h, T);
    };
    const double lip = affine_step_norm(step, T, s.d, rng);
    rep.metric = std::max(rep.metric, lip);

    // Analytic constant max_j (1 - lambda_j^T) * max_t ||I - Q_t||_2.
    double gate_part = 0.0;
    for (double l : check::gate_vector(p)) gate_part = std::max(gate_part, 1.0 - std::pow(l, static_cast<double>(T)));
    double q_bar = 0.0;
    for (std::size_t t = 0; t < T; ++t) {
      const auto c = coefficients_from_input(ms, p.mixer_w, x.row(t));
      q_bar = std::max(q_bar, spectral_norm(sub(Mat::identity(s.d), materialize_q(c)), 500));
    }
    const double L = gate_part * q_bar;
    try {
      const auto r = solve([&](const Mat& h) { return fp_iteration_step(p, x, h); }, 1, T, s.d,
                           detail::plain_solver(1e-12, 200));
      const auto& sn = r.step_norm_trace;
      for (std::size_t l = 1; l < sn.size(); ++l)
        if (!(sn[l] <= std::pow(L, static_cast<double>(l)) * sn[0] * (1.0 + 1e-6))) geometric_ok = false;
    } catch (const NonFiniteIterate&) {
      geometric_ok = false;
    }
  }
  rep.passed = rep.metric < rep.threshold && geometric_ok;
  if (!geometric_ok) rep.detail = "step norms exceed the geometric bound";
  return rep;
}

/// Central differences for every tape primitive.
inline SuiteReport primitive_gradient_suite(std::uint64_t seed = 42) {
  SuiteReport rep{"primitive_gradients", true, 0.0, 1e-5, 0, ""};
  for (const auto& c : check::primitive_cases(seed)) {
    const double e = check::check_gradients(c.build, c.inputs, seed).max_rel_error;
    if (e > rep.metric) {
      rep.metric = e;
      rep.detail = "worst: " + c.name;
    }
    ++rep.cases;
  }
  rep.passed = rep.metric < rep.threshold;
  return rep;
}

/// implicit_gradient_small on input-dependent vector FP-RNN layers with
/// d <= 8, against central differences of the converged solve in x.
inline SuiteReport implicit_gradient_suite(std::size_t instances = 12, std::uint64_t seed = 31) {
  SuiteReport rep{"implicit_gradient", true, 0.0, 1e-4, 0, ""};
  std::mt19937_64 rng(seed);
  const FixedPointConfig c = detail::plain_solver(1e-12, 20000);
  for (std::size_t inst = 0; inst < instances; ++inst) {
    MixerSpec ms;
    ms.variant = inst % 3 == 2 ? MixerVariant::kronecker : MixerVariant::householder;
    ms.rank = 1 + inst % 2;
    ms.d_inner = ms.variant == MixerVariant::kronecker ? 4 : 4 + 4 * (inst % 2);
    const std::size_t d = ms.d_inner, T = 3 + inst % 3;
    const GatedDiagonalParams p = GatedDiagonalParams::init(d, ms, rng);
    const auto to_mat = [&](std::span<const double> v) {
      Mat m(T, d);
      std::copy(v.begin(), v.end(), m.data.begin());
      return m;
    };
    const auto h_of = [&](std::span<const double> xv) {
      const Mat xs = to_mat(xv);
      const auto r = solve([&](const Mat& h) { return fp_iteration_step(p, xs, h); }, 1, T, d, c);
      if (!r.converged[0]) throw NumericError("implicit_gradient_suite: solve did not converge");
      return r.h_star.to_vec();
    };
    const PlainStep f = [&](std::span<const double> xv, std::span<const double> hv) {
      return fp_iteration_step(p, to_mat(xv), to_mat(hv)).to_vec();
    };
    ++rep.cases;
    try {
      const Vec x = random_normal(T, d, 1.0, rng).to_vec();
      const Vec up = random_normal(1, T * d, 1.0, rng).to_vec();
      const Vec g = implicit_gradient_small(f, x, h_of(x), up);
      Vec xp = x;
      double num = 0.0, den = 0.0;
      for (std::size_t i = 0; i < x.size(); ++i) {
        xp[i] = x[i] + 1e-5;
        const double lp = dot(up, h_of(xp));
        xp[i] = x[i] - 1e-5;
        const double lm = dot(up, h_of(xp));
        xp[i] = x[i];
        const double fd = (lp - lm) / 2e-5;
        num = std::max(num, std::abs(fd - g[i]));
        den = std::max(den, std::abs(fd));
      }
      rep.metric = std::max(rep.metric, num / std::max(den, 1e-300));
    } catch (const std::exception& e) {
      rep.metric = INFINITY;
      rep.detail = e.what();
    }
  }
  rep.passed = rep.metric < rep.threshold;
  return rep;
}

/// Parallel and sequential scans on random shapes.
inline SuiteReport scan_suite(std::size_t draws = 24, std::uint64_t seed = 5) {
  SuiteReport rep{"scan_equivalence", true, 0.0, 1e-10, 0, ""};
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<int> log_t(0, 14);
  std::uniform_int_distribution<std::size_t> dim(1, 64);
  std::uniform_real_distribution<double> gate(0.0, 1.0);
  for (std::size_t k = 0; k < draws; ++k) {
    const std::size_t T = k == 0 ? 1 : k == 1 ? (std::size_t{1} << 14) : std::uniform_int_distribution<std::size_t>(
                                                                             1, std::size_t{1} << log_t(rng))(rng);
    const std::size_t d = T > 4096 ? 4 : dim(rng);
    Mat g(T, d);
    for (double& v : g.data) v = gate(rng);
    const Mat u = random_normal(T, d, 1.0, rng);
    const Mat a = scan_sequential(g, u), b = scan_parallel(g, u);
    rep.metric = std::max(rep.metric, max_abs_diff(a, b) / std::max(1.0, max_abs(a)));
    ++rep.cases;
  }
  rep.passed = rep.metric < rep.threshold;
  return rep;
}

/// Fixed-point gradients on W sigmoid(x + h): the k = 0 input gradient is
/// a descent direction for the implicit one.
inline SuiteReport descent_suite(std::size_t instances = 100, std::uint64_t seed = 21) {
  SuiteReport rep{"descent_direction", true, 0.0, 1.0, instances, ""};
  std::mt19937_64 rng(seed);
  std::vector<DescentInstance> xs;
  std::uniform_real_distribution<double> norm(0.5, 3.5);
  for (std::size_t i = 0; i < instances; ++i) xs.push_back(make_shared_dependence_instance(2 + i % 7, norm(rng), rng));
  rep.metric = descent_direction_check(xs);
  rep.passed = rep.metric >= rep.threshold;
  rep.detail = "fraction of instances with positive inner product";
  return rep;
}

}  // namespace fprnn
