#pragma once

// Damped Picard iteration h^l = delta f(h^{l-1}) + (1 - delta) h^{l-1} from
// h^0 = 0 with a per-sequence relative stopping rule, and the dense explicit
// recurrences it is checked against.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <deque>
#include <functional>
#include <ostream>
#include <random>
#include <string>
#include <vector>

#include "fprnn/numerics.hpp"

namespace fprnn {

class NonFiniteIterate : public NumericError {
 public:
  NonFiniteIterate(std::size_t iteration, const std::string& where)
      : NumericError("non-finite fixed-point iterate at iteration " + std::to_string(iteration) +
                     (where.empty() ? "" : " (" + where + ")")),
        iteration_(iteration) {}
  std::size_t iteration() const { return iteration_; }

 private:
  std::size_t iteration_;
};

struct DampingConfig {
  double delta0 = 1.0;
  double factor = 0.5;
  std::size_t patience = 5;
  bool enabled = true;
};

struct FixedPointConfig {
  double tol = 0.1;
  std::size_t ell_max = 16;
  bool sample_ell_max = false;
  double gamma_shape = 4.0;
  double gamma_scale = 1.0;
  double batch_quantile = 0.75;
  DampingConfig damping;
  // Number of trailing iterations whose inputs are kept for replay.
  std::size_t keep_last = 1;

  static FixedPointConfig training() { return {}; }
  // Undamped: once delta < 1 the residual is scaled by delta and the stop
  // no longer tracks the distance to the fixed point.
  static FixedPointConfig evaluation() {
    FixedPointConfig c;
    c.ell_max = 512;
    c.batch_quantile = 1.0;
    c.damping.enabled = false;
    return c;
  }

  void validate() const {
    if (!(tol > 0.0)) throw std::invalid_argument("FixedPointConfig: tol must be > 0");
    if (ell_max == 0) throw std::invalid_argument("FixedPointConfig: ell_max must be >= 1");
    if (!(batch_quantile > 0.0 && batch_quantile <= 1.0))
      throw std::invalid_argument("FixedPointConfig: batch_quantile must be in (0, 1]");
    if (!(damping.factor > 0.0 && damping.factor < 1.0))
      throw std::invalid_argument("FixedPointConfig: damping factor must be in (0, 1)");
    if (!(damping.delta0 > 0.0 && damping.delta0 <= 1.0))
      throw std::invalid_argument("FixedPointConfig: delta0 must be in (0, 1]");
    if (sample_ell_max && !(gamma_shape > 0.0 && gamma_scale > 0.0))
      throw std::invalid_argument("FixedPointConfig: gamma parameters must be positive");
  }
};

/// One recorded application: output = delta * f(input) + (1 - delta) * input.
struct IterationRecord {
  Mat input;
  double delta = 1.0;
};

struct FixedPointResult {
  Mat h_star;
  std::vector<std::size_t> ell_star;
  std::vector<bool> converged;
  std::vector<double> final_residual;
  // Per iteration: max residual over sequences, fraction of converged
  // sequences, absolute 2-norm of h^l - h^{l-1}.
  std::vector<double> residual_trace;
  std::vector<double> fraction_trace;
  std::vector<double> step_norm_trace;
  std::size_t iterations = 0;
  std::size_t ell_max_used = 0;
  // Inputs of the last keep_last iterations, oldest first.
  std::deque<IterationRecord> tail;
};

inline Mat damped_update(const Mat& h_prev, const Mat& f_val, double delta) {
  require_same_shape(h_prev, f_val, "damped_update");
  if (!(delta > 0.0 && delta <= 1.0)) throw std::invalid_argument("damped_update: delta must be in (0, 1]");
  if (delta == 1.0) return f_val;
  Mat out(h_prev.rows, h_prev.cols);
  for (std::size_t i = 0; i < out.size(); ++i) out.data[i] = delta * f_val.data[i] + (1.0 - delta) * h_prev.data[i];
  return out;
}

/// ceil(Gamma(shape, scale)) clamped to [1, cap].
inline std::size_t sample_ell_max(const FixedPointConfig& cfg, std::mt19937_64& rng) {
  std::gamma_distribution<double> g(cfg.gamma_shape, cfg.gamma_scale);
  const double v = std::ceil(g(rng));
  return std::clamp<std::size_t>(static_cast<std::size_t>(std::max(v, 1.0)), 1, cfg.ell_max);
}

/// Relative residual ||a - b||_inf / max(||a||_inf, tiny) over rows [r0, r1).
inline double relative_residual(const Mat& a, const Mat& b, std::size_t r0, std::size_t r1) {
  constexpr double tiny = 1e-12;
  double num = 0.0, den = 0.0;
  for (std::size_t i = r0 * a.cols; i < r1 * a.cols; ++i) {
    num = std::max(num, std::abs(a.data[i] - b.data[i]));
    den = std::max(den, std::abs(a.data[i]));
  }
  return num / std::max(den, tiny);
}

using StepFn = std::function<Mat(const Mat&)>;

/// Iterates `step` on an iterate of shape (batch * seq_len) x cols, where
/// each group of seq_len consecutive rows is one sequence. `rng` is only
/// needed when cfg.sample_ell_max is set.
inline FixedPointResult solve(const StepFn& step, std::size_t batch, std::size_t seq_len, std::size_t cols,
                              const FixedPointConfig& cfg, std::mt19937_64* rng = nullptr) {
  cfg.validate();
  if (batch == 0 || seq_len == 0) throw DimensionError("solve: empty batch");
  std::size_t ell_max = cfg.ell_max;
  if (cfg.sample_ell_max) {
    if (!rng) throw std::invalid_argument("solve: sample_ell_max needs an rng");
    ell_max = sample_ell_max(cfg, *rng);
  }

  FixedPointResult res;
  res.ell_max_used = ell_max;
  res.ell_star.assign(batch, ell_max);
  res.converged.assign(batch, false);
  res.final_residual.assign(batch, 0.0);
  std::vector<bool> reached(batch, false);

  Mat h(batch * seq_len, cols);
  double delta = cfg.damping.delta0;
  double best = std::numeric_limits<double>::infinity();
  std::size_t stall = 0;
  const auto needed = static_cast<std::size_t>(std::ceil(cfg.batch_quantile * static_cast<double>(batch) - 1e-9));
  std::vector<double> r(batch);

  for (std::size_t ell = 1; ell <= ell_max; ++ell) {
    if (cfg.keep_last > 0) {
      res.tail.push_back({h, delta});
      while (res.tail.size() > cfg.keep_last) res.tail.pop_front();
    }
    Mat f = step(h);
    if (!f.same_shape(h)) throw DimensionError("solve: step changed the iterate shape to " + shape_str(f));
    Mat next = damped_update(h, f, delta);
    if (!all_finite(next)) throw NonFiniteIterate(ell, "");

    double step_sq = 0.0;
    for (std::size_t i = 0; i < next.size(); ++i) {
      const double dd = next.data[i] - h.data[i];
      step_sq += dd * dd;
    }
    std::size_t n_conv = 0;
    double worst = 0.0;
    for (std::size_t b = 0; b < batch; ++b) {
      r[b] = relative_residual(next, h, b * seq_len, (b + 1) * seq_len);
      worst = std::max(worst, r[b]);
      if (r[b] < cfg.tol) {
        ++n_conv;
        if (!reached[b]) {
          reached[b] = true;
          res.ell_star[b] = ell;
        }
      }
    }
    h = std::move(next);
    res.iterations = ell;
    res.residual_trace.push_back(worst);
    res.fraction_trace.push_back(static_cast<double>(n_conv) / static_cast<double>(batch));
    res.step_norm_trace.push_back(std::sqrt(step_sq));
    if (n_conv >= needed) break;

    if (cfg.damping.enabled) {
      // Stopping statistic: the residual at the batch quantile.
      std::vector<double> sorted = r;
      std::sort(sorted.begin(), sorted.end());
      const double stat = sorted[std::min(batch - 1, needed == 0 ? 0 : needed - 1)];
      if (stat < best) {
        best = stat;
        stall = 0;
      } else if (++stall >= cfg.damping.patience) {
        delta *= cfg.damping.factor;
        stall = 0;
        best = stat;
      }
    }
  }
  for (std::size_t b = 0; b < batch; ++b) {
    res.final_residual[b] = r[b];
    res.converged[b] = r[b] < cfg.tol;
  }
  res.h_star = std::move(h);
  return res;
}

inline void write_residual_csv(std::ostream& os, const FixedPointResult& r, bool header = true) {
  if (header) os << "iteration,residual,fraction_converged\n";
  for (std::size_t i = 0; i < r.residual_trace.size(); ++i)
    os << (i + 1) << ',' << r.residual_trace[i] << ',' << r.fraction_trace[i] << '\n';
}

// ---------------------------------------------------------------------------
// Dense oracles for input-independent parameters

/// x: T x d_in. ungated: h_t = Q^{-1} Lambda h_{t-1} + B x_t.
/// gated: h_t = M^{-1} Lambda h_{t-1} + M^{-1} (I - Lambda) Q B x_t with
/// M = I - (I - Lambda)(I - Q).
inline Mat dense_oracle(std::span<const double> lambda, const Mat& q, const Mat& b, const Mat& x, bool gated) {
  const std::size_t d = lambda.size();
  if (q.rows != d || q.cols != d || b.rows != d || b.cols != x.cols) throw DimensionError("dense_oracle: shape mismatch");
  const Mat lam = Mat::diagonal(lambda);
  const Mat eye = Mat::identity(d);
  Mat h(x.rows, d);
  Vec prev(d, 0.0);
  if (!gated) {
    const LuDecomposition qlu(q);
    for (std::size_t t = 0; t < x.rows; ++t) {
      Vec lh(d);
      for (std::size_t i = 0; i < d; ++i) lh[i] = lambda[i] * prev[i];
      const Vec a = qlu.solve(lh);
      const Vec bx = matvec(b, x.row(t));
      for (std::size_t i = 0; i < d; ++i) prev[i] = a[i] + bx[i];
      std::copy(prev.begin(), prev.end(), h.row(t).begin());
    }
    return h;
  }
  const Mat m = sub(eye, matmul(sub(eye, lam), sub(eye, q)));
  const LuDecomposition mlu(m);
  for (std::size_t t = 0; t < x.rows; ++t) {
    const Vec qbx = matvec(q, matvec(b, x.row(t)));
    Vec rhs(d);
    for (std::size_t i = 0; i < d; ++i) rhs[i] = lambda[i] * prev[i] + (1.0 - lambda[i]) * qbx[i];
    prev = mlu.solve(rhs);
    std::copy(prev.begin(), prev.end(), h.row(t).begin());
  }
  return h;
}

/// A = (I + (Lambda^{-1} - I) Q)^{-1}.
inline Mat effective_transition(std::span<const double> lambda, const Mat& q) {
  const std::size_t d = lambda.size();
  if (q.rows != d || q.cols != d) throw DimensionError("effective_transition: shape mismatch");
  Mat inner = Mat::identity(d);
  for (std::size_t i = 0; i < d; ++i) {
    if (!(lambda[i] > 0.0)) throw NumericError("effective_transition: lambda must be positive");
    const double c = 1.0 / lambda[i] - 1.0;
    for (std::size_t j = 0; j < d; ++j) inner(i, j) += c * q(i, j);
  }
  return inverse(inner);
}

}  // namespace fprnn
