#pragma once

// Gradients at the fixed point (optionally through the last k iterations),
// an explicit implicit-differentiation oracle for small problems, and the
// optimizer side of training.

#include <cmath>
#include <cstddef>
#include <functional>
#include <numbers>
#include <random>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "fprnn/autodiff.hpp"
#include "fprnn/fixed_point.hpp"
#include "fprnn/numerics.hpp"

namespace fprnn {

/// Records one iteration f(h) on the tape. Parameters and inputs are bound
/// by the recorder itself.
using StepRecorder = std::function<ad::Var(ad::Tape&, ad::Var)>;

/// Re-records the last min(k + 1, iterations) applications of the solver,
/// including their damping, starting from the detached iterate that fed
/// them. k = 0 differentiates the final application only. Returns the node
/// holding h*.
inline ad::Var replay_fixed_point(ad::Tape& t, const StepRecorder& rec, const FixedPointResult& r, std::size_t k) {
  if (r.iterations == 0) throw std::logic_error("replay_fixed_point: solver ran no iterations");
  const std::size_t n = std::min(k + 1, r.iterations);
  if (r.tail.size() < n)
    throw std::logic_error("replay_fixed_point: solver kept " + std::to_string(r.tail.size()) + " iterates, replay needs " +
                           std::to_string(n) + " (raise keep_last)");
  const std::size_t first = r.tail.size() - n;
  ad::Var h = t.constant(r.tail[first].input);
  for (std::size_t i = first; i < r.tail.size(); ++i) {
    ad::Var f = rec(t, h);
    const double delta = r.tail[i].delta;
    h = delta == 1.0 ? f : ad::combine(f, delta, h, 1.0 - delta);
  }
  return h;
}

/// Replays as above and back-propagates `upstream` = dL/dh*.
inline ad::Var backward_at_fixed_point(ad::Tape& t, const StepRecorder& rec, const FixedPointResult& r, std::size_t k,
                                       const Mat& upstream) {
  ad::Var h = replay_fixed_point(t, rec, r, k);
  if (!h.value().same_shape(upstream)) throw DimensionError("backward_at_fixed_point: upstream shape " + shape_str(upstream));
  t.backward(h, upstream);
  return h;
}

// ---------------------------------------------------------------------------
// Small dense oracle

using PlainStep = std::function<Vec(std::span<const double> x, std::span<const double> h)>;

/// Column j = (f(.. + eps e_j ..) - f(.. - eps e_j ..)) / (2 eps) w.r.t. x or h.
inline Mat finite_difference_jacobian(const PlainStep& f, std::span<const double> x, std::span<const double> h,
                                      bool wrt_h, double eps = 1e-6) {
  Vec xv(x.begin(), x.end()), hv(h.begin(), h.end());
  Vec& var = wrt_h ? hv : xv;
  const std::size_t m = f(xv, hv).size();
  Mat j(m, var.size());
  for (std::size_t c = 0; c < var.size(); ++c) {
    const double orig = var[c];
    var[c] = orig + eps;
    const Vec fp = f(xv, hv);
    var[c] = orig - eps;
    const Vec fm = f(xv, hv);
    var[c] = orig;
    for (std::size_t r = 0; r < m; ++r) j(r, c) = (fp[r] - fm[r]) / (2.0 * eps);
  }
  return j;
}

/// upstream^T (I - J_h)^{-1} J_x at h*, with both Jacobians by central
/// differences. Verification only.
inline Vec implicit_gradient_small(const PlainStep& f, std::span<const double> x, std::span<const double> h_star,
                                   std::span<const double> upstream, double eps = 1e-6) {
  if (h_star.size() > 512) throw DimensionError("implicit_gradient_small: state too large");
  if (upstream.size() != h_star.size()) throw DimensionError("implicit_gradient_small: upstream size");
  const Mat jh = finite_difference_jacobian(f, x, h_star, true, eps);
  const Mat jx = finite_difference_jacobian(f, x, h_star, false, eps);
  const Mat a = sub(Mat::identity(h_star.size()), jh);
  // Pivots below the finite-difference noise floor count as singular.
  const Vec w = LuDecomposition(a, 1e-8).solve_transposed(upstream);
  return matvec_transposed(jx, w);
}

// ---------------------------------------------------------------------------
// Descent-direction check

/// A step on a single state vector, written with tape ops so both the
/// truncated gradient and finite differences use the same definition.
struct DescentInstance {
  std::function<ad::Var(ad::Var x, ad::Var h)> step;
  Vec x;
  Vec upstream;
};

inline Vec evaluate_step(const DescentInstance& inst, std::span<const double> x, std::span<const double> h) {
  ad::Tape t(false);
  Vec out = inst.step(t.constant(Mat::row_vector(x)), t.constant(Mat::row_vector(h))).value().to_vec();
  return out;
}

struct DescentReport {
  double inner = 0.0;
  Vec k0_grad;
  Vec implicit_grad;
};

inline DescentReport descent_report(const DescentInstance& inst, double tol = 1e-13, std::size_t max_iter = 100000) {
  const std::size_t d = inst.upstream.size();
  Vec h(d, 0.0);
  for (std::size_t it = 0; it < max_iter; ++it) {
    Vec next = evaluate_step(inst, inst.x, h);
    double diff = 0.0;
    for (std::size_t i = 0; i < d; ++i) diff = std::max(diff, std::abs(next[i] - h[i]));
    h = std::move(next);
    if (diff < tol) break;
  }
  DescentReport rep;
  ad::Tape t;
  ad::Var x = t.input(Mat::row_vector(inst.x));
  ad::Var out = inst.step(x, t.constant(Mat::row_vector(h)));
  t.backward(out, Mat::row_vector(inst.upstream));
  rep.k0_grad = t.grad(x).to_vec();
  PlainStep f = [&](std::span<const double> xv, std::span<const double> hv) { return evaluate_step(inst, xv, hv); };
  rep.implicit_grad = implicit_gradient_small(f, inst.x, h, inst.upstream);
  rep.inner = dot(rep.implicit_grad, rep.k0_grad);
  return rep;
}

/// Fraction of instances whose fixed-point (k = 0) input gradient has a
/// positive inner product with the implicit gradient.
inline double descent_direction_check(const std::vector<DescentInstance>& instances) {
  if (instances.empty()) return 0.0;
  std::size_t ok = 0;
  for (const auto& inst : instances) ok += descent_report(inst).inner > 0.0;
  return static_cast<double>(ok) / static_cast<double>(instances.size());
}

/// f(x, h) = W sigmoid(x + h) with ||W||_2 = target_norm; dependence on x
/// and h only through x + h, so both Jacobians coincide. A target_norm
/// below 4 makes f a contraction in h.
inline DescentInstance make_shared_dependence_instance(std::size_t d, double target_norm, std::mt19937_64& rng) {
  Mat w = random_normal(d, d, 1.0, rng);
  w = scale(w, target_norm / spectral_norm(w, 500));
  DescentInstance inst;
  inst.x = random_normal(1, d, 1.0, rng).to_vec();
  inst.upstream = random_normal(1, d, 1.0, rng).to_vec();
  inst.step = [w](ad::Var x, ad::Var h) {
    ad::Var wv = x.tape->constant(w);
    return ad::linear(ad::sigmoid(ad::add(x, h)), wv);
  };
  return inst;
}

/// Linear step f(x, h) = J h + B x with separate Jacobians.
inline DescentInstance make_linear_instance(const Mat& jh, const Mat& jx, Vec x, Vec upstream) {
  DescentInstance inst;
  inst.x = std::move(x);
  inst.upstream = std::move(upstream);
  inst.step = [jh, jx](ad::Var xv, ad::Var hv) {
    ad::Tape& t = *xv.tape;
    return ad::add(ad::linear(hv, t.constant(jh)), ad::linear(xv, t.constant(jx)));
  };
  return inst;
}

// ---------------------------------------------------------------------------
// Optimization

enum class Schedule { constant, linear_warmup, cosine_warmup };

inline Schedule parse_schedule(const std::string& s) {
  if (s == "constant") return Schedule::constant;
  if (s == "linear") return Schedule::linear_warmup;
  if (s == "cosine") return Schedule::cosine_warmup;
  throw std::invalid_argument("unknown schedule: " + s);
}

inline const char* to_string(Schedule s) {
  switch (s) {
    case Schedule::constant: return "constant";
    case Schedule::linear_warmup: return "linear";
    case Schedule::cosine_warmup: return "cosine";
  }
  return "?";
}

struct TrainConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
  double clip_norm = 1.0;
  Schedule schedule = Schedule::constant;
  std::size_t warmup = 0;
  std::size_t total_steps = 1000;
  double final_lr_factor = 0.001;
  std::size_t k_backprop = 0;
  std::uint64_t seed = 0;

  void validate() const {
    if (!(lr > 0.0)) throw std::invalid_argument("TrainConfig: lr must be > 0");
    if (!(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0)) throw std::invalid_argument("TrainConfig: betas");
  }
};

inline double learning_rate(const TrainConfig& cfg, std::size_t step) {
  const double peak = cfg.lr;
  if (cfg.schedule == Schedule::constant) return peak;
  if (step < cfg.warmup) return peak * static_cast<double>(step) / static_cast<double>(cfg.warmup);
  const std::size_t span = cfg.total_steps > cfg.warmup ? cfg.total_steps - cfg.warmup : 1;
  const double p = std::min(1.0, static_cast<double>(step - cfg.warmup) / static_cast<double>(span));
  const double floor = cfg.final_lr_factor * peak;
  if (cfg.schedule == Schedule::linear_warmup) return floor + (peak - floor) * (1.0 - p);
  return floor + (peak - floor) * 0.5 * (1.0 + std::cos(std::numbers::pi * p));
}

inline double global_norm(const std::vector<Mat*>& grads) {
  double s = 0.0;
  for (const Mat* g : grads)
    for (double v : g->data) s += v * v;
  return std::sqrt(s);
}

struct ClipResult {
  double norm = 0.0;
  double lr = 0.0;
};

/// Scales grads to global norm <= clip_norm (if clip_norm > 0) and returns
/// the pre-clip norm with the scheduled learning rate.
inline ClipResult clip_and_schedule(const std::vector<Mat*>& grads, std::size_t step, const TrainConfig& cfg) {
  ClipResult r;
  r.norm = global_norm(grads);
  if (cfg.clip_norm > 0.0 && r.norm > cfg.clip_norm) {
    const double s = cfg.clip_norm / r.norm;
    for (Mat* g : grads)
      for (double& v : g->data) v *= s;
  }
  r.lr = learning_rate(cfg, step);
  return r;
}

struct AdamState {
  std::vector<Mat> m, v;
  std::size_t step = 0;
};

inline void adamw_step(const std::vector<Mat*>& params, const std::vector<Mat*>& grads, AdamState& st,
                       const TrainConfig& cfg, double lr) {
  if (params.size() != grads.size()) throw DimensionError("adamw_step: params/grads count mismatch");
  if (st.m.empty()) {
    for (const Mat* p : params) {
      st.m.emplace_back(p->rows, p->cols);
      st.v.emplace_back(p->rows, p->cols);
    }
  }
  if (st.m.size() != params.size()) throw DimensionError("adamw_step: optimizer state does not match params");
  ++st.step;
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(st.step));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(st.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    Mat& p = *params[i];
    const Mat& g = *grads[i];
    require_same_shape(p, g, "adamw_step");
    Mat& m = st.m[i];
    Mat& v = st.v[i];
    for (std::size_t j = 0; j < p.size(); ++j) {
      m.data[j] = cfg.beta1 * m.data[j] + (1.0 - cfg.beta1) * g.data[j];
      v.data[j] = cfg.beta2 * v.data[j] + (1.0 - cfg.beta2) * g.data[j] * g.data[j];
      const double mh = m.data[j] / bc1;
      const double vh = v.data[j] / bc2;
      p.data[j] -= lr * (mh / (std::sqrt(vh) + cfg.eps) + cfg.weight_decay * p.data[j]);
    }
  }
}

/// Plain-matrix masked cross-entropy: returns the mean loss and fills
/// `dlogits` with its gradient.
inline double cross_entropy_masked(const Mat& logits, std::span<const int> targets, std::span<const int> mask,
                                   Mat* dlogits = nullptr) {
  ad::Tape t(dlogits != nullptr);
  ad::Var z = t.input(logits);
  ad::Var loss = ad::cross_entropy_masked(z, targets, mask);
  const double value = loss.value().data[0];
  if (dlogits) {
    t.backward(loss);
    *dlogits = t.grad(z);
  }
  return value;
}

}  // namespace fprnn
