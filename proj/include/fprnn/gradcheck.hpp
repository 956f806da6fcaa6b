#pragma once

// Central-difference gradient checks for tape-built functions and a
// catalogue of small cases covering every tape primitive.

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "fprnn/autodiff.hpp"

namespace fprnn::check {

using Builder = std::function<ad::Var(ad::Tape&, const std::vector<ad::Var>&)>;

struct GradCheck {
  double max_rel_error = 0.0;  // over inputs: ||analytic - fd||_inf / max(||fd||_inf, floor)
};

/// Loss = sum(out * W) for a fixed random W. Compares d loss / d input for
/// every input against central differences with step eps.
inline GradCheck check_gradients(const Builder& build, std::vector<Mat> inputs, std::uint64_t seed = 1, double eps = 1e-5,
                                 double floor = 1e-8) {
  std::mt19937_64 rng(seed);
  Mat weights;
  {
    ad::Tape t(false);
    std::vector<ad::Var> vars;
    for (auto& m : inputs) vars.push_back(t.constant(m));
    const Mat& out = build(t, vars).value();
    weights = random_normal(out.rows, out.cols, 1.0, rng);
  }
  auto loss_at = [&](const std::vector<Mat>& in) {
    ad::Tape t(false);
    std::vector<ad::Var> vars;
    for (const auto& m : in) vars.push_back(t.constant(m));
    return ad::weighted_sum(build(t, vars), weights).value().data[0];
  };
  ad::Tape t;
  std::vector<ad::Var> vars;
  for (auto& m : inputs) vars.push_back(t.input(m));
  t.backward(ad::weighted_sum(build(t, vars), weights));

  GradCheck r;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    const Mat analytic = t.grad(vars[k]).size() ? t.grad(vars[k]) : Mat(inputs[k].rows, inputs[k].cols);
    double num = 0.0, den = 0.0;
    for (std::size_t i = 0; i < inputs[k].size(); ++i) {
      const double orig = inputs[k].data[i];
      inputs[k].data[i] = orig + eps;
      const double lp = loss_at(inputs);
      inputs[k].data[i] = orig - eps;
      const double lm = loss_at(inputs);
      inputs[k].data[i] = orig;
      const double fd = (lp - lm) / (2.0 * eps);
      num = std::max(num, std::abs(analytic.data[i] - fd));
      den = std::max(den, std::abs(fd));
    }
    r.max_rel_error = std::max(r.max_rel_error, num / std::max(den, floor));
  }
  return r;
}


/// Compares parameter gradients written by `loss(params, &grads)` against
/// central differences of `loss(params, nullptr)`. P must expose
/// for_each_param(prefix, f); `grads` must have the same shapes, zeroed.
/// Only `per_param` randomly chosen entries of each array are probed.
template <class P, class Loss>
double check_param_gradients(P& params, P& grads, Loss&& loss, std::size_t per_param = 6, std::uint64_t seed = 3,
                             double eps = 1e-5, double floor = 1e-8) {
  loss(params, &grads);
  std::vector<Mat*> ps, gs;
  params.for_each_param("", [&](const std::string&, Mat& m) { ps.push_back(&m); });
  grads.for_each_param("", [&](const std::string&, Mat& m) { gs.push_back(&m); });
  std::mt19937_64 rng(seed);
  double num = 0.0, den = 0.0;
  for (std::size_t k = 0; k < ps.size(); ++k) {
    if (ps[k]->size() == 0) continue;
    std::uniform_int_distribution<std::size_t> pick(0, ps[k]->size() - 1);
    for (std::size_t n = 0; n < per_param; ++n) {
      const std::size_t i = pick(rng);
      double& v = ps[k]->data[i];
      const double orig = v;
      v = orig + eps;
      const double lp = loss(params, nullptr);
      v = orig - eps;
      const double lm = loss(params, nullptr);
      v = orig;
      const double fd = (lp - lm) / (2.0 * eps);
      num = std::max(num, std::abs(gs[k]->data[i] - fd));
      den = std::max(den, std::abs(fd));
    }
  }
  return num / std::max(den, floor);
}



struct PrimitiveCase {
  std::string name;
  Builder build;
  std::vector<Mat> inputs;
};

inline Mat positive_definite_blocks(std::size_t rows, std::size_t s, std::mt19937_64& rng) {
  Mat k(rows, s * s);
  for (std::size_t n = 0; n < rows; ++n) {
    Mat l = random_normal(s, s, 1.0, rng);
    for (std::size_t i = 0; i < s; ++i) l(i, i) += 2.0 * static_cast<double>(i + 1);
    const Mat g = matmul(l, transpose(l));
    std::copy(g.data.begin(), g.data.end(), k.row(n).begin());
  }
  return k;
}

inline std::vector<PrimitiveCase> primitive_cases(std::uint64_t seed = 42) {
  std::mt19937_64 rng(seed);
  auto R = [&](std::size_t r, std::size_t c) { return random_normal(r, c, 1.0, rng); };
  std::vector<PrimitiveCase> cs;
  using V = std::vector<ad::Var>;
  cs.push_back({"linear", [](ad::Tape&, const V& v) { return ad::linear(v[0], v[1]); }, {R(5, 3), R(4, 3)}});
  cs.push_back({"add_row", [](ad::Tape&, const V& v) { return ad::add_row(v[0], v[1]); }, {R(4, 3), R(1, 3)}});
  cs.push_back({"mul_row", [](ad::Tape&, const V& v) { return ad::mul_row(v[0], v[1]); }, {R(4, 3), R(1, 3)}});
  cs.push_back({"mul_col", [](ad::Tape&, const V& v) { return ad::mul_col(v[0], v[1]); }, {R(4, 3), R(4, 1)}});
  cs.push_back({"combine", [](ad::Tape&, const V& v) { return ad::combine(v[0], 0.3, v[1], -1.7); }, {R(3, 3), R(3, 3)}});
  cs.push_back({"scale", [](ad::Tape&, const V& v) { return ad::scale(v[0], 2.5); }, {R(3, 2)}});
  cs.push_back({"mul", [](ad::Tape&, const V& v) { return ad::mul(v[0], v[1]); }, {R(3, 4), R(3, 4)}});
  cs.push_back({"row_dot", [](ad::Tape&, const V& v) { return ad::row_dot(v[0], v[1]); }, {R(4, 5), R(4, 5)}});
  cs.push_back({"silu", [](ad::Tape&, const V& v) { return ad::silu(v[0]); }, {R(3, 4)}});
  cs.push_back({"sigmoid", [](ad::Tape&, const V& v) { return ad::sigmoid(v[0]); }, {R(3, 4)}});
  cs.push_back({"softplus", [](ad::Tape&, const V& v) { return ad::softplus(v[0]); }, {R(3, 4)}});
  cs.push_back({"exp", [](ad::Tape&, const V& v) { return ad::exp(v[0]); }, {R(3, 4)}});
  cs.push_back({"neg", [](ad::Tape&, const V& v) { return ad::neg(v[0]); }, {R(2, 2)}});
  cs.push_back({"one_minus", [](ad::Tape&, const V& v) { return ad::one_minus(v[0]); }, {R(2, 3)}});
  cs.push_back({"row_normalize", [](ad::Tape&, const V& v) { return ad::row_normalize(v[0]); }, {R(4, 5)}});
  cs.push_back({"reshape", [](ad::Tape&, const V& v) { return ad::reshape(v[0], 2, 6); }, {R(3, 4)}});
  cs.push_back({"col", [](ad::Tape&, const V& v) { return ad::col(v[0], 2); }, {R(3, 4)}});
  cs.push_back({"shift_within", [](ad::Tape&, const V& v) { return ad::shift_within(v[0], 3); }, {R(6, 2)}});
  cs.push_back({"tile_cols", [](ad::Tape&, const V& v) { return ad::tile_cols(v[0], 3); }, {R(4, 2)}});
  cs.push_back({"outer_rows", [](ad::Tape&, const V& v) { return ad::outer_rows(v[0], v[1]); }, {R(3, 2), R(3, 4)}});
  cs.push_back({"contract_rows", [](ad::Tape&, const V& v) { return ad::contract_rows(v[0], v[1]); }, {R(3, 2), R(3, 8)}});
  {
    Mat g = random_uniform(8, 3, 0.05, 0.95, rng);
    cs.push_back({"diag_scan", [](ad::Tape&, const V& v) { return ad::diag_scan(v[0], v[1], 4); }, {g, R(8, 3)}});
  }
  cs.push_back({"tril_gram", [](ad::Tape&, const V& v) { return ad::tril_gram(v[0], 3); }, {R(2, 6)}});
  cs.push_back({"eig_normalize",
                [](ad::Tape&, const V& v) { return ad::eig_normalize(v[0], 3, 0.99, 2000); },
                {positive_definite_blocks(2, 3, rng)}});
  cs.push_back({"kron_apply", [](ad::Tape&, const V& v) { return ad::kron_apply(v[0], v[1], v[2], 3); },
                {R(2, 9), R(2, 9), R(2, 9)}});
  {
    static const std::vector<int> ids{2, 0, 3, 3, 1};
    cs.push_back({"embedding", [](ad::Tape&, const V& v) { return ad::embedding(ids, v[0]); }, {R(4, 3)}});
  }
  {
    static const std::vector<int> targets{1, 0, 4};
    static const std::vector<int> mask{1, 0, 1};
    cs.push_back({"cross_entropy_masked",
                  [](ad::Tape&, const V& v) { return ad::cross_entropy_masked(v[0], targets, mask); }, {R(3, 5)}});
  }
  return cs;
}

}  // namespace fprnn::check
