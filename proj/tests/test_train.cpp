#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "fprnn/instances.hpp"
#include "fprnn/train.hpp"
#include "fprnn/gradcheck.hpp"

using namespace fprnn;

namespace {

FixedPointConfig fixed_iterations(std::size_t n, std::size_t keep) {
  FixedPointConfig c;
  c.tol = 1e-300;
  c.ell_max = n;
  c.batch_quantile = 1.0;
  c.damping.enabled = false;
  c.keep_last = keep;
  return c;
}

// Scalar f(x, h) = 0.5 h + x.
struct HalfPlusX {
  double x = 1.0;
  StepFn plain() const {
    return [x = x](const Mat& h) { return Mat(1, 1, 0.5 * h(0, 0) + x); };
  }
  StepRecorder recorder(ad::Var xv) const {
    return [xv](ad::Tape&, ad::Var h) { return ad::add(ad::scale(h, 0.5), xv); };
  }
};

// Vector FP-RNN on one sequence with the input as the differentiated leaf.
struct RnnProblem {
  GatedDiagonalParams p;
  Mat x;
  std::size_t T, d;

  static RnnProblem make(std::size_t d, std::size_t T, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    MixerSpec ms;
    ms.variant = MixerVariant::householder;
    ms.d_inner = d;
    ms.rank = 1;
    ms.hidden_dependence = true;
    RnnProblem r{GatedDiagonalParams::init(d, ms, rng), random_normal(T, d, 1.0, rng), T, d};
    return r;
  }
  StepFn plain(const Mat& xs) const {
    return [this, xs](const Mat& h) { return fp_iteration_step(p, xs, h); };
  }
};

}  // namespace

TEST(FixedPointGradient, ScalarTruncatedVersusImplicit) {
  HalfPlusX f;
  FixedPointConfig c = fixed_iterations(80, 80);
  const auto res = solve(f.plain(), 1, 1, 1, c);
  ASSERT_NEAR(res.h_star(0, 0), 2.0, 1e-12);
  for (std::size_t k : {0u, 1u, 2u, 5u}) {
    ad::Tape t;
    ad::Var x = t.input(Mat(1, 1, 1.0));
    backward_at_fixed_point(t, f.recorder(x), res, k, Mat(1, 1, 1.0));
    // Neumann partial sum: sum_{i <= k} 0.5^i.
    EXPECT_NEAR(t.grad(x)(0, 0), 2.0 - std::pow(0.5, double(k)), 1e-14) << "k=" << k;
  }
  PlainStep ps = [](std::span<const double> x, std::span<const double> h) { return Vec{0.5 * h[0] + x[0]}; };
  EXPECT_NEAR(implicit_gradient_small(ps, Vec{1.0}, Vec{2.0}, Vec{1.0})[0], 2.0, 1e-8);
}

TEST(FixedPointGradient, ZeroUpstreamGivesZero) {
  const RnnProblem pr = RnnProblem::make(4, 5, 1);
  const auto res = solve(pr.plain(pr.x), 1, pr.T, pr.d, fixed_iterations(6, 3));
  GatedDiagonalParams g = pr.p;
  g.for_each_param("", [](const std::string&, Mat& m) { m = Mat(m.rows, m.cols); });
  ad::Tape t;
  ad::Var x = t.input(pr.x);
  const GatedDiagonalVars vars = bind(t, pr.p, &g);
  StepRecorder rec = [&](ad::Tape&, ad::Var h) { return fp_rnn_step(pr.p, vars, x, h, pr.T); };
  backward_at_fixed_point(t, rec, res, 2, Mat(pr.T, pr.d));
  EXPECT_EQ(max_abs(t.grad(x)), 0.0);
  g.for_each_param("", [](const std::string& n, Mat& m) { EXPECT_EQ(max_abs(m), 0.0) << n; });
}

TEST(FixedPointGradient, ReplayNeedsEnoughKeptIterates) {
  HalfPlusX f;
  const auto res = solve(f.plain(), 1, 1, 1, fixed_iterations(10, 1));
  ad::Tape t;
  ad::Var x = t.input(Mat(1, 1, 1.0));
  EXPECT_THROW(replay_fixed_point(t, f.recorder(x), res, 3), std::logic_error);
  EXPECT_THROW(backward_at_fixed_point(t, f.recorder(x), res, 0, Mat(2, 1)), DimensionError);
}

class FullUnroll : public ::testing::TestWithParam<std::tuple<std::size_t, double>> {};

TEST_P(FullUnroll, MatchesFiniteDifferencesOfWholeSolve) {
  const auto [iters, delta0] = GetParam();
  const RnnProblem pr = RnnProblem::make(4, 5, 2);
  FixedPointConfig c = fixed_iterations(iters, iters);
  c.damping.delta0 = delta0;
  std::mt19937_64 rng(7);
  const Mat up = random_normal(pr.T, pr.d, 1.0, rng);
  auto loss_at = [&](const Mat& xs) {
    const auto r = solve(pr.plain(xs), 1, pr.T, pr.d, c);
    double s = 0.0;
    for (std::size_t i = 0; i < up.size(); ++i) s += up.data[i] * r.h_star.data[i];
    return s;
  };
  const auto res = solve(pr.plain(pr.x), 1, pr.T, pr.d, c);
  ad::Tape t;
  ad::Var x = t.input(pr.x);
  const GatedDiagonalVars vars = bind(t, pr.p, nullptr);
  StepRecorder rec = [&](ad::Tape&, ad::Var h) { return fp_rnn_step(pr.p, vars, x, h, pr.T); };
  backward_at_fixed_point(t, rec, res, iters, up);
  const Mat analytic = t.grad(x);

  Mat xs = pr.x;
  double num = 0.0, den = 0.0;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    const double o = xs.data[i];
    xs.data[i] = o + 1e-6;
    const double lp = loss_at(xs);
    xs.data[i] = o - 1e-6;
    const double lm = loss_at(xs);
    xs.data[i] = o;
    const double fd = (lp - lm) / 2e-6;
    num = std::max(num, std::abs(fd - analytic.data[i]));
    den = std::max(den, std::abs(fd));
  }
  EXPECT_LT(num / den, 1e-6);
}

INSTANTIATE_TEST_SUITE_P(Iterations, FullUnroll,
                         ::testing::Values(std::make_tuple(std::size_t{2}, 1.0), std::make_tuple(std::size_t{6}, 1.0),
                                           std::make_tuple(std::size_t{5}, 0.5)));

TEST(FixedPointGradient, TruncationErrorShrinksGeometrically) {
  std::mt19937_64 rng(3);
  const std::size_t d = 5;
  Mat jh = random_normal(d, d, 1.0, rng);
  jh = scale(jh, 0.6 / spectral_norm(jh, 500));
  const Mat jx = random_normal(d, d, 1.0, rng);
  const Vec x = random_normal(1, d, 1.0, rng).to_vec(), up = random_normal(1, d, 1.0, rng).to_vec();
  const DescentInstance inst = make_linear_instance(jh, jx, x, up);
  // Exact implicit gradient for the linear map.
  const Vec w = LuDecomposition(sub(Mat::identity(d), jh)).solve_transposed(up);
  const Vec exact = matvec_transposed(jx, w);

  StepFn plain = [&](const Mat& h) { return Mat::row_vector(evaluate_step(inst, x, h.row(0))); };
  const auto res = solve(plain, 1, 1, d, fixed_iterations(200, 40));
  double prev = std::numeric_limits<double>::infinity();
  for (std::size_t k = 0; k < 30; k += 3) {
    ad::Tape t;
    ad::Var xv = t.input(Mat::row_vector(x));
    StepRecorder rec = [&](ad::Tape&, ad::Var h) { return inst.step(xv, h); };
    backward_at_fixed_point(t, rec, res, k, Mat::row_vector(up));
    const Vec g = t.grad(xv).to_vec();
    double err = 0.0;
    for (std::size_t i = 0; i < d; ++i) err = std::max(err, std::abs(g[i] - exact[i]));
    // Neumann tail: ||sum_{i > k} J^i|| <= 0.6^{k+1} / 0.4.
    EXPECT_LE(err, std::pow(0.6, double(k + 1)) / 0.4 * norm2(up) * spectral_norm(jx, 500) * (1 + 1e-9));
    if (prev > 1e-12) {
      EXPECT_LT(err, prev);
    }
    prev = err;
  }
}

TEST(ImplicitGradient, NoStateDependenceIsChainRule) {
  std::mt19937_64 rng(4);
  const Mat w = random_normal(3, 3, 1.0, rng);
  PlainStep f = [&](std::span<const double> x, std::span<const double>) {
    Vec s(x.size());
    for (std::size_t i = 0; i < s.size(); ++i) s[i] = sigmoid(x[i]);
    return matvec(w, s);
  };
  const Vec x{0.3, -0.2, 1.1}, up{1.0, 2.0, -1.0};
  const Vec g = implicit_gradient_small(f, x, f(x, Vec(3, 0.0)), up);
  for (std::size_t j = 0; j < 3; ++j) {
    double ref = 0.0;
    for (std::size_t i = 0; i < 3; ++i) ref += up[i] * w(i, j);
    ref *= sigmoid(x[j]) * (1.0 - sigmoid(x[j]));
    EXPECT_NEAR(g[j], ref, 1e-8);
  }
}

TEST(ImplicitGradient, SingularSystemIsAnError) {
  PlainStep f = [](std::span<const double> x, std::span<const double> h) { return Vec{h[0] + x[0]}; };
  EXPECT_THROW(implicit_gradient_small(f, Vec{1.0}, Vec{0.0}, Vec{1.0}), NumericError);
}

TEST(ImplicitGradient, MatchesFiniteDifferencesOfConvergedSolve) {
  const RnnProblem pr = RnnProblem::make(4, 2, 5);
  std::mt19937_64 rng(6);
  const Vec up = random_normal(1, pr.T * pr.d, 1.0, rng).to_vec();
  FixedPointConfig c = fixed_iterations(5000, 1);
  c.tol = 1e-10;
  auto h_of = [&](std::span<const double> xflat) {
    Mat xs(pr.T, pr.d);
    std::copy(xflat.begin(), xflat.end(), xs.data.begin());
    return solve(pr.plain(xs), 1, pr.T, pr.d, c).h_star.to_vec();
  };
  PlainStep f = [&](std::span<const double> xflat, std::span<const double> hflat) {
    Mat xs(pr.T, pr.d), hs(pr.T, pr.d);
    std::copy(xflat.begin(), xflat.end(), xs.data.begin());
    std::copy(hflat.begin(), hflat.end(), hs.data.begin());
    return fp_iteration_step(pr.p, xs, hs).to_vec();
  };
  const Vec x = pr.x.to_vec();
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
  EXPECT_LT(num / den, 1e-4);
}

TEST(DescentDirection, SharedDependenceInstancesAlwaysDescend) {
  std::mt19937_64 rng(8);
  std::vector<DescentInstance> insts;
  for (int i = 0; i < 100; ++i) insts.push_back(make_shared_dependence_instance(2 + i % 7, 0.5 + 3.4 * (i % 10) / 10.0, rng));
  EXPECT_EQ(descent_direction_check(insts), 1.0);
}

TEST(DescentDirection, ScalarSymmetricLinearCase) {
  for (double j : {-0.9, -0.3, 0.2, 0.8}) {
    const auto inst = make_linear_instance(Mat(1, 1, j), Mat(1, 1, j), Vec{1.0}, Vec{1.0});
    const auto rep = descent_report(inst);
    EXPECT_NEAR(rep.inner, j * j / (1.0 - j), 1e-6) << "j=" << j;
    EXPECT_GT(rep.inner, 0.0);
  }
}

TEST(DescentDirection, UnequalJacobiansCanAscend) {
  const Mat rot = Mat::from_rows({{0.0, -0.95}, {0.95, 0.0}});
  const Mat b = Mat::from_rows({{1.0, 0.0}, {0.0, 0.1}});
  const auto inst = make_linear_instance(rot, b, Vec{0.5, -0.5}, Vec{1.0, -47.0});
  const auto rep = descent_report(inst);
  // k = 0 gradient is B^T u; implicit is B^T (I - J)^{-T} u.
  const Vec w = LuDecomposition(sub(Mat::identity(2), rot)).solve_transposed(Vec{1.0, -47.0});
  const Vec exact = matvec_transposed(b, w);
  EXPECT_NEAR(rep.k0_grad[0], 1.0, 1e-12);
  EXPECT_NEAR(rep.k0_grad[1], -4.7, 1e-12);
  EXPECT_NEAR(rep.implicit_grad[0], exact[0], 1e-6);
  EXPECT_LT(rep.inner, 0.0);
  EXPECT_LT(descent_direction_check({inst}), 1.0);
}

TEST(AdamW, DecayOnlyStep) {
  Mat p(2, 2, 3.0), g(2, 2);
  AdamState st;
  TrainConfig c;
  c.weight_decay = 0.1;
  adamw_step({&p}, {&g}, st, c, 0.001);
  for (double v : p.data) EXPECT_DOUBLE_EQ(v, 3.0 * (1.0 - 0.001 * 0.1));
}

TEST(AdamW, FirstStepMovesByLearningRate) {
  Mat p(1, 3, 0.5), g(1, 3, 1.0);
  AdamState st;
  TrainConfig c;
  adamw_step({&p}, {&g}, st, c, 0.01);
  for (double v : p.data) EXPECT_NEAR(v, 0.5 - 0.01, 1e-9);
  EXPECT_EQ(st.step, 1u);
}

TEST(AdamW, Deterministic) {
  std::mt19937_64 rng(9);
  const Mat g1 = random_normal(3, 3, 1.0, rng), g2 = random_normal(3, 3, 1.0, rng);
  auto run = [&] {
    Mat p(3, 3, 1.0), g = g1;
    AdamState st;
    TrainConfig c;
    c.weight_decay = 0.01;
    adamw_step({&p}, {&g}, st, c, 0.01);
    g = g2;
    adamw_step({&p}, {&g}, st, c, 0.01);
    return p;
  };
  EXPECT_EQ(run().data, run().data);
}

TEST(AdamW, ShapeMismatch) {
  Mat p(2, 2), g(2, 3);
  AdamState st;
  EXPECT_THROW(adamw_step({&p}, {&g}, st, TrainConfig{}, 0.1), DimensionError);
}

TEST(Schedule, ClipAndRates) {
  Mat g = Mat::from_rows({{6.0, 8.0}});
  TrainConfig c;
  c.clip_norm = 1.0;
  const auto r = clip_and_schedule({&g}, 0, c);
  EXPECT_DOUBLE_EQ(r.norm, 10.0);
  EXPECT_NEAR(g(0, 0), 0.6, 1e-15);
  EXPECT_NEAR(g(0, 1), 0.8, 1e-15);

  c.lr = 0.1;
  c.warmup = 10;
  c.total_steps = 110;
  c.schedule = Schedule::linear_warmup;
  EXPECT_EQ(learning_rate(c, 0), 0.0);
  EXPECT_NEAR(learning_rate(c, 5), 0.05, 1e-15);
  EXPECT_NEAR(learning_rate(c, 10), 0.1, 1e-15);
  EXPECT_NEAR(learning_rate(c, 110), 0.1 * 0.001, 1e-15);
  c.schedule = Schedule::cosine_warmup;
  EXPECT_NEAR(learning_rate(c, 60), 0.5 * (0.1 + 0.0001), 1e-15);
  EXPECT_NEAR(learning_rate(c, 110), 0.1 * 0.001, 1e-15);
  EXPECT_EQ(parse_schedule("cosine"), Schedule::cosine_warmup);
  EXPECT_THROW(parse_schedule("step"), std::invalid_argument);
}

TEST(CrossEntropy, GradientMatchesFiniteDifferences) {
  std::mt19937_64 rng(10);
  Mat z = random_normal(3, 5, 1.0, rng);
  const std::vector<int> tg{4, 1, 0}, mask{1, 1, 0};
  Mat dz;
  cross_entropy_masked(z, tg, mask, &dz);
  for (std::size_t i = 0; i < z.size(); ++i) {
    const double o = z.data[i];
    z.data[i] = o + 1e-5;
    const double lp = cross_entropy_masked(z, tg, mask);
    z.data[i] = o - 1e-5;
    const double lm = cross_entropy_masked(z, tg, mask);
    z.data[i] = o;
    EXPECT_NEAR(dz.data[i], (lp - lm) / 2e-5, 1e-8);
  }
  EXPECT_NEAR(cross_entropy_masked(Mat(2, 7), std::vector<int>{1, 2}, std::vector<int>{1, 1}), std::log(7.0), 1e-14);
}
