#include <gtest/gtest.h>

#include <cmath>

#include "fprnn/autodiff.hpp"
#include "fprnn/gradcheck.hpp"

using namespace fprnn;

class PrimitiveGradient : public ::testing::TestWithParam<std::size_t> {};

TEST_P(PrimitiveGradient, MatchesCentralDifferences) {
  const auto cases = check::primitive_cases();
  const auto& c = cases.at(GetParam());
  const auto r = check::check_gradients(c.build, c.inputs);
  EXPECT_LT(r.max_rel_error, 1e-5) << c.name;
}

INSTANTIATE_TEST_SUITE_P(AllPrimitives, PrimitiveGradient,
                         ::testing::Range<std::size_t>(0, check::primitive_cases().size()),
                         [](const ::testing::TestParamInfo<std::size_t>& info) {
                           return check::primitive_cases().at(info.param).name;
                         });

TEST(Tape, ParamGradientsAccumulateIntoSink) {
  Mat w = Mat::from_rows({{1.0, 2.0}});
  Mat g(1, 2);
  ad::Tape t;
  ad::Var x = t.constant(Mat::from_rows({{3.0, 4.0}}));
  ad::Var a = t.param(w, &g);
  ad::Var b = t.param(w, &g);
  t.backward(ad::weighted_sum(ad::add(ad::mul(x, a), ad::mul(x, b)), Mat(1, 2, 1.0)));
  EXPECT_DOUBLE_EQ(g(0, 0), 6.0);
  EXPECT_DOUBLE_EQ(g(0, 1), 8.0);
}

TEST(Tape, ZeroUpstreamGivesZeroGradients) {
  Mat w = Mat::from_rows({{0.5, -1.0}, {2.0, 0.3}});
  Mat g(2, 2);
  ad::Tape t;
  ad::Var x = t.input(Mat::from_rows({{1.0, 2.0}}));
  ad::Var y = ad::silu(ad::linear(x, t.param(w, &g)));
  t.backward(y, Mat(1, 2));
  EXPECT_EQ(max_abs(g), 0.0);
  EXPECT_EQ(max_abs(t.grad(x)), 0.0);
}

TEST(Tape, NonRecordingTapeKeepsNoClosures) {
  Mat w = Mat::identity(2);
  Mat g(2, 2);
  ad::Tape t(false);
  ad::Var y = ad::linear(t.input(Mat(1, 2, 1.0)), t.param(w, &g));
  EXPECT_FALSE(t.needs_grad(y));
  EXPECT_THROW(t.backward(y, Mat(1, 2, 1.0)), std::logic_error);
}

TEST(Tape, CrossEntropyExamples) {
  const std::vector<int> targets{0, 3};
  const std::vector<int> mask{1, 1};
  ad::Tape t(false);
  EXPECT_NEAR(ad::cross_entropy_masked(t.constant(Mat(2, 5)), targets, mask).value()(0, 0), std::log(5.0), 1e-14);
  Mat confident(2, 5);
  confident(0, 0) = 60.0;
  confident(1, 3) = 60.0;
  EXPECT_LT(ad::cross_entropy_masked(t.constant(confident), targets, mask).value()(0, 0), 1e-20);
  const std::vector<int> none{0, 0};
  EXPECT_THROW(ad::cross_entropy_masked(t.constant(Mat(2, 5)), targets, none), DimensionError);
}

TEST(Tape, ShapeErrors) {
  ad::Tape t;
  EXPECT_THROW(ad::linear(t.constant(Mat(2, 3)), t.constant(Mat(2, 2))), DimensionError);
  EXPECT_THROW(ad::diag_scan(t.constant(Mat(5, 2)), t.constant(Mat(5, 2)), 2), DimensionError);
  EXPECT_THROW(ad::tril_gram(t.constant(Mat(1, 5)), 3), DimensionError);
}
