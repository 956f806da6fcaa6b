#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "fprnn/numerics.hpp"

using namespace fprnn;

namespace {

// Cyclic Jacobi rotations; returns the eigenvalues of a symmetric matrix.
Vec jacobi_eigenvalues(Mat a) {
  const std::size_t n = a.rows;
  for (int sweep = 0; sweep < 100; ++sweep) {
    double off = 0.0;
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = i + 1; j < n; ++j) off += a(i, j) * a(i, j);
    if (off < 1e-30) break;
    for (std::size_t p = 0; p < n; ++p)
      for (std::size_t q = p + 1; q < n; ++q) {
        if (std::abs(a(p, q)) < 1e-300) continue;
        const double theta = (a(q, q) - a(p, p)) / (2.0 * a(p, q));
        const double t = (theta >= 0 ? 1.0 : -1.0) / (std::abs(theta) + std::sqrt(theta * theta + 1.0));
        const double c = 1.0 / std::sqrt(t * t + 1.0), s = t * c;
        for (std::size_t k = 0; k < n; ++k) {
          const double akp = a(k, p), akq = a(k, q);
          a(k, p) = c * akp - s * akq;
          a(k, q) = s * akp + c * akq;
        }
        for (std::size_t k = 0; k < n; ++k) {
          const double apk = a(p, k), aqk = a(q, k);
          a(p, k) = c * apk - s * aqk;
          a(q, k) = s * apk + c * aqk;
        }
      }
  }
  Vec ev(n);
  for (std::size_t i = 0; i < n; ++i) ev[i] = a(i, i);
  return ev;
}

}  // namespace

TEST(SpectralNorm, IdentityIsOne) { EXPECT_NEAR(spectral_norm(Mat::identity(3)), 1.0, 1e-12); }

TEST(SpectralNorm, Diagonal) {
  const Vec d{2.0, 1.0};
  EXPECT_NEAR(spectral_norm(Mat::diagonal(d)), 2.0, 1e-10);
}

TEST(SpectralNorm, SymmetricMatchesJacobi) {
  std::mt19937_64 rng(7);
  for (int trial = 0; trial < 5; ++trial) {
    Mat r = random_normal(4, 4, 1.0, rng);
    Mat s = scale(add(r, transpose(r)), 0.5);
    const Vec ev = jacobi_eigenvalues(s);
    double expect = 0.0;
    for (double e : ev) expect = std::max(expect, std::abs(e));
    EXPECT_NEAR(spectral_norm(s, 500), expect, 1e-8);
  }
}

TEST(SpectralNorm, BoundedByFrobeniusAndMonotone) {
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 20; ++trial) {
    Mat m = random_normal(5, 3, 1.0, rng);
    const double s50 = spectral_norm(m, 50);
    EXPECT_LE(s50, frobenius_norm(m) + 1e-12);
    EXPECT_LE(spectral_norm(m, 5), s50 + 1e-12);
  }
}

TEST(SpectralNorm, RejectsNonFinite) {
  Mat m = Mat::identity(2);
  m(0, 1) = std::nan("");
  EXPECT_THROW(spectral_norm(m), NumericError);
  EXPECT_THROW(spectral_norm(Mat::identity(2), 0), std::invalid_argument);
}

TEST(L2Normalize, Examples) {
  const Vec v{3.0, 4.0};
  const Vec n = l2_normalize(v, 1e-8);
  EXPECT_DOUBLE_EQ(n[0], 0.6);
  EXPECT_DOUBLE_EQ(n[1], 0.8);
  const Vec z = l2_normalize(Vec(4, 0.0), 1e-8);
  for (double x : z) EXPECT_EQ(x, 0.0);
}

TEST(L2Normalize, UnitNormAndIdempotent) {
  std::mt19937_64 rng(11);
  for (int trial = 0; trial < 50; ++trial) {
    const Vec v = random_normal(1, 8, 1.0, rng).to_vec();
    const Vec n = l2_normalize(v);
    EXPECT_NEAR(norm2(n), 1.0, 1e-12);
    const Vec nn = l2_normalize(n);
    for (std::size_t i = 0; i < n.size(); ++i) EXPECT_NEAR(nn[i], n[i], 1e-15);
  }
}

TEST(Activations, ClosedForms) {
  EXPECT_NEAR(softplus(0.0), std::log(2.0), 1e-15);
  EXPECT_EQ(sigmoid(0.0), 0.5);
  EXPECT_EQ(silu(0.0), 0.0);
  EXPECT_NEAR(softplus(50.0), 50.0, 1e-12);
  const Vec v{-1.0, 0.0, 2.0};
  const Vec s = activations(Activation::sigmoid, v);
  EXPECT_NEAR(s[0], 1.0 / (1.0 + std::exp(1.0)), 1e-15);
}

TEST(Activations, FiniteOnWideRange) {
  for (double z = -700.0; z <= 700.0; z += 0.5)
    for (auto k : {Activation::softplus, Activation::sigmoid, Activation::silu}) {
      EXPECT_TRUE(std::isfinite(activate(k, z)));
      EXPECT_TRUE(std::isfinite(activate_grad(k, z)));
    }
}

TEST(Activations, GradientsMatchFiniteDifferences) {
  for (auto k : {Activation::softplus, Activation::sigmoid, Activation::silu, Activation::exp})
    for (double z : {-3.0, -0.4, 0.0, 0.7, 2.5}) {
      const double fd = (activate(k, z + 1e-6) - activate(k, z - 1e-6)) / 2e-6;
      EXPECT_NEAR(activate_grad(k, z), fd, 1e-8 * std::max(1.0, std::abs(fd)));
    }
}

TEST(Linalg, LuSolvesAndDetectsSingular) {
  std::mt19937_64 rng(5);
  Mat a = random_normal(6, 6, 1.0, rng);
  const Vec x = random_normal(1, 6, 1.0, rng).to_vec();
  const Vec b = matvec(a, x);
  const Vec sol = LuDecomposition(a).solve(b);
  for (std::size_t i = 0; i < 6; ++i) EXPECT_NEAR(sol[i], x[i], 1e-10);
  const Vec bt = matvec_transposed(a, x);
  const Vec solt = LuDecomposition(a).solve_transposed(bt);
  for (std::size_t i = 0; i < 6; ++i) EXPECT_NEAR(solt[i], x[i], 1e-10);
  EXPECT_LT(max_abs_diff(matmul(a, inverse(a)), Mat::identity(6)), 1e-10);
  EXPECT_THROW(LuDecomposition(Mat(3, 3)), NumericError);
}

TEST(Linalg, KronMatchesDefinition) {
  const Mat a = Mat::from_rows({{1, 2}, {3, 4}});
  const Mat b = Mat::from_rows({{0, 5}, {6, 7}});
  const Mat k = kron(a, b);
  for (std::size_t i = 0; i < 2; ++i)
    for (std::size_t j = 0; j < 2; ++j)
      for (std::size_t p = 0; p < 2; ++p)
        for (std::size_t q = 0; q < 2; ++q) EXPECT_EQ(k(i * 2 + p, j * 2 + q), a(i, j) * b(p, q));
}

TEST(Linalg, TopEigenPsd) {
  std::mt19937_64 rng(9);
  Mat l = random_normal(4, 4, 1.0, rng);
  Mat k = matmul(l, transpose(l));
  const Vec ev = jacobi_eigenvalues(k);
  double mx = 0.0;
  for (double e : ev) mx = std::max(mx, e);
  const TopEigen te = top_eigen_psd({k.data.data(), k.size()}, 4, 2000);
  EXPECT_NEAR(te.value, mx, 1e-8 * mx);
  EXPECT_NEAR(norm2(te.vector), 1.0, 1e-12);
}

TEST(MemoryMeter, TracksLiveBytes) {
  const std::size_t before = MemoryMeter::live_bytes();
  {
    Mat m(100, 10);
    EXPECT_GE(MemoryMeter::live_bytes(), before + 100 * 10 * sizeof(double));
  }
  EXPECT_EQ(MemoryMeter::live_bytes(), before);
}
