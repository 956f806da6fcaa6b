#pragma once

// Dense row-major matrices, small linear algebra and activation kernels.

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <limits>
#include <memory>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace fprnn {

class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Live/peak byte accounting for every Mat buffer. Used to verify that
// training memory does not grow with the number of fixed-point iterations.
class MemoryMeter {
 public:
  static void add(std::size_t bytes) noexcept {
    auto now = live().fetch_add(bytes, std::memory_order_relaxed) + bytes;
    auto prev = peak().load(std::memory_order_relaxed);
    while (now > prev && !peak().compare_exchange_weak(prev, now, std::memory_order_relaxed)) {
    }
  }
  static void sub(std::size_t bytes) noexcept { live().fetch_sub(bytes, std::memory_order_relaxed); }
  static std::size_t live_bytes() noexcept { return live().load(std::memory_order_relaxed); }
  static std::size_t peak_bytes() noexcept { return peak().load(std::memory_order_relaxed); }
  static void reset_peak() noexcept { peak().store(live_bytes(), std::memory_order_relaxed); }

 private:
  static std::atomic<std::size_t>& live() noexcept {
    static std::atomic<std::size_t> v{0};
    return v;
  }
  static std::atomic<std::size_t>& peak() noexcept {
    static std::atomic<std::size_t> v{0};
    return v;
  }
};

template <typename T>
struct MeteredAllocator {
  using value_type = T;
  MeteredAllocator() = default;
  template <typename U>
  MeteredAllocator(const MeteredAllocator<U>&) noexcept {}
  T* allocate(std::size_t n) {
    MemoryMeter::add(n * sizeof(T));
    return std::allocator<T>{}.allocate(n);
  }
  void deallocate(T* p, std::size_t n) noexcept {
    MemoryMeter::sub(n * sizeof(T));
    std::allocator<T>{}.deallocate(p, n);
  }
  friend bool operator==(const MeteredAllocator&, const MeteredAllocator&) { return true; }
};

using Vec = std::vector<double>;

struct Mat {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double, MeteredAllocator<double>> data;

  Mat() = default;
  Mat(std::size_t r, std::size_t c, double fill = 0.0) : rows(r), cols(c), data(r * c, fill) {}

  static Mat identity(std::size_t n) {
    Mat m(n, n);
    for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
    return m;
  }
  static Mat from_rows(std::initializer_list<std::initializer_list<double>> rows_init) {
    Mat m(rows_init.size(), rows_init.size() ? rows_init.begin()->size() : 0);
    std::size_t r = 0;
    for (const auto& row : rows_init) {
      if (row.size() != m.cols) throw DimensionError("Mat::from_rows: ragged rows");
      std::copy(row.begin(), row.end(), m.data.begin() + static_cast<std::ptrdiff_t>(r * m.cols));
      ++r;
    }
    return m;
  }
  static Mat column(std::span<const double> v) {
    Mat m(v.size(), 1);
    std::copy(v.begin(), v.end(), m.data.begin());
    return m;
  }
  static Mat row_vector(std::span<const double> v) {
    Mat m(1, v.size());
    std::copy(v.begin(), v.end(), m.data.begin());
    return m;
  }
  static Mat diagonal(std::span<const double> v) {
    Mat m(v.size(), v.size());
    for (std::size_t i = 0; i < v.size(); ++i) m(i, i) = v[i];
    return m;
  }

  double& operator()(std::size_t r, std::size_t c) { return data[r * cols + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data[r * cols + c]; }

  std::span<double> row(std::size_t r) { return {data.data() + r * cols, cols}; }
  std::span<const double> row(std::size_t r) const { return {data.data() + r * cols, cols}; }

  std::size_t size() const { return data.size(); }
  bool same_shape(const Mat& o) const { return rows == o.rows && cols == o.cols; }
  Vec to_vec() const { return Vec(data.begin(), data.end()); }
};

inline std::string shape_str(const Mat& m) {
  return std::to_string(m.rows) + "x" + std::to_string(m.cols);
}

inline void require_same_shape(const Mat& a, const Mat& b, const char* what) {
  if (!a.same_shape(b))
    throw DimensionError(std::string(what) + ": shape mismatch " + shape_str(a) + " vs " + shape_str(b));
}

inline bool all_finite(std::span<const double> v) {
  return std::all_of(v.begin(), v.end(), [](double x) { return std::isfinite(x); });
}
inline bool all_finite(const Mat& m) { return all_finite(std::span<const double>(m.data.data(), m.size())); }

// ---------------------------------------------------------------------------
// Vector helpers

inline double dot(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw DimensionError("dot: length mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

inline double norm2(std::span<const double> v) { return std::sqrt(dot(v, v)); }

inline double norm_inf(std::span<const double> v) {
  double m = 0.0;
  for (double x : v) m = std::max(m, std::abs(x));
  return m;
}

/// v / max(||v||_2, eps).
inline Vec l2_normalize(std::span<const double> v, double eps = 1e-12) {
  const double denom = std::max(norm2(v), eps);
  Vec out(v.begin(), v.end());
  for (double& x : out) x /= denom;
  return out;
}

// ---------------------------------------------------------------------------
// Activations. softplus uses the identity branch above 30.

inline double softplus(double z) {
  if (z > 30.0) return z;
  if (z < -30.0) return std::exp(z);
  return std::log1p(std::exp(z));
}
inline double sigmoid(double z) {
  if (z >= 0.0) return 1.0 / (1.0 + std::exp(-z));
  const double e = std::exp(z);
  return e / (1.0 + e);
}
inline double silu(double z) { return z * sigmoid(z); }

enum class Activation { softplus, sigmoid, silu, exp };

inline double activate(Activation kind, double z) {
  switch (kind) {
    case Activation::softplus: return softplus(z);
    case Activation::sigmoid: return sigmoid(z);
    case Activation::silu: return silu(z);
    case Activation::exp: return std::exp(z);
  }
  return z;
}

/// Derivative of the activation at z.
inline double activate_grad(Activation kind, double z) {
  switch (kind) {
    case Activation::softplus: return sigmoid(z);
    case Activation::sigmoid: {
      const double s = sigmoid(z);
      return s * (1.0 - s);
    }
    case Activation::silu: {
      const double s = sigmoid(z);
      return s * (1.0 + z * (1.0 - s));
    }
    case Activation::exp: return std::exp(z);
  }
  return 1.0;
}

inline Vec activations(Activation kind, std::span<const double> v) {
  Vec out(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) out[i] = activate(kind, v[i]);
  return out;
}

// ---------------------------------------------------------------------------
// Matrix helpers

inline Mat transpose(const Mat& a) {
  Mat t(a.cols, a.rows);
  for (std::size_t i = 0; i < a.rows; ++i)
    for (std::size_t j = 0; j < a.cols; ++j) t(j, i) = a(i, j);
  return t;
}

inline Mat matmul(const Mat& a, const Mat& b) {
  if (a.cols != b.rows) throw DimensionError("matmul: " + shape_str(a) + " * " + shape_str(b));
  Mat c(a.rows, b.cols);
  for (std::size_t i = 0; i < a.rows; ++i) {
    double* crow = c.data.data() + i * c.cols;
    for (std::size_t k = 0; k < a.cols; ++k) {
      const double aik = a(i, k);
      if (aik == 0.0) continue;
      const double* brow = b.data.data() + k * b.cols;
      for (std::size_t j = 0; j < b.cols; ++j) crow[j] += aik * brow[j];
    }
  }
  return c;
}

inline Vec matvec(const Mat& a, std::span<const double> x) {
  if (a.cols != x.size()) throw DimensionError("matvec: " + shape_str(a) + " * vec(" + std::to_string(x.size()) + ")");
  Vec y(a.rows, 0.0);
  for (std::size_t i = 0; i < a.rows; ++i) {
    const double* arow = a.data.data() + i * a.cols;
    double s = 0.0;
    for (std::size_t j = 0; j < a.cols; ++j) s += arow[j] * x[j];
    y[i] = s;
  }
  return y;
}

inline Vec matvec_transposed(const Mat& a, std::span<const double> x) {
  if (a.rows != x.size()) throw DimensionError("matvec_transposed: shape mismatch");
  Vec y(a.cols, 0.0);
  for (std::size_t i = 0; i < a.rows; ++i) {
    const double* arow = a.data.data() + i * a.cols;
    for (std::size_t j = 0; j < a.cols; ++j) y[j] += arow[j] * x[i];
  }
  return y;
}

inline Mat add(const Mat& a, const Mat& b) {
  require_same_shape(a, b, "add");
  Mat c = a;
  for (std::size_t i = 0; i < c.size(); ++i) c.data[i] += b.data[i];
  return c;
}

inline Mat sub(const Mat& a, const Mat& b) {
  require_same_shape(a, b, "sub");
  Mat c = a;
  for (std::size_t i = 0; i < c.size(); ++i) c.data[i] -= b.data[i];
  return c;
}

inline Mat scale(const Mat& a, double s) {
  Mat c = a;
  for (double& x : c.data) x *= s;
  return c;
}

inline double frobenius_norm(const Mat& a) { return norm2({a.data.data(), a.size()}); }
inline double max_abs(const Mat& a) { return norm_inf({a.data.data(), a.size()}); }

inline double max_abs_diff(const Mat& a, const Mat& b) {
  require_same_shape(a, b, "max_abs_diff");
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a.data[i] - b.data[i]));
  return m;
}

// Kronecker product with row-major index convention: (A (x) B)[(i,j),(k,l)] = A[i,k] B[j,l].
inline Mat kron(const Mat& a, const Mat& b) {
  Mat k(a.rows * b.rows, a.cols * b.cols);
  for (std::size_t i = 0; i < a.rows; ++i)
    for (std::size_t kk = 0; kk < a.cols; ++kk)
      for (std::size_t j = 0; j < b.rows; ++j)
        for (std::size_t l = 0; l < b.cols; ++l) k(i * b.rows + j, kk * b.cols + l) = a(i, kk) * b(j, l);
  return k;
}

// LU factorization with partial pivoting. Throws NumericError when singular.
class LuDecomposition {
 public:
  explicit LuDecomposition(Mat a, double singular_tol = 1e-13) : lu_(std::move(a)), perm_(lu_.rows) {
    if (lu_.rows != lu_.cols) throw DimensionError("LU: matrix must be square");
    const std::size_t n = lu_.rows;
    for (std::size_t i = 0; i < n; ++i) perm_[i] = i;
    double scale_ref = 0.0;
    for (double x : lu_.data) scale_ref = std::max(scale_ref, std::abs(x));
    for (std::size_t k = 0; k < n; ++k) {
      std::size_t p = k;
      for (std::size_t i = k + 1; i < n; ++i)
        if (std::abs(lu_(i, k)) > std::abs(lu_(p, k))) p = i;
      if (std::abs(lu_(p, k)) <= singular_tol * std::max(scale_ref, 1.0))
        throw NumericError("LU: matrix is singular to working precision");
      if (p != k) {
        for (std::size_t j = 0; j < n; ++j) std::swap(lu_(k, j), lu_(p, j));
        std::swap(perm_[k], perm_[p]);
      }
      for (std::size_t i = k + 1; i < n; ++i) {
        const double f = lu_(i, k) / lu_(k, k);
        lu_(i, k) = f;
        for (std::size_t j = k + 1; j < n; ++j) lu_(i, j) -= f * lu_(k, j);
      }
    }
  }

  Vec solve(std::span<const double> b) const {
    const std::size_t n = lu_.rows;
    if (b.size() != n) throw DimensionError("LU solve: rhs length mismatch");
    Vec x(n);
    for (std::size_t i = 0; i < n; ++i) x[i] = b[perm_[i]];
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < i; ++j) x[i] -= lu_(i, j) * x[j];
    for (std::size_t i = n; i-- > 0;) {
      for (std::size_t j = i + 1; j < n; ++j) x[i] -= lu_(i, j) * x[j];
      x[i] /= lu_(i, i);
    }
    return x;
  }

  // Solves x^T A = b^T, i.e. A^T x = b.
  Vec solve_transposed(std::span<const double> b) const {
    const std::size_t n = lu_.rows;
    if (b.size() != n) throw DimensionError("LU solve_transposed: rhs length mismatch");
    // A = P^T L U  =>  A^T = U^T L^T P
    Vec z(b.begin(), b.end());
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j < i; ++j) z[i] -= lu_(j, i) * z[j];
      z[i] /= lu_(i, i);
    }
    for (std::size_t i = n; i-- > 0;)
      for (std::size_t j = i + 1; j < n; ++j) z[i] -= lu_(j, i) * z[j];
    Vec x(n);
    for (std::size_t i = 0; i < n; ++i) x[perm_[i]] = z[i];
    return x;
  }

  Mat inverse() const {
    const std::size_t n = lu_.rows;
    Mat inv(n, n);
    Vec e(n, 0.0);
    for (std::size_t j = 0; j < n; ++j) {
      std::fill(e.begin(), e.end(), 0.0);
      e[j] = 1.0;
      const Vec col = solve(e);
      for (std::size_t i = 0; i < n; ++i) inv(i, j) = col[i];
    }
    return inv;
  }

 private:
  Mat lu_;
  std::vector<std::size_t> perm_;
};

inline Mat inverse(const Mat& a) { return LuDecomposition(a).inverse(); }

// ---------------------------------------------------------------------------
// Spectral norm by power iteration on M^T M from a seeded start vector.
// The estimate ||M v_k|| is nondecreasing in the iteration count.

inline double spectral_norm(const Mat& m, std::size_t iters = 50, std::uint64_t seed = 0) {
  if (iters == 0) throw std::invalid_argument("spectral_norm: iters must be >= 1");
  if (!all_finite(m)) throw NumericError("spectral_norm: non-finite entries");
  if (m.size() == 0) return 0.0;
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  Vec v(m.cols);
  for (double& x : v) x = normal(rng);
  v = l2_normalize(v);
  for (std::size_t it = 0; it < iters; ++it) {
    const Vec w = matvec_transposed(m, matvec(m, v));
    const double n = norm2(w);
    if (n == 0.0) return 0.0;
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = w[i] / n;
  }
  return norm2(matvec(m, v));
}

// Largest eigenpair of a symmetric positive semi-definite s x s matrix stored
// row-major in `k`, by power iteration with Rayleigh-quotient estimate.
struct TopEigen {
  double value = 0.0;
  Vec vector;
};

inline TopEigen top_eigen_psd(std::span<const double> k, std::size_t s, std::size_t iters = 50) {
  TopEigen out;
  out.vector.assign(s, 0.0);
  // Fixed, deterministic, non-symmetric start so that no coordinate axis is
  // orthogonal to it.
  for (std::size_t i = 0; i < s; ++i) out.vector[i] = 1.0 + 0.37 * static_cast<double>((i * 7 + 3) % 11) / 11.0;
  out.vector = l2_normalize(out.vector);
  Vec w(s);
  for (std::size_t it = 0; it < iters; ++it) {
    for (std::size_t i = 0; i < s; ++i) {
      double acc = 0.0;
      for (std::size_t j = 0; j < s; ++j) acc += k[i * s + j] * out.vector[j];
      w[i] = acc;
    }
    const double n = norm2(w);
    if (n == 0.0) {
      out.value = 0.0;
      return out;
    }
    for (std::size_t i = 0; i < s; ++i) out.vector[i] = w[i] / n;
  }
  double rq = 0.0;
  for (std::size_t i = 0; i < s; ++i)
    for (std::size_t j = 0; j < s; ++j) rq += out.vector[i] * k[i * s + j] * out.vector[j];
  out.value = rq;
  return out;
}

// ---------------------------------------------------------------------------
// Seeded random fills.

inline Mat random_normal(std::size_t r, std::size_t c, double stddev, std::mt19937_64& rng) {
  std::normal_distribution<double> normal(0.0, stddev);
  Mat m(r, c);
  for (double& x : m.data) x = normal(rng);
  return m;
}

inline Mat random_uniform(std::size_t r, std::size_t c, double lo, double hi, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> uni(lo, hi);
  Mat m(r, c);
  for (double& x : m.data) x = uni(rng);
  return m;
}

inline Vec random_unit_vector(std::size_t n, std::mt19937_64& rng) {
  std::normal_distribution<double> normal(0.0, 1.0);
  Vec v(n);
  for (double& x : v) x = normal(rng);
  return l2_normalize(v);
}

}  // namespace fprnn
