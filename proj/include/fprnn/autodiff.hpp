#pragma once

// Reverse-mode differentiation over row-batched matrices.
//
// Every node holds an N x c matrix where rows are tokens (sequences of
// `seq_len` consecutive rows) and columns are channels. Ops record a closure
// that accumulates input gradients; Tape::backward replays them in reverse
// order. A tape built with record=false only evaluates values.

#include <cmath>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "fprnn/numerics.hpp"

namespace fprnn::ad {

class Tape;

struct Var {
  Tape* tape = nullptr;
  std::size_t id = 0;

  const Mat& value() const;
  std::size_t rows() const { return value().rows; }
  std::size_t cols() const { return value().cols; }
};

class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, std::size_t)>;

  explicit Tape(bool record = true) : record_(record) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool recording() const { return record_; }

  Var constant(Mat v) { return push_leaf(std::move(v), nullptr, nullptr, false); }

  // Differentiable leaf; read its gradient with grad() after backward().
  Var input(Mat v) { return push_leaf(std::move(v), nullptr, nullptr, record_); }

  // Leaf backed by external parameter storage. Gradients are added into
  // `grad_sink` by backward(). The storage must outlive the tape.
  Var param(const Mat& value, Mat* grad_sink) {
    return push_leaf(Mat{}, &value, grad_sink, record_ && grad_sink != nullptr);
  }

  const Mat& value(std::size_t id) const {
    const Node& n = nodes_[id];
    return n.external ? *n.external : n.value;
  }
  const Mat& value(Var v) const { return value(v.id); }

  bool needs_grad(std::size_t id) const { return nodes_[id].needs_grad; }
  bool needs_grad(Var v) const { return needs_grad(v.id); }

  const Mat& grad(Var v) const { return nodes_[v.id].grad; }

  // Zero-initialized on first access.
  Mat& grad_ref(std::size_t id) {
    Node& n = nodes_[id];
    if (n.grad.size() == 0 && value(id).size() != 0) {
      const Mat& v = value(id);
      n.grad = Mat(v.rows, v.cols);
    }
    return n.grad;
  }

  Var push(Mat value, std::initializer_list<Var> inputs, BackwardFn fn) {
    bool ng = false;
    if (record_)
      for (const Var& in : inputs) ng = ng || nodes_[in.id].needs_grad;
    Node n;
    n.value = std::move(value);
    n.needs_grad = ng;
    if (ng) n.backward = std::move(fn);
    nodes_.push_back(std::move(n));
    return Var{this, nodes_.size() - 1};
  }

  void backward(Var out, const Mat& upstream) {
    if (!record_) throw std::logic_error("Tape::backward on a non-recording tape");
    require_same_shape(value(out), upstream, "Tape::backward upstream");
    Mat& g = grad_ref(out.id);
    for (std::size_t i = 0; i < g.size(); ++i) g.data[i] += upstream.data[i];
    for (std::size_t id = out.id + 1; id-- > 0;) {
      Node& n = nodes_[id];
      if (!n.needs_grad || n.grad.size() == 0) continue;
      if (n.backward) n.backward(*this, id);
    }
    for (Node& n : nodes_) {
      if (n.grad_sink && n.grad.size() != 0) {
        require_same_shape(*n.grad_sink, n.grad, "Tape::backward grad sink");
        for (std::size_t i = 0; i < n.grad.size(); ++i) n.grad_sink->data[i] += n.grad.data[i];
      }
    }
  }

  void backward(Var scalar_out) {
    if (value(scalar_out).size() != 1) throw DimensionError("Tape::backward: output is not a scalar");
    backward(scalar_out, Mat(1, 1, 1.0));
  }

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Mat value;
    const Mat* external = nullptr;
    Mat* grad_sink = nullptr;
    Mat grad;
    BackwardFn backward;
    bool needs_grad = false;
  };

  Var push_leaf(Mat v, const Mat* external, Mat* sink, bool ng) {
    Node n;
    n.value = std::move(v);
    n.external = external;
    n.grad_sink = sink;
    n.needs_grad = ng;
    nodes_.push_back(std::move(n));
    return Var{this, nodes_.size() - 1};
  }

  std::vector<Node> nodes_;
  bool record_;
};

inline const Mat& Var::value() const { return tape->value(id); }

namespace detail {
inline void check_tape(Var a, Var b) {
  if (a.tape != b.tape) throw std::logic_error("autodiff: operands live on different tapes");
}
}  // namespace detail

// ---------------------------------------------------------------------------
// Linear algebra

/// x W^T for x: N x in, W: out x in.
inline Var linear(Var x, Var w) {
  detail::check_tape(x, w);
  const Mat& X = x.value();
  const Mat& W = w.value();
  if (X.cols != W.cols) throw DimensionError("linear: " + shape_str(X) + " with weight " + shape_str(W));
  Mat y(X.rows, W.rows);
  for (std::size_t n = 0; n < X.rows; ++n) {
    const double* xr = X.data.data() + n * X.cols;
    double* yr = y.data.data() + n * y.cols;
    for (std::size_t o = 0; o < W.rows; ++o) {
      const double* wr = W.data.data() + o * W.cols;
      double s = 0.0;
      for (std::size_t i = 0; i < W.cols; ++i) s += xr[i] * wr[i];
      yr[o] = s;
    }
  }
  const std::size_t xi = x.id, wi = w.id;
  return x.tape->push(std::move(y), {x, w}, [xi, wi](Tape& t, std::size_t self) {
    const Mat& dy = t.grad_ref(self);
    const Mat& X = t.value(xi);
    const Mat& W = t.value(wi);
    if (t.needs_grad(xi)) {
      Mat& dx = t.grad_ref(xi);
      for (std::size_t n = 0; n < X.rows; ++n) {
        double* dxr = dx.data.data() + n * X.cols;
        for (std::size_t o = 0; o < W.rows; ++o) {
          const double g = dy(n, o);
          if (g == 0.0) continue;
          const double* wr = W.data.data() + o * W.cols;
          for (std::size_t i = 0; i < W.cols; ++i) dxr[i] += g * wr[i];
        }
      }
    }
    if (t.needs_grad(wi)) {
      Mat& dw = t.grad_ref(wi);
      for (std::size_t n = 0; n < X.rows; ++n) {
        const double* xr = X.data.data() + n * X.cols;
        for (std::size_t o = 0; o < W.rows; ++o) {
          const double g = dy(n, o);
          if (g == 0.0) continue;
          double* dwr = dw.data.data() + o * W.cols;
          for (std::size_t i = 0; i < W.cols; ++i) dwr[i] += g * xr[i];
        }
      }
    }
  });
}

/// x + b broadcast over rows, b: 1 x c.
inline Var add_row(Var x, Var b) {
  detail::check_tape(x, b);
  const Mat& X = x.value();
  const Mat& B = b.value();
  if (B.rows != 1 || B.cols != X.cols) throw DimensionError("add_row: " + shape_str(X) + " + " + shape_str(B));
  Mat y = X;
  for (std::size_t n = 0; n < X.rows; ++n)
    for (std::size_t j = 0; j < X.cols; ++j) y(n, j) += B(0, j);
  const std::size_t xi = x.id, bi = b.id;
  return x.tape->push(std::move(y), {x, b}, [xi, bi](Tape& t, std::size_t self) {
    const Mat& dy = t.grad_ref(self);
    if (t.needs_grad(xi)) {
      Mat& dx = t.grad_ref(xi);
      for (std::size_t i = 0; i < dy.size(); ++i) dx.data[i] += dy.data[i];
    }
    if (t.needs_grad(bi)) {
      Mat& db = t.grad_ref(bi);
      for (std::size_t n = 0; n < dy.rows; ++n)
        for (std::size_t j = 0; j < dy.cols; ++j) db(0, j) += dy(n, j);
    }
  });
}

/// x * r broadcast over rows, r: 1 x c.
inline Var mul_row(Var x, Var r) {
  detail::check_tape(x, r);
  const Mat& X = x.value();
  const Mat& R = r.value();
  if (R.rows != 1 || R.cols != X.cols) throw DimensionError("mul_row: " + shape_str(X) + " * " + shape_str(R));
  Mat y = X;
  for (std::size_t n = 0; n < X.rows; ++n)
    for (std::size_t j = 0; j < X.cols; ++j) y(n, j) *= R(0, j);
  const std::size_t xi = x.id, ri = r.id;
  return x.tape->push(std::move(y), {x, r}, [xi, ri](Tape& t, std::size_t self) {
    const Mat& dy = t.grad_ref(self);
    const Mat& X = t.value(xi);
    const Mat& R = t.value(ri);
    if (t.needs_grad(xi)) {
      Mat& dx = t.grad_ref(xi);
      for (std::size_t n = 0; n < X.rows; ++n)
        for (std::size_t j = 0; j < X.cols; ++j) dx(n, j) += dy(n, j) * R(0, j);
    }
    if (t.needs_grad(ri)) {
      Mat& dr = t.grad_ref(ri);
      for (std::size_t n = 0; n < X.rows; ++n)
        for (std::size_t j = 0; j < X.cols; ++j) dr(0, j) += dy(n, j) * X(n, j);
    }
  });
}

/// x * s broadcast over columns, s: N x 1.
inline Var mul_col(Var x, Var s) {
  detail::check_tape(x, s);
  const Mat& X = x.value();
  const Mat& S = s.value();
  if (S.cols != 1 || S.rows != X.rows) throw DimensionError("mul_col: " + shape_str(X) + " * " + shape_str(S));
  Mat y = X;
  for (std::size_t n = 0; n < X.rows; ++n)
    for (std::size_t j = 0; j < X.cols; ++j) y(n, j) *= S(n, 0);
  const std::size_t xi = x.id, si = s.id;
  return x.tape->push(std::move(y), {x, s}, [xi, si](Tape& t, std::size_t self) {
    const Mat& dy = t.grad_ref(self);
    const Mat& X = t.value(xi);
    const Mat& S = t.value(si);
    if (t.needs_grad(xi)) {
      Mat& dx = t.grad_ref(xi);
      for (std::size_t n = 0; n < X.rows; ++n)
        for (std::size_t j = 0; j < X.cols; ++j) dx(n, j) += dy(n, j) * S(n, 0);
    }
    if (t.needs_grad(si)) {
      Mat& ds = t.grad_ref(si);
      for (std::size_t n = 0; n < X.rows; ++n) {
        double acc = 0.0;
        for (std::size_t j = 0; j < X.cols; ++j) acc += dy(n, j) * X(n, j);
        ds(n, 0) += acc;
      }
    }
  });
}

/// wa * a + wb * b with constant weights.
inline Var combine(Var a, double wa, Var b, double wb) {
  detail::check_tape(a, b);
  const Mat& A = a.value();
  const Mat& B = b.value();
  require_same_shape(A, B, "combine");
  Mat y(A.rows, A.cols);
  for (std::size_t i = 0; i < y.size(); ++i) y.data[i] = wa * A.data[i] + wb * B.data[i];
  const std::size_t ai = a.id, bi = b.id;
  return a.tape->push(std::move(y), {a, b}, [ai, bi, wa, wb](Tape& t, std::size_t self) {
    const Mat& dy = t.grad_ref(self);
    if (t.needs_grad(ai)) {
      Mat& da = t.grad_ref(ai);
      for (std::size_t i = 0; i < dy.size(); ++i) da.data[i] += wa * dy.data[i];
    }
    if (t.needs_grad(bi)) {
      Mat& db = t.grad_ref(bi);
      for (std::size_t i = 0; i < dy.size(); ++i) db.data[i] += wb * dy.data[i];
    }
  });
}

inline Var add(Var a, Var b) { return combine(a, 1.0, b, 1.0); }
inline Var sub(Var a, Var b) { return combine(a, 1.0, b, -1.0); }

inline Var scale(Var a, double s) {
  Mat y = a.value();
  for (double& v : y.data) v *= s;
  const std::size_t ai = a.id;
  return a.tape->push(std::move(y), {a}, [ai, s](Tape& t, std::size_t self) {
    const Mat& dy = t.grad_ref(self);
    Mat& da = t.grad_ref(ai);
    for (std::size_t i = 0; i < dy.size(); ++i) da.data[i] += s * dy.data[i];
  });
}

/// Elementwise product.
inline Var mul(Var a, Var b) {
  detail::check_tape(a, b);
  const Mat& A = a.value();
  const Mat& B = b.value();
  require_same_shape(A, B, "mul");
  Mat y(A.rows, A.cols);
  for (std::size_t i = 0; i < y.size(); ++i) y.data[i] = A.data[i] * B.data[i];
  const std::size_t ai = a.id, bi = b.id;
  return a.tape->push(std::move(y), {a, b}, [ai, bi](Tape& t, std::size_t self) {
    const Mat& dy = t.grad_ref(self);
    const Mat& A = t.value(ai);
    const Mat& B = t.value(bi);
    if (t.needs_grad(ai)) {
      Mat& da = t.grad_ref(ai);
      for (std::size_t i = 0; i < dy.size(); ++i) da.data[i] += dy.data[i] * B.data[i];
    }
    if (t.needs_grad(bi)) {
      Mat& db = t.grad_ref(bi);
      for (std::size_t i = 0; i < dy.size(); ++i) db.data[i] += dy.data[i] * A.data[i];
    }
  });
}

/// Row-wise inner product, N x 1.
inline Var row_dot(Var a, Var b) {
  detail::check_tape(a, b);
  const Mat& A = a.value();
  const Mat& B = b.value();
  require_same_shape(A, B, "row_dot");
  Mat y(A.rows, 1);
  for (std::size_t n = 0; n < A.rows; ++n) y(n, 0) = dot(A.row(n), B.row(n));
  const std::size_t ai = a.id, bi = b.id;
  return a.tape->push(std::move(y), {a, b}, [ai, bi](Tape& t, std::size_t self) {
    const Mat& dy = t.grad_ref(self);
    const Mat& A = t.value(ai);
    const Mat& B = t.value(bi);
    if (t.needs_grad(ai)) {
      Mat& da = t.grad_ref(ai);
      for (std::size_t n = 0; n < A.rows; ++n)
        for (std::size_t j = 0; j < A.cols; ++j) da(n, j) += dy(n, 0) * B(n, j);
    }
    if (t.needs_grad(bi)) {
      Mat& db = t.grad_ref(bi);
      for (std::size_t n = 0; n < A.rows; ++n)
        for (std::size_t j = 0; j < A.cols; ++j) db(n, j) += dy(n, 0) * A(n, j);
    }
  });
}

// ---------------------------------------------------------------------------
// Pointwise

inline Var activation(Var x, Activation kind) {
  Mat y = x.value();
  for (double& v : y.data) v = activate(kind, v);
  const std::size_t xi = x.id;
  return x.tape->push(std::move(y), {x}, [xi, kind](Tape& t, std::size_t self) {
    const Mat& dy = t.grad_ref(self);
    const Mat& X = t.value(xi);
    Mat& dx = t.grad_ref(xi);
    for (std::size_t i = 0; i < dy.size(); ++i) dx.data[i] += dy.data[i] * activate_grad(kind, X.data[i]);
  });
}

inline Var silu(Var x) { return activation(x, Activation::silu); }
inline Var sigmoid(Var x) { return activation(x, Activation::sigmoid); }
inline Var softplus(Var x) { return activation(x, Activation::softplus); }
inline Var exp(Var x) { return activation(x, Activation::exp); }
inline Var neg(Var x) { return scale(x, -1.0); }

/// 1 - x
inline Var one_minus(Var x) {
  Mat y = x.value();
  for (double& v : y.data) v = 1.0 - v;
  const std::size_t xi = x.id;
  return x.tape->push(std::move(y), {x}, [xi](Tape& t, std::size_t self) {
    const Mat& dy = t.grad_ref(self);
    Mat& dx = t.grad_ref(xi);
    for (std::size_t i = 0; i < dy.size(); ++i) dx.data[i] -= dy.data[i];
  });
}

/// Each row divided by max(||row||_2, eps).
inline Var row_normalize(Var x, double eps = 1e-12) {
  const Mat& X = x.value();
  Mat y = X;
  Mat norms(X.rows, 1);
  for (std::size_t n = 0; n < X.rows; ++n) {
    const double nn = norm2(X.row(n));
    norms(n, 0) = nn;
    const double d = std::max(nn, eps);
    for (double& v : y.row(n)) v /= d;
  }
  const std::size_t xi = x.id;
  return x.tape->push(std::move(y), {x}, [xi, eps, norms = std::move(norms)](Tape& t, std::size_t self) {
    const Mat& dy = t.grad_ref(self);
    const Mat& Y = t.value(self);
    Mat& dx = t.grad_ref(xi);
    for (std::size_t n = 0; n < Y.rows; ++n) {
      const double nn = norms(n, 0);
      if (nn > eps) {
        const double yd = dot(Y.row(n), dy.row(n));
        for (std::size_t j = 0; j < Y.cols; ++j) dx(n, j) += (dy(n, j) - Y(n, j) * yd) / nn;
      } else {
        for (std::size_t j = 0; j < Y.cols; ++j) dx(n, j) += dy(n, j) / eps;
      }
    }
  });
}

/// Same data, new shape (row-major order preserved).
inline Var reshape(Var x, std::size_t rows, std::size_t cols) {
  const Mat& X = x.value();
  if (rows * cols != X.size()) throw DimensionError("reshape: size mismatch");
  Mat y(rows, cols);
  std::copy(X.data.begin(), X.data.end(), y.data.begin());
  const std::size_t xi = x.id;
  return x.tape->push(std::move(y), {x}, [xi](Tape& t, std::size_t self) {
    const Mat& dy = t.grad_ref(self);
    Mat& dx = t.grad_ref(xi);
    for (std::size_t i = 0; i < dy.size(); ++i) dx.data[i] += dy.data[i];
  });
}

/// Column j as an N x 1 node.
inline Var col(Var x, std::size_t j) {
  const Mat& X = x.value();
  if (j >= X.cols) throw DimensionError("col: index out of range");
  Mat y(X.rows, 1);
  for (std::size_t n = 0; n < X.rows; ++n) y(n, 0) = X(n, j);
  const std::size_t xi = x.id;
  return x.tape->push(std::move(y), {x}, [xi, j](Tape& t, std::size_t self) {
    const Mat& dy = t.grad_ref(self);
    Mat& dx = t.grad_ref(xi);
    for (std::size_t n = 0; n < dy.rows; ++n) dx(n, j) += dy(n, 0);
  });
}

// ---------------------------------------------------------------------------
// Sequence structure

/// Shift rows by one step within each sequence of `seq_len` rows; the first
/// row of every sequence becomes zero.
inline Var shift_within(Var x, std::size_t seq_len) {
  const Mat& X = x.value();
  if (seq_len == 0 || X.rows % seq_len != 0) throw DimensionError("shift_within: rows not divisible by seq_len");
  Mat y(X.rows, X.cols);
  for (std::size_t n = 0; n < X.rows; ++n)
    if (n % seq_len != 0)
      for (std::size_t j = 0; j < X.cols; ++j) y(n, j) = X(n - 1, j);
  const std::size_t xi = x.id;
  return x.tape->push(std::move(y), {x}, [xi, seq_len](Tape& t, std::size_t self) {
    const Mat& dy = t.grad_ref(self);
    Mat& dx = t.grad_ref(xi);
    for (std::size_t n = 0; n < dy.rows; ++n)
      if (n % seq_len != 0)
        for (std::size_t j = 0; j < dy.cols; ++j) dx(n - 1, j) += dy(n, j);
  });
}

/// out[n, r*c + j] = x[n, j] for r < reps.
inline Var tile_cols(Var x, std::size_t reps) {
  const Mat& X = x.value();
  Mat y(X.rows, X.cols * reps);
  for (std::size_t n = 0; n < X.rows; ++n)
    for (std::size_t r = 0; r < reps; ++r)
      for (std::size_t j = 0; j < X.cols; ++j) y(n, r * X.cols + j) = X(n, j);
  const std::size_t xi = x.id;
  return x.tape->push(std::move(y), {x}, [xi, reps](Tape& t, std::size_t self) {
    const Mat& dy = t.grad_ref(self);
    Mat& dx = t.grad_ref(xi);
    const std::size_t c = dx.cols;
    for (std::size_t n = 0; n < dy.rows; ++n)
      for (std::size_t r = 0; r < reps; ++r)
        for (std::size_t j = 0; j < c; ++j) dx(n, j) += dy(n, r * c + j);
  });
}

/// Row-wise outer product: out[n, i*b + j] = a[n, i] * b[n, j].
inline Var outer_rows(Var a, Var b) {
  detail::check_tape(a, b);
  const Mat& A = a.value();
  const Mat& B = b.value();
  if (A.rows != B.rows) throw DimensionError("outer_rows: row mismatch");
  Mat y(A.rows, A.cols * B.cols);
  for (std::size_t n = 0; n < A.rows; ++n)
    for (std::size_t i = 0; i < A.cols; ++i)
      for (std::size_t j = 0; j < B.cols; ++j) y(n, i * B.cols + j) = A(n, i) * B(n, j);
  const std::size_t ai = a.id, bi = b.id;
  return a.tape->push(std::move(y), {a, b}, [ai, bi](Tape& t, std::size_t self) {
    const Mat& dy = t.grad_ref(self);
    const Mat& A = t.value(ai);
    const Mat& B = t.value(bi);
    if (t.needs_grad(ai)) {
      Mat& da = t.grad_ref(ai);
      for (std::size_t n = 0; n < A.rows; ++n)
        for (std::size_t i = 0; i < A.cols; ++i) {
          double acc = 0.0;
          for (std::size_t j = 0; j < B.cols; ++j) acc += dy(n, i * B.cols + j) * B(n, j);
          da(n, i) += acc;
        }
    }
    if (t.needs_grad(bi)) {
      Mat& db = t.grad_ref(bi);
      for (std::size_t n = 0; n < A.rows; ++n)
        for (std::size_t i = 0; i < A.cols; ++i) {
          const double ai_v = A(n, i);
          for (std::size_t j = 0; j < B.cols; ++j) db(n, j) += dy(n, i * B.cols + j) * ai_v;
        }
    }
  });
}

/// Row-wise contraction: y[n, j] = sum_i c[n, i] * h[n, i*b + j].
inline Var contract_rows(Var c, Var h) {
  detail::check_tape(c, h);
  const Mat& C = c.value();
  const Mat& H = h.value();
  if (C.rows != H.rows || C.cols == 0 || H.cols % C.cols != 0) throw DimensionError("contract_rows: shape mismatch");
  const std::size_t b = H.cols / C.cols;
  Mat y(C.rows, b);
  for (std::size_t n = 0; n < C.rows; ++n)
    for (std::size_t i = 0; i < C.cols; ++i) {
      const double ci = C(n, i);
      for (std::size_t j = 0; j < b; ++j) y(n, j) += ci * H(n, i * b + j);
    }
  const std::size_t ci_ = c.id, hi = h.id;
  return c.tape->push(std::move(y), {c, h}, [ci_, hi, b](Tape& t, std::size_t self) {
    const Mat& dy = t.grad_ref(self);
    const Mat& C = t.value(ci_);
    const Mat& H = t.value(hi);
    if (t.needs_grad(ci_)) {
      Mat& dc = t.grad_ref(ci_);
      for (std::size_t n = 0; n < C.rows; ++n)
        for (std::size_t i = 0; i < C.cols; ++i) {
          double acc = 0.0;
          for (std::size_t j = 0; j < b; ++j) acc += dy(n, j) * H(n, i * b + j);
          dc(n, i) += acc;
        }
    }
    if (t.needs_grad(hi)) {
      Mat& dh = t.grad_ref(hi);
      for (std::size_t n = 0; n < C.rows; ++n)
        for (std::size_t i = 0; i < C.cols; ++i)
          for (std::size_t j = 0; j < b; ++j) dh(n, i * b + j) += C(n, i) * dy(n, j);
    }
  });
}

/// Gated diagonal recurrence h_t = g_t * h_{t-1} + u_t per sequence of
/// `seq_len` rows, starting from h_0 = 0.
inline Var diag_scan(Var g, Var u, std::size_t seq_len) {
  detail::check_tape(g, u);
  const Mat& G = g.value();
  const Mat& U = u.value();
  require_same_shape(G, U, "diag_scan");
  if (seq_len == 0 || G.rows % seq_len != 0) throw DimensionError("diag_scan: rows not divisible by seq_len");
  Mat h(G.rows, G.cols);
  const std::size_t k = G.cols;
  for (std::size_t n = 0; n < G.rows; ++n) {
    double* hr = h.data.data() + n * k;
    const double* gr = G.data.data() + n * k;
    const double* ur = U.data.data() + n * k;
    if (n % seq_len == 0) {
      for (std::size_t j = 0; j < k; ++j) hr[j] = ur[j];
    } else {
      const double* hp = hr - k;
      for (std::size_t j = 0; j < k; ++j) hr[j] = gr[j] * hp[j] + ur[j];
    }
  }
  const std::size_t gi = g.id, ui = u.id;
  return g.tape->push(std::move(h), {g, u}, [gi, ui, seq_len](Tape& t, std::size_t self) {
    const Mat& dh = t.grad_ref(self);
    const Mat& G = t.value(gi);
    const Mat& H = t.value(self);
    const std::size_t k = G.cols;
    Vec carry(k, 0.0);
    const bool want_g = t.needs_grad(gi);
    const bool want_u = t.needs_grad(ui);
    Mat* dg = want_g ? &t.grad_ref(gi) : nullptr;
    Mat* du = want_u ? &t.grad_ref(ui) : nullptr;
    for (std::size_t n = G.rows; n-- > 0;) {
      const bool last = (n % seq_len) == seq_len - 1;
      for (std::size_t j = 0; j < k; ++j) {
        // carry holds dL/dh_{t+1} * g_{t+1} from the following step.
        const double a = dh(n, j) + (last ? 0.0 : carry[j]);
        if (du) (*du)(n, j) += a;
        if (dg && n % seq_len != 0) (*dg)(n, j) += a * H(n - 1, j);
        carry[j] = a * G(n, j);
      }
    }
  });
}

// ---------------------------------------------------------------------------
// Structured mixer kernels (s x s blocks flattened row-major per row)

/// Lower-triangular L filled from m = s(s+1)/2 entries (row-major over i >= j),
/// returns K = L L^T.
inline Var tril_gram(Var l, std::size_t s) {
  const Mat& Lf = l.value();
  if (Lf.cols != s * (s + 1) / 2) throw DimensionError("tril_gram: expected s(s+1)/2 columns");
  Mat k(Lf.rows, s * s);
  Vec L(s * s);
  for (std::size_t n = 0; n < Lf.rows; ++n) {
    std::fill(L.begin(), L.end(), 0.0);
    std::size_t idx = 0;
    for (std::size_t i = 0; i < s; ++i)
      for (std::size_t j = 0; j <= i; ++j) L[i * s + j] = Lf(n, idx++);
    for (std::size_t i = 0; i < s; ++i)
      for (std::size_t j = 0; j < s; ++j) {
        double acc = 0.0;
        for (std::size_t q = 0; q <= std::min(i, j); ++q) acc += L[i * s + q] * L[j * s + q];
        k(n, i * s + j) = acc;
      }
  }
  const std::size_t li = l.id;
  return l.tape->push(std::move(k), {l}, [li, s](Tape& t, std::size_t self) {
    const Mat& dk = t.grad_ref(self);
    const Mat& Lf = t.value(li);
    Mat& dl = t.grad_ref(li);
    Vec L(s * s);
    for (std::size_t n = 0; n < Lf.rows; ++n) {
      std::fill(L.begin(), L.end(), 0.0);
      std::size_t idx = 0;
      for (std::size_t i = 0; i < s; ++i)
        for (std::size_t j = 0; j <= i; ++j) L[i * s + j] = Lf(n, idx++);
      // dL = (dK + dK^T) L restricted to the lower triangle.
      idx = 0;
      for (std::size_t i = 0; i < s; ++i)
        for (std::size_t j = 0; j <= i; ++j) {
          double acc = 0.0;
          for (std::size_t q = 0; q < s; ++q) acc += (dk(n, i * s + q) + dk(n, q * s + i)) * L[q * s + j];
          dl(n, idx++) += acc;
        }
    }
  });
}

/// K_bar = scale * K / max(lambda_max(K), tiny) for symmetric PSD s x s blocks.
/// lambda_max comes from power iteration; its eigenvector is held constant in
/// the backward pass (exact at convergence).
inline Var eig_normalize(Var k, std::size_t s, double scale_factor, std::size_t iters, double tiny = 1e-12) {
  const Mat& K = k.value();
  if (K.cols != s * s) throw DimensionError("eig_normalize: expected s*s columns");
  Mat y(K.rows, K.cols);
  Mat lam(K.rows, 1);
  Mat vecs(K.rows, s);
  for (std::size_t n = 0; n < K.rows; ++n) {
    const TopEigen e = top_eigen_psd(K.row(n), s, iters);
    lam(n, 0) = e.value;
    std::copy(e.vector.begin(), e.vector.end(), vecs.row(n).begin());
    const double d = std::max(e.value, tiny);
    for (std::size_t j = 0; j < K.cols; ++j) y(n, j) = scale_factor * K(n, j) / d;
  }
  const std::size_t ki = k.id;
  return k.tape->push(std::move(y), {k},
                      [ki, s, scale_factor, tiny, lam = std::move(lam), vecs = std::move(vecs)](Tape& t, std::size_t self) {
                        const Mat& dy = t.grad_ref(self);
                        const Mat& K = t.value(ki);
                        Mat& dk = t.grad_ref(ki);
                        for (std::size_t n = 0; n < K.rows; ++n) {
                          const double l = lam(n, 0);
                          if (l > tiny) {
                            double inner = 0.0;
                            for (std::size_t j = 0; j < K.cols; ++j) inner += dy(n, j) * K(n, j);
                            const double c1 = scale_factor / l;
                            const double c2 = scale_factor * inner / (l * l);
                            for (std::size_t i = 0; i < s; ++i)
                              for (std::size_t j = 0; j < s; ++j)
                                dk(n, i * s + j) += c1 * dy(n, i * s + j) - c2 * vecs(n, i) * vecs(n, j);
                          } else {
                            for (std::size_t j = 0; j < K.cols; ++j) dk(n, j) += scale_factor * dy(n, j) / tiny;
                          }
                        }
                      });
}

/// Applies (K1 (x) K2) to v with row-major vec: out = K1 * mat(v) * K2^T.
inline Var kron_apply(Var k1, Var k2, Var v, std::size_t s) {
  detail::check_tape(k1, k2);
  detail::check_tape(k1, v);
  const Mat& A = k1.value();
  const Mat& B = k2.value();
  const Mat& V = v.value();
  if (A.cols != s * s || B.cols != s * s || V.cols != s * s || A.rows != V.rows || B.rows != V.rows)
    throw DimensionError("kron_apply: shape mismatch");
  Mat y(V.rows, s * s);
  Vec tmp(s * s);
  for (std::size_t n = 0; n < V.rows; ++n) {
    // tmp = X K2^T
    for (std::size_t i = 0; i < s; ++i)
      for (std::size_t j = 0; j < s; ++j) {
        double acc = 0.0;
        for (std::size_t q = 0; q < s; ++q) acc += V(n, i * s + q) * B(n, j * s + q);
        tmp[i * s + j] = acc;
      }
    for (std::size_t i = 0; i < s; ++i)
      for (std::size_t j = 0; j < s; ++j) {
        double acc = 0.0;
        for (std::size_t q = 0; q < s; ++q) acc += A(n, i * s + q) * tmp[q * s + j];
        y(n, i * s + j) = acc;
      }
  }
  const std::size_t ai = k1.id, bi = k2.id, vi = v.id;
  return v.tape->push(std::move(y), {k1, k2, v}, [ai, bi, vi, s](Tape& t, std::size_t self) {
    const Mat& dy = t.grad_ref(self);
    const Mat& A = t.value(ai);
    const Mat& B = t.value(bi);
    const Mat& V = t.value(vi);
    Vec xb(s * s), ax(s * s), at_d(s * s);
    for (std::size_t n = 0; n < V.rows; ++n) {
      auto Am = [&](std::size_t i, std::size_t j) { return A(n, i * s + j); };
      auto Bm = [&](std::size_t i, std::size_t j) { return B(n, i * s + j); };
      auto Xm = [&](std::size_t i, std::size_t j) { return V(n, i * s + j); };
      auto Dm = [&](std::size_t i, std::size_t j) { return dy(n, i * s + j); };
      if (t.needs_grad(ai)) {
        // dA = D (X B^T)^T = D B X^T
        for (std::size_t i = 0; i < s; ++i)
          for (std::size_t j = 0; j < s; ++j) {
            double acc = 0.0;
            for (std::size_t q = 0; q < s; ++q) acc += Xm(i, q) * Bm(j, q);
            xb[i * s + j] = acc;
          }
        Mat& da = t.grad_ref(ai);
        for (std::size_t i = 0; i < s; ++i)
          for (std::size_t j = 0; j < s; ++j) {
            double acc = 0.0;
            for (std::size_t q = 0; q < s; ++q) acc += Dm(i, q) * xb[j * s + q];
            da(n, i * s + j) += acc;
          }
      }
      if (t.needs_grad(bi)) {
        // dB = D^T (A X)
        for (std::size_t i = 0; i < s; ++i)
          for (std::size_t j = 0; j < s; ++j) {
            double acc = 0.0;
            for (std::size_t q = 0; q < s; ++q) acc += Am(i, q) * Xm(q, j);
            ax[i * s + j] = acc;
          }
        Mat& db = t.grad_ref(bi);
        for (std::size_t i = 0; i < s; ++i)
          for (std::size_t j = 0; j < s; ++j) {
            double acc = 0.0;
            for (std::size_t q = 0; q < s; ++q) acc += Dm(q, i) * ax[q * s + j];
            db(n, i * s + j) += acc;
          }
      }
      if (t.needs_grad(vi)) {
        // dX = A^T D B
        for (std::size_t i = 0; i < s; ++i)
          for (std::size_t j = 0; j < s; ++j) {
            double acc = 0.0;
            for (std::size_t q = 0; q < s; ++q) acc += Am(q, i) * Dm(q, j);
            at_d[i * s + j] = acc;
          }
        Mat& dv = t.grad_ref(vi);
        for (std::size_t i = 0; i < s; ++i)
          for (std::size_t j = 0; j < s; ++j) {
            double acc = 0.0;
            for (std::size_t q = 0; q < s; ++q) acc += at_d[i * s + q] * Bm(q, j);
            dv(n, i * s + j) += acc;
          }
      }
    }
  });
}

// ---------------------------------------------------------------------------
// Embedding and losses

/// Row n of the output is row ids[n] of the table.
inline Var embedding(std::span<const int> ids, Var table) {
  const Mat& E = table.value();
  Mat y(ids.size(), E.cols);
  for (std::size_t n = 0; n < ids.size(); ++n) {
    if (ids[n] < 0 || static_cast<std::size_t>(ids[n]) >= E.rows) throw DimensionError("embedding: id out of range");
    std::copy(E.row(static_cast<std::size_t>(ids[n])).begin(), E.row(static_cast<std::size_t>(ids[n])).end(),
              y.row(n).begin());
  }
  const std::size_t ei = table.id;
  std::vector<int> idv(ids.begin(), ids.end());
  return table.tape->push(std::move(y), {table}, [ei, idv = std::move(idv)](Tape& t, std::size_t self) {
    const Mat& dy = t.grad_ref(self);
    Mat& de = t.grad_ref(ei);
    for (std::size_t n = 0; n < idv.size(); ++n)
      for (std::size_t j = 0; j < dy.cols; ++j) de(static_cast<std::size_t>(idv[n]), j) += dy(n, j);
  });
}

/// sum(x * w) for a constant weight matrix; injects an upstream gradient.
inline Var weighted_sum(Var x, const Mat& w) {
  const Mat& X = x.value();
  require_same_shape(X, w, "weighted_sum");
  Mat y(1, 1);
  for (std::size_t i = 0; i < X.size(); ++i) y.data[0] += X.data[i] * w.data[i];
  const std::size_t xi = x.id;
  return x.tape->push(std::move(y), {x}, [xi, w](Tape& t, std::size_t self) {
    const double g = t.grad_ref(self).data[0];
    Mat& dx = t.grad_ref(xi);
    for (std::size_t i = 0; i < dx.size(); ++i) dx.data[i] += g * w.data[i];
  });
}

/// Mean softmax cross-entropy over rows with mask[n] != 0. Returns 1 x 1.
inline Var cross_entropy_masked(Var logits, std::span<const int> targets, std::span<const int> mask) {
  const Mat& Z = logits.value();
  if (targets.size() != Z.rows || mask.size() != Z.rows) throw DimensionError("cross_entropy_masked: length mismatch");
  std::size_t count = 0;
  for (int m : mask) count += (m != 0);
  if (count == 0) throw DimensionError("cross_entropy_masked: empty mask");
  Mat probs(Z.rows, Z.cols);
  double total = 0.0;
  for (std::size_t n = 0; n < Z.rows; ++n) {
    if (!mask[n]) continue;
    if (targets[n] < 0 || static_cast<std::size_t>(targets[n]) >= Z.cols)
      throw DimensionError("cross_entropy_masked: target out of range");
    double mx = Z(n, 0);
    for (std::size_t j = 1; j < Z.cols; ++j) mx = std::max(mx, Z(n, j));
    double se = 0.0;
    for (std::size_t j = 0; j < Z.cols; ++j) se += std::exp(Z(n, j) - mx);
    const double lse = mx + std::log(se);
    total += lse - Z(n, static_cast<std::size_t>(targets[n]));
    for (std::size_t j = 0; j < Z.cols; ++j) probs(n, j) = std::exp(Z(n, j) - lse);
  }
  const double inv = 1.0 / static_cast<double>(count);
  Mat y(1, 1, total * inv);
  const std::size_t zi = logits.id;
  std::vector<int> tv(targets.begin(), targets.end()), mv(mask.begin(), mask.end());
  return logits.tape->push(std::move(y), {logits},
                           [zi, inv, probs = std::move(probs), tv = std::move(tv), mv = std::move(mv)](Tape& t,
                                                                                                       std::size_t self) {
                             const double g = t.grad_ref(self).data[0] * inv;
                             Mat& dz = t.grad_ref(zi);
                             for (std::size_t n = 0; n < dz.rows; ++n) {
                               if (!mv[n]) continue;
                               for (std::size_t j = 0; j < dz.cols; ++j) dz(n, j) += g * probs(n, j);
                               dz(n, static_cast<std::size_t>(tv[n])) -= g;
                             }
                           });
}

}  // namespace fprnn::ad
