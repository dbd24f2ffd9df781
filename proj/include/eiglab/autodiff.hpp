#pragma once

// Minimal tape-based reverse-mode automatic differentiation over dense
// row-major matrices. Every tensor is rank 2 ([rows, cols]); a scalar is
// [1, 1]. Binary elementwise ops accept identical shapes or a single-row
// operand that is broadcast along the leading (batch) dimension.

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <limits>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "eiglab/errors.hpp"
#include "eiglab/math.hpp"

namespace eiglab::ad {

struct Tensor {
  std::vector<std::size_t> shape{1, 1};
  std::vector<double> data = std::vector<double>(1, 0.0);

  Tensor() = default;
  Tensor(std::size_t rows, std::size_t cols, double fill = 0.0)
      : shape{rows, cols}, data(rows * cols, fill) {
    if (rows == 0 || cols == 0) throw ShapeError("tensor dimensions must be positive");
  }
  Tensor(std::size_t rows, std::size_t cols, std::vector<double> values)
      : shape{rows, cols}, data(std::move(values)) {
    if (rows == 0 || cols == 0) throw ShapeError("tensor dimensions must be positive");
    if (data.size() != rows * cols) throw ShapeError("tensor data length does not match shape");
  }

  static Tensor scalar(double v) { return Tensor(1, 1, v); }
  static Tensor row(std::vector<double> v) {
    const std::size_t n = v.size();
    return Tensor(1, n, std::move(v));
  }
  static Tensor column(std::vector<double> v) {
    const std::size_t n = v.size();
    return Tensor(n, 1, std::move(v));
  }

  std::size_t rows() const { return shape[0]; }
  std::size_t cols() const { return shape[1]; }
  std::size_t size() const { return data.size(); }

  double& operator()(std::size_t r, std::size_t c) { return data[r * shape[1] + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data[r * shape[1] + c]; }

  double item() const {
    if (data.size() != 1) throw ShapeError("item() on non-scalar tensor");
    return data[0];
  }

  bool same_shape(const Tensor& o) const { return shape == o.shape; }
};

inline std::string shape_str(const Tensor& t) {
  return "[" + std::to_string(t.rows()) + "," + std::to_string(t.cols()) + "]";
}

class Tape;

class Var {
 public:
  Var() = default;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape& tape() const { return *tape_; }
  std::size_t id() const { return id_; }
  bool valid() const { return tape_ != nullptr; }
  const Tensor& value() const;
  std::size_t rows() const { return value().rows(); }
  std::size_t cols() const { return value().cols(); }
  double item() const { return value().item(); }

 private:
  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

class Tape {
 public:
  /// Receives the accumulated output gradient; adds into parents via accumulate().
  using Backward = std::function<void(Tape&, const Tensor&)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Tensor t) { return push(std::move(t), nullptr, false, "constant"); }
  Var variable(Tensor t) { return push(std::move(t), nullptr, true, "variable"); }

  std::vector<Var> variables(std::span<const Tensor> ts) {
    std::vector<Var> out;
    out.reserve(ts.size());
    for (const auto& t : ts) out.push_back(variable(t));
    return out;
  }

  std::size_t size() const { return nodes_.size(); }
  const Tensor& value(std::size_t id) const { return nodes_[id].value; }
  bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }

  /// Records an op output; the node needs a gradient iff any parent does.
  Var record(Tensor value, std::initializer_list<Var> parents, Backward backward, const char* op) {
    bool needs = false;
    for (const Var& p : parents) {
      own(p);
      needs = needs || nodes_[p.id()].requires_grad;
    }
    for (double x : value.data) {
      if (!std::isfinite(x)) throw NumericError(std::string("non-finite value produced by ") + op);
    }
    return push(std::move(value), needs ? std::move(backward) : nullptr, needs, op);
  }

  /// Gradient slot for a parent during the backward sweep (zero-initialized).
  Tensor& accumulate(std::size_t id) {
    Tensor& g = grads_[id];
    if (g.size() != nodes_[id].value.size() || !touched_[id]) {
      g = Tensor(nodes_[id].value.rows(), nodes_[id].value.cols(), 0.0);
      touched_[id] = true;
    }
    return g;
  }

  /// Exact reverse-mode gradients of the scalar `output` w.r.t. each of `wrt`.
  std::vector<Tensor> grad(Var output, std::span<const Var> wrt) {
    own(output);
    for (const Var& w : wrt) own(w);
    if (nodes_[output.id()].value.size() != 1)
      throw ShapeError("grad requires a scalar output, got " + shape_str(output.value()));
    grads_.assign(nodes_.size(), Tensor());
    touched_.assign(nodes_.size(), false);
    accumulate(output.id()).data[0] = 1.0;
    for (std::size_t i = output.id() + 1; i-- > 0;) {
      if (!touched_[i] || !nodes_[i].backward) continue;
      nodes_[i].backward(*this, grads_[i]);
    }
    std::vector<Tensor> out;
    out.reserve(wrt.size());
    for (const Var& w : wrt) {
      if (touched_[w.id()]) {
        out.push_back(grads_[w.id()]);
      } else {
        out.emplace_back(w.value().rows(), w.value().cols(), 0.0);
      }
    }
    grads_.clear();
    touched_.clear();
    return out;
  }

  std::vector<Tensor> grad(Var output, std::initializer_list<Var> wrt) {
    return grad(output, std::span<const Var>(wrt.begin(), wrt.size()));
  }

  void own(const Var& v) const {
    if (&v.tape() != this || v.id() >= nodes_.size()) throw Error("variable is not on this tape");
  }

 private:
  struct Node {
    Tensor value;
    Backward backward;
    bool requires_grad;
    const char* op;
  };

  Var push(Tensor t, Backward b, bool requires_grad, const char* op) {
    nodes_.push_back(Node{std::move(t), std::move(b), requires_grad, op});
    return Var(this, nodes_.size() - 1);
  }

  std::vector<Node> nodes_;
  std::vector<Tensor> grads_;
  std::vector<bool> touched_;
};

inline const Tensor& Var::value() const { return tape_->value(id_); }

// ---------------------------------------------------------------------------
// Elementwise helpers

namespace detail {

enum class Broadcast { none, lhs_row, rhs_row };

inline Broadcast check_binary(const Tensor& a, const Tensor& b, const char* op) {
  if (a.same_shape(b)) return Broadcast::none;
  if (a.cols() == b.cols() && b.rows() == 1) return Broadcast::rhs_row;
  if (a.cols() == b.cols() && a.rows() == 1) return Broadcast::lhs_row;
  throw ShapeError(std::string(op) + ": incompatible shapes " + shape_str(a) + " and " + shape_str(b));
}

// f(a, b) -> value; da(a, b) -> d/da; db(a, b) -> d/db.
template <class F, class DA, class DB>
Var binary(Var a, Var b, const char* op, F f, DA da, DB db) {
  const Tensor& A = a.value();
  const Tensor& B = b.value();
  const Broadcast bc = check_binary(A, B, op);
  const std::size_t rows = std::max(A.rows(), B.rows()), cols = A.cols();
  Tensor out(rows, cols);
  for (std::size_t r = 0; r < rows; ++r) {
    const std::size_t ra = bc == Broadcast::lhs_row ? 0 : r;
    const std::size_t rb = bc == Broadcast::rhs_row ? 0 : r;
    for (std::size_t c = 0; c < cols; ++c) out(r, c) = f(A(ra, c), B(rb, c));
  }
  const std::size_t ia = a.id(), ib = b.id();
  return a.tape().record(
      std::move(out), {a, b},
      [ia, ib, bc, rows, cols, da, db](Tape& t, const Tensor& g) {
        const Tensor& A = t.value(ia);
        const Tensor& B = t.value(ib);
        const bool need_a = t.requires_grad(ia), need_b = t.requires_grad(ib);
        Tensor* ga = need_a ? &t.accumulate(ia) : nullptr;
        Tensor* gb = need_b ? &t.accumulate(ib) : nullptr;
        for (std::size_t r = 0; r < rows; ++r) {
          const std::size_t ra = bc == Broadcast::lhs_row ? 0 : r;
          const std::size_t rb = bc == Broadcast::rhs_row ? 0 : r;
          for (std::size_t c = 0; c < cols; ++c) {
            const double x = A(ra, c), y = B(rb, c), gv = g(r, c);
            if (ga) (*ga)(ra, c) += gv * da(x, y);
            if (gb) (*gb)(rb, c) += gv * db(x, y);
          }
        }
      },
      op);
}

// f(x) -> value; df(x, fx) -> derivative.
template <class F, class DF>
Var unary(Var a, const char* op, F f, DF df) {
  const Tensor& A = a.value();
  Tensor out(A.rows(), A.cols());
  for (std::size_t i = 0; i < A.size(); ++i) out.data[i] = f(A.data[i]);
  const std::size_t ia = a.id();
  const std::size_t io = a.tape().size();  // id this op's output will receive
  return a.tape().record(
      std::move(out), {a},
      [ia, io, df](Tape& t, const Tensor& g) {
        const Tensor& A = t.value(ia);
        const Tensor& O = t.value(io);
        Tensor& ga = t.accumulate(ia);
        for (std::size_t i = 0; i < A.size(); ++i) ga.data[i] += g.data[i] * df(A.data[i], O.data[i]);
      },
      op);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Forward primitives

inline Var add(Var a, Var b) {
  return detail::binary(
      a, b, "add", [](double x, double y) { return x + y; }, [](double, double) { return 1.0; },
      [](double, double) { return 1.0; });
}

inline Var sub(Var a, Var b) {
  return detail::binary(
      a, b, "sub", [](double x, double y) { return x - y; }, [](double, double) { return 1.0; },
      [](double, double) { return -1.0; });
}

inline Var mul(Var a, Var b) {
  return detail::binary(
      a, b, "mul", [](double x, double y) { return x * y; }, [](double, double y) { return y; },
      [](double x, double) { return x; });
}

inline Var div(Var a, Var b) {
  return detail::binary(
      a, b, "div", [](double x, double y) { return x / y; },
      [](double, double y) { return 1.0 / y; }, [](double x, double y) { return -x / (y * y); });
}

inline Var scale(Var a, double c) {
  return detail::unary(
      a, "scale", [c](double x) { return c * x; }, [c](double, double) { return c; });
}

inline Var shift(Var a, double c) {
  return detail::unary(
      a, "shift", [c](double x) { return x + c; }, [](double, double) { return 1.0; });
}

inline Var neg(Var a) { return scale(a, -1.0); }

inline Var square(Var a) {
  return detail::unary(
      a, "square", [](double x) { return x * x; }, [](double x, double) { return 2.0 * x; });
}

inline Var exp(Var a) {
  return detail::unary(
      a, "exp", [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

inline Var log(Var a) {
  for (double x : a.value().data) {
    if (!(x > 0.0)) throw DomainError("log of non-positive value " + std::to_string(x));
  }
  return detail::unary(
      a, "log", [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}

inline Var sqrt(Var a) {
  for (double x : a.value().data) {
    if (!(x > 0.0)) throw DomainError("sqrt of non-positive value " + std::to_string(x));
  }
  return detail::unary(
      a, "sqrt", [](double x) { return std::sqrt(x); },
      [](double, double y) { return 0.5 / y; });
}

inline Var tanh(Var a) {
  return detail::unary(
      a, "tanh", [](double x) { return std::tanh(x); },
      [](double, double y) { return 1.0 - y * y; });
}

/// Elementwise log of the standard normal CDF.
inline Var log_normal_cdf(Var a) {
  return detail::unary(
      a, "log_normal_cdf", [](double x) { return math::log_normal_cdf(x); },
      [](double x, double) { return math::d_log_normal_cdf(x); });
}

inline Var matmul(Var a, Var b) {
  const Tensor& A = a.value();
  const Tensor& B = b.value();
  if (A.cols() != B.rows())
    throw ShapeError("matmul: incompatible shapes " + shape_str(A) + " and " + shape_str(B));
  const std::size_t n = A.rows(), k = A.cols(), m = B.cols();
  Tensor out(n, m);
  for (std::size_t i = 0; i < n; ++i) {
    double* orow = &out.data[i * m];
    for (std::size_t p = 0; p < k; ++p) {
      const double aip = A.data[i * k + p];
      const double* brow = &B.data[p * m];
      for (std::size_t j = 0; j < m; ++j) orow[j] += aip * brow[j];
    }
  }
  const std::size_t ia = a.id(), ib = b.id();
  return a.tape().record(
      std::move(out), {a, b},
      [ia, ib, n, k, m](Tape& t, const Tensor& g) {
        const Tensor& A = t.value(ia);
        const Tensor& B = t.value(ib);
        if (t.requires_grad(ia)) {
          Tensor& ga = t.accumulate(ia);  // g B^T
          for (std::size_t i = 0; i < n; ++i)
            for (std::size_t p = 0; p < k; ++p) {
              double s = 0.0;
              for (std::size_t j = 0; j < m; ++j) s += g.data[i * m + j] * B.data[p * m + j];
              ga.data[i * k + p] += s;
            }
        }
        if (t.requires_grad(ib)) {
          Tensor& gb = t.accumulate(ib);  // A^T g
          for (std::size_t i = 0; i < n; ++i)
            for (std::size_t p = 0; p < k; ++p) {
              const double aip = A.data[i * k + p];
              for (std::size_t j = 0; j < m; ++j) gb.data[p * m + j] += aip * g.data[i * m + j];
            }
        }
      },
      "matmul");
}

/// x W + b with b a single row broadcast over the batch.
inline Var affine(Var x, Var w, Var b) {
  if (b.value().rows() != 1 || b.value().cols() != w.value().cols())
    throw ShapeError("affine: bias must be [1," + std::to_string(w.value().cols()) + "]");
  return add(matmul(x, w), b);
}

/// Sum of all entries -> [1,1].
inline Var sum(Var a) {
  const Tensor& A = a.value();
  double s = 0.0;
  for (double x : A.data) s += x;
  const std::size_t ia = a.id();
  return a.tape().record(
      Tensor::scalar(s), {a},
      [ia](Tape& t, const Tensor& g) {
        Tensor& ga = t.accumulate(ia);
        for (double& x : ga.data) x += g.data[0];
      },
      "sum");
}

inline Var mean(Var a) { return scale(sum(a), 1.0 / static_cast<double>(a.value().size())); }

/// Per-row sum -> [rows,1].
inline Var row_sum(Var a) {
  const Tensor& A = a.value();
  Tensor out(A.rows(), 1);
  for (std::size_t r = 0; r < A.rows(); ++r)
    for (std::size_t c = 0; c < A.cols(); ++c) out(r, 0) += A(r, c);
  const std::size_t ia = a.id();
  return a.tape().record(
      std::move(out), {a},
      [ia](Tape& t, const Tensor& g) {
        Tensor& ga = t.accumulate(ia);
        for (std::size_t r = 0; r < ga.rows(); ++r)
          for (std::size_t c = 0; c < ga.cols(); ++c) ga(r, c) += g(r, 0);
      },
      "row_sum");
}

/// Per-row log-sum-exp with max shift -> [rows,1].
inline Var logsumexp(Var a) {
  const Tensor& A = a.value();
  const std::size_t rows = A.rows(), cols = A.cols();
  Tensor out(rows, 1);
  for (std::size_t r = 0; r < rows; ++r)
    out(r, 0) = math::log_sum_exp(std::span<const double>(&A.data[r * cols], cols));
  const std::size_t ia = a.id();
  const std::size_t io = a.tape().size();
  return a.tape().record(
      std::move(out), {a},
      [ia, io, rows, cols](Tape& t, const Tensor& g) {
        const Tensor& A = t.value(ia);
        const Tensor& O = t.value(io);
        Tensor& ga = t.accumulate(ia);
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t c = 0; c < cols; ++c) ga(r, c) += g(r, 0) * std::exp(A(r, c) - O(r, 0));
      },
      "logsumexp");
}

/// out[r] = a[r, index[r]] -> [rows,1].
inline Var gather(Var a, std::vector<std::size_t> index) {
  const Tensor& A = a.value();
  if (index.size() != A.rows())
    throw ShapeError("gather: index length " + std::to_string(index.size()) + " != rows " +
                     std::to_string(A.rows()));
  Tensor out(A.rows(), 1);
  for (std::size_t r = 0; r < A.rows(); ++r) {
    if (index[r] >= A.cols()) throw ShapeError("gather: index out of range");
    out(r, 0) = A(r, index[r]);
  }
  const std::size_t ia = a.id();
  return a.tape().record(
      std::move(out), {a},
      [ia, index = std::move(index)](Tape& t, const Tensor& g) {
        Tensor& ga = t.accumulate(ia);
        for (std::size_t r = 0; r < index.size(); ++r) ga(r, index[r]) += g(r, 0);
      },
      "gather");
}

/// Columns [begin, end).
inline Var slice_cols(Var a, std::size_t begin, std::size_t end) {
  const Tensor& A = a.value();
  if (begin >= end || end > A.cols()) throw ShapeError("slice_cols: bad range");
  const std::size_t w = end - begin;
  Tensor out(A.rows(), w);
  for (std::size_t r = 0; r < A.rows(); ++r)
    for (std::size_t c = 0; c < w; ++c) out(r, c) = A(r, begin + c);
  const std::size_t ia = a.id();
  return a.tape().record(
      std::move(out), {a},
      [ia, begin, w](Tape& t, const Tensor& g) {
        Tensor& ga = t.accumulate(ia);
        for (std::size_t r = 0; r < g.rows(); ++r)
          for (std::size_t c = 0; c < w; ++c) ga(r, begin + c) += g(r, c);
      },
      "slice_cols");
}

inline Var concat_cols(Var a, Var b) {
  const Tensor& A = a.value();
  const Tensor& B = b.value();
  if (A.rows() != B.rows()) throw ShapeError("concat_cols: row mismatch");
  const std::size_t ca = A.cols(), cb = B.cols();
  Tensor out(A.rows(), ca + cb);
  for (std::size_t r = 0; r < A.rows(); ++r) {
    for (std::size_t c = 0; c < ca; ++c) out(r, c) = A(r, c);
    for (std::size_t c = 0; c < cb; ++c) out(r, ca + c) = B(r, c);
  }
  const std::size_t ia = a.id(), ib = b.id();
  return a.tape().record(
      std::move(out), {a, b},
      [ia, ib, ca, cb](Tape& t, const Tensor& g) {
        if (t.requires_grad(ia)) {
          Tensor& ga = t.accumulate(ia);
          for (std::size_t r = 0; r < g.rows(); ++r)
            for (std::size_t c = 0; c < ca; ++c) ga(r, c) += g(r, c);
        }
        if (t.requires_grad(ib)) {
          Tensor& gb = t.accumulate(ib);
          for (std::size_t r = 0; r < g.rows(); ++r)
            for (std::size_t c = 0; c < cb; ++c) gb(r, c) += g(r, ca + c);
        }
      },
      "concat_cols");
}

/// Each row repeated `k` times consecutively: row r lands on rows r*k .. r*k+k-1.
inline Var repeat_rows(Var a, std::size_t k) {
  const Tensor& A = a.value();
  const std::size_t rows = A.rows(), cols = A.cols();
  Tensor out(rows * k, cols);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t j = 0; j < k; ++j)
      for (std::size_t c = 0; c < cols; ++c) out(r * k + j, c) = A(r, c);
  const std::size_t ia = a.id();
  return a.tape().record(
      std::move(out), {a},
      [ia, rows, cols, k](Tape& t, const Tensor& g) {
        Tensor& ga = t.accumulate(ia);
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t j = 0; j < k; ++j)
            for (std::size_t c = 0; c < cols; ++c) ga(r, c) += g(r * k + j, c);
      },
      "repeat_rows");
}

/// [rows,1] -> [rows,n] by copying the single column.
inline Var tile_cols(Var a, std::size_t n) {
  const Tensor& A = a.value();
  if (A.cols() != 1) throw ShapeError("tile_cols: expects a single column");
  Tensor out(A.rows(), n);
  for (std::size_t r = 0; r < A.rows(); ++r)
    for (std::size_t c = 0; c < n; ++c) out(r, c) = A(r, 0);
  const std::size_t ia = a.id();
  return a.tape().record(
      std::move(out), {a},
      [ia, n](Tape& t, const Tensor& g) {
        Tensor& ga = t.accumulate(ia);
        for (std::size_t r = 0; r < g.rows(); ++r)
          for (std::size_t c = 0; c < n; ++c) ga(r, 0) += g(r, c);
      },
      "tile_cols");
}

inline Var reshape(Var a, std::size_t rows, std::size_t cols) {
  const Tensor& A = a.value();
  if (rows * cols != A.size()) throw ShapeError("reshape: size mismatch");
  Tensor out(rows, cols, A.data);
  const std::size_t ia = a.id();
  return a.tape().record(
      std::move(out), {a},
      [ia](Tape& t, const Tensor& g) {
        Tensor& ga = t.accumulate(ia);
        for (std::size_t i = 0; i < g.size(); ++i) ga.data[i] += g.data[i];
      },
      "reshape");
}

inline Var operator+(Var a, Var b) { return add(a, b); }
inline Var operator-(Var a, Var b) { return sub(a, b); }
inline Var operator*(Var a, Var b) { return mul(a, b); }
inline Var operator/(Var a, Var b) { return div(a, b); }
inline Var operator-(Var a) { return neg(a); }
inline Var operator*(double c, Var a) { return scale(a, c); }
inline Var operator*(Var a, double c) { return scale(a, c); }
inline Var operator+(Var a, double c) { return shift(a, c); }
inline Var operator-(Var a, double c) { return shift(a, -c); }

// ---------------------------------------------------------------------------
// Gradient checking

/// Scalar objective built on a fresh tape from the variable `x`.
using ScalarFn = std::function<Var(Tape&, Var)>;

/// Max over coordinates of |autodiff - central difference| / (|central difference| + 1e-12).
inline double finite_difference_check(const ScalarFn& f, const Tensor& x, double step) {
  if (!(step > 0.0)) throw ConfigError("finite_difference_check: step must be positive");
  Tensor analytic;
  {
    Tape tape;
    Var xv = tape.variable(x);
    Var out = f(tape, xv);
    if (!std::isfinite(out.item())) throw NumericError("finite_difference_check: non-finite f(x)");
    analytic = tape.grad(out, {xv})[0];
  }
  auto eval = [&](const Tensor& at) {
    Tape tape;
    const double v = f(tape, tape.constant(at)).item();
    if (!std::isfinite(v)) throw NumericError("finite_difference_check: non-finite f evaluation");
    return v;
  };
  double worst = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    Tensor hi = x, lo = x;
    hi.data[i] += step;
    lo.data[i] -= step;
    const double central = (eval(hi) - eval(lo)) / (2.0 * step);
    const double err = std::abs(analytic.data[i] - central) / (std::abs(central) + 1e-12);
    worst = std::max(worst, err);
  }
  return worst;
}

}  // namespace eiglab::ad
