#pragma once

// Tape-based reverse-mode differentiation over dense double matrices.
//
// A Tape records every operation in construction order; backward() walks the
// tape in reverse, which is a valid topological order because a node can only
// reference nodes created before it. Summation order inside every kernel is
// fixed, so repeated runs are bit-identical.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <numbers>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "headrank/errors.hpp"
#include "headrank/matrix.hpp"

namespace headrank::ad {

enum class Op : std::uint8_t {
  leaf,
  matmul,
  matmul_nt,
  add,
  sub,
  scale,
  add_const,
  hadamard,
  mul_row,
  masked_softmax,
  rms_norm,
  gelu,
  log_sigmoid,
  hinge,
  sum,
  mean,
  variance,
  entropy,
  l2_squared,
  gather_rows,
  slice_cols,
  concat_cols,
  row_mean,
  range_sum,
  stack,
  select,
};

inline std::string_view op_name(Op op) {
  switch (op) {
    case Op::leaf: return "leaf";
    case Op::matmul: return "matmul";
    case Op::matmul_nt: return "matmul_nt";
    case Op::add: return "add";
    case Op::sub: return "sub";
    case Op::scale: return "scale";
    case Op::add_const: return "add_const";
    case Op::hadamard: return "hadamard";
    case Op::mul_row: return "mul_row";
    case Op::masked_softmax: return "masked_softmax";
    case Op::rms_norm: return "rms_norm";
    case Op::gelu: return "gelu";
    case Op::log_sigmoid: return "log_sigmoid";
    case Op::hinge: return "hinge";
    case Op::sum: return "sum";
    case Op::mean: return "mean";
    case Op::variance: return "variance";
    case Op::entropy: return "entropy";
    case Op::l2_squared: return "l2_squared";
    case Op::gather_rows: return "gather_rows";
    case Op::slice_cols: return "slice_cols";
    case Op::concat_cols: return "concat_cols";
    case Op::row_mean: return "row_mean";
    case Op::range_sum: return "range_sum";
    case Op::stack: return "stack";
    case Op::select: return "select";
  }
  return "unknown";
}

class Tape;

// Lightweight handle to a node on a tape. Valid for the tape's lifetime.
class Var {
 public:
  Var() = default;
  Var(const Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  const Matrix& value() const;
  double item() const;
  std::size_t id() const noexcept { return id_; }
  const Tape* tape() const noexcept { return tape_; }
  bool valid() const noexcept { return tape_ != nullptr; }

 private:
  const Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

// Adjoints for every node of a tape after one backward pass.
class Gradients {
 public:
  Gradients() = default;
  explicit Gradients(std::vector<Matrix> adj) : adj_(std::move(adj)) {}
  const Matrix& operator[](const Var& v) const { return adj_.at(v.id()); }
  const Matrix& at(std::size_t id) const { return adj_.at(id); }
  std::size_t size() const noexcept { return adj_.size(); }

 private:
  std::vector<Matrix> adj_;
};

class Tape {
 public:
  // adj[self] is the incoming adjoint; the function accumulates into parents.
  using BackwardFn = std::function<void(const Tape&, std::size_t self, std::vector<Matrix>& adj)>;

  // With recording off, values are computed but no backward state is kept.
  explicit Tape(bool recording = true) : recording_(recording) { nodes_.reserve(256); }
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool recording() const noexcept { return recording_; }
  std::size_t size() const noexcept { return nodes_.size(); }

  Var leaf(Matrix value) {
    if (!value.all_finite()) throw NumericError("leaf: non-finite value admitted to graph");
    return push(Op::leaf, std::move(value), {}, nullptr);
  }

  const Matrix& value(std::size_t id) const { return nodes_[id].value; }
  const Matrix& value(const Var& v) const { return nodes_[v.id()].value; }
  Op op(std::size_t id) const { return nodes_[id].op; }
  std::span<const std::size_t> parents(std::size_t id) const { return nodes_[id].parents; }
  // Rows of the first parent a row-gathering node reads; empty for other ops.
  std::span<const std::size_t> rows_read(std::size_t id) const { return nodes_[id].rows_read; }
  void set_rows_read(std::size_t id, std::vector<std::size_t> rows) {
    if (recording_) nodes_[id].rows_read = std::move(rows);
  }

  // Parents and the backward function are only materialized when recording.
  template <typename Fn>
  Var push(Op op, Matrix value, std::initializer_list<std::size_t> parents, Fn&& fn) {
    return push_node(op, std::move(value), parents, std::forward<Fn>(fn));
  }
  template <typename Fn>
  Var push(Op op, Matrix value, const std::vector<std::size_t>& parents, Fn&& fn) {
    return push_node(op, std::move(value), parents, std::forward<Fn>(fn));
  }

  Gradients backward(const Var& root) const {
    if (!recording_) throw Error("graph", "backward on a tape that does not record gradients");
    if (root.tape() != this) throw Error("graph", "backward root belongs to another tape");
    const Matrix& rv = nodes_[root.id()].value;
    if (rv.rows() != 1 || rv.cols() != 1) {
      throw ShapeError("backward root must be scalar, got " + rv.shape());
    }
    std::vector<Matrix> adj(nodes_.size());
    adj[root.id()] = Matrix(1, 1, 1.0);
    for (std::size_t i = root.id() + 1; i-- > 0;) {
      const Node& n = nodes_[i];
      if (adj[i].empty() || !n.backward) continue;
      n.backward(*this, i, adj);
    }
    for (std::size_t i = 0; i < nodes_.size(); ++i) {
      if (adj[i].empty()) adj[i] = Matrix(nodes_[i].value.rows(), nodes_[i].value.cols());
    }
    return Gradients(std::move(adj));
  }

  // Adjoint slot for a parent, allocated as zeros on first use.
  Matrix& adjoint_slot(std::vector<Matrix>& adj, std::size_t id) const {
    if (adj[id].empty()) adj[id] = Matrix(nodes_[id].value.rows(), nodes_[id].value.cols());
    return adj[id];
  }

 private:
  struct Node {
    Matrix value;
    Op op = Op::leaf;
    std::vector<std::size_t> parents;
    BackwardFn backward;
    std::vector<std::size_t> rows_read;
  };

  template <typename Range, typename Fn>
  Var push_node(Op op, Matrix value, const Range& parents, Fn&& fn) {
    if (!value.all_finite()) {
      throw NumericError(std::string("op ") + std::string(op_name(op)) + " produced a non-finite value");
    }
    Node& n = nodes_.emplace_back();
    n.value = std::move(value);
    n.op = op;
    if (recording_) {
      n.parents.assign(parents.begin(), parents.end());
      n.backward = BackwardFn(std::forward<Fn>(fn));
    }
    return Var(this, nodes_.size() - 1);
  }

  bool recording_;
  std::vector<Node> nodes_;
};

inline const Matrix& Var::value() const { return tape_->value(id_); }
inline double Var::item() const {
  const Matrix& m = value();
  if (m.size() != 1) throw ShapeError("item() on non-scalar " + m.shape());
  return m[0];
}

namespace detail {

inline const Tape& same_tape(const Var& a, const Var& b, std::string_view op) {
  if (!a.valid() || !b.valid() || a.tape() != b.tape()) {
    throw Error("graph", std::string(op) + ": operands live on different tapes");
  }
  return *a.tape();
}

inline Tape& mut(const Tape& t) { return const_cast<Tape&>(t); }

inline void require_same_shape(const Matrix& a, const Matrix& b, std::string_view op) {
  if (!a.same_shape(b)) {
    throw ShapeError(std::string(op) + ": shape mismatch " + a.shape() + " vs " + b.shape());
  }
}

inline void require_row_vector(const Matrix& a, std::string_view op) {
  if (a.rows() != 1) throw ShapeError(std::string(op) + ": expected a row vector, got " + a.shape());
}

inline double sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

}  // namespace detail

inline Var matmul(const Var& a, const Var& b) {
  const Tape& t = detail::same_tape(a, b, "matmul");
  const Matrix& av = a.value();
  const Matrix& bv = b.value();
  if (av.cols() != bv.rows()) {
    throw ShapeError("matmul: shape mismatch " + av.shape() + " vs " + bv.shape());
  }
  Matrix out(av.rows(), bv.cols());
  kernels::matmul_acc(av, bv, out);
  const std::size_t ia = a.id(), ib = b.id();
  return detail::mut(t).push(Op::matmul, std::move(out), {ia, ib},
                             [ia, ib](const Tape& tp, std::size_t self, std::vector<Matrix>& adj) {
                               const Matrix& g = adj[self];
                               kernels::matmul_nt_acc(g, tp.value(ib), tp.adjoint_slot(adj, ia));
                               kernels::matmul_tn_acc(tp.value(ia), g, tp.adjoint_slot(adj, ib));
                             });
}

// a * b^T
inline Var matmul_nt(const Var& a, const Var& b) {
  const Tape& t = detail::same_tape(a, b, "matmul_nt");
  const Matrix& av = a.value();
  const Matrix& bv = b.value();
  if (av.cols() != bv.cols()) {
    throw ShapeError("matmul_nt: shape mismatch " + av.shape() + " vs " + bv.shape());
  }
  Matrix out(av.rows(), bv.rows());
  kernels::matmul_nt_acc(av, bv, out);
  const std::size_t ia = a.id(), ib = b.id();
  return detail::mut(t).push(Op::matmul_nt, std::move(out), {ia, ib},
                             [ia, ib](const Tape& tp, std::size_t self, std::vector<Matrix>& adj) {
                               const Matrix& g = adj[self];
                               // dA = G B, dB = G^T A
                               kernels::matmul_acc(g, tp.value(ib), tp.adjoint_slot(adj, ia));
                               kernels::matmul_tn_acc(g, tp.value(ia), tp.adjoint_slot(adj, ib));
                             });
}

inline Var add(const Var& a, const Var& b) {
  const Tape& t = detail::same_tape(a, b, "add");
  detail::require_same_shape(a.value(), b.value(), "add");
  Matrix out = a.value();
  const Matrix& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += bv[i];
  const std::size_t ia = a.id(), ib = b.id();
  return detail::mut(t).push(Op::add, std::move(out), {ia, ib},
                             [ia, ib](const Tape& tp, std::size_t self, std::vector<Matrix>& adj) {
                               const Matrix& g = adj[self];
                               Matrix& da = tp.adjoint_slot(adj, ia);
                               for (std::size_t i = 0; i < g.size(); ++i) da[i] += g[i];
                               Matrix& db = tp.adjoint_slot(adj, ib);
                               for (std::size_t i = 0; i < g.size(); ++i) db[i] += g[i];
                             });
}

inline Var sub(const Var& a, const Var& b) {
  const Tape& t = detail::same_tape(a, b, "sub");
  detail::require_same_shape(a.value(), b.value(), "sub");
  Matrix out = a.value();
  const Matrix& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= bv[i];
  const std::size_t ia = a.id(), ib = b.id();
  return detail::mut(t).push(Op::sub, std::move(out), {ia, ib},
                             [ia, ib](const Tape& tp, std::size_t self, std::vector<Matrix>& adj) {
                               const Matrix& g = adj[self];
                               Matrix& da = tp.adjoint_slot(adj, ia);
                               for (std::size_t i = 0; i < g.size(); ++i) da[i] += g[i];
                               Matrix& db = tp.adjoint_slot(adj, ib);
                               for (std::size_t i = 0; i < g.size(); ++i) db[i] -= g[i];
                             });
}

inline Var scale(const Var& a, double c) {
  Matrix out = a.value();
  for (double& x : out.data()) x *= c;
  const std::size_t ia = a.id();
  return detail::mut(*a.tape()).push(Op::scale, std::move(out), {ia},
                                     [ia, c](const Tape& tp, std::size_t self, std::vector<Matrix>& adj) {
                                       const Matrix& g = adj[self];
                                       Matrix& da = tp.adjoint_slot(adj, ia);
                                       for (std::size_t i = 0; i < g.size(); ++i) da[i] += c * g[i];
                                     });
}

inline Var add_const(const Var& a, double c) {
  Matrix out = a.value();
  for (double& x : out.data()) x += c;
  const std::size_t ia = a.id();
  return detail::mut(*a.tape()).push(Op::add_const, std::move(out), {ia},
                                     [ia](const Tape& tp, std::size_t self, std::vector<Matrix>& adj) {
                                       const Matrix& g = adj[self];
                                       Matrix& da = tp.adjoint_slot(adj, ia);
                                       for (std::size_t i = 0; i < g.size(); ++i) da[i] += g[i];
                                     });
}

inline Var hadamard(const Var& a, const Var& b) {
  const Tape& t = detail::same_tape(a, b, "hadamard");
  detail::require_same_shape(a.value(), b.value(), "hadamard");
  Matrix out = a.value();
  const Matrix& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= bv[i];
  const std::size_t ia = a.id(), ib = b.id();
  return detail::mut(t).push(Op::hadamard, std::move(out), {ia, ib},
                             [ia, ib](const Tape& tp, std::size_t self, std::vector<Matrix>& adj) {
                               const Matrix& g = adj[self];
                               const Matrix& av = tp.value(ia);
                               const Matrix& bv = tp.value(ib);
                               Matrix& da = tp.adjoint_slot(adj, ia);
                               for (std::size_t i = 0; i < g.size(); ++i) da[i] += g[i] * bv[i];
                               Matrix& db = tp.adjoint_slot(adj, ib);
                               for (std::size_t i = 0; i < g.size(); ++i) db[i] += g[i] * av[i];
                             });
}

// Scales every row of x elementwise by the row vector g.
inline Var mul_row(const Var& x, const Var& g) {
  const Tape& t = detail::same_tape(x, g, "mul_row");
  const Matrix& xv = x.value();
  const Matrix& gv = g.value();
  if (gv.rows() != 1 || gv.cols() != xv.cols()) {
    throw ShapeError("mul_row: shape mismatch " + xv.shape() + " vs " + gv.shape());
  }
  Matrix out = xv;
  for (std::size_t r = 0; r < out.rows(); ++r) {
    auto row = out.row(r);
    for (std::size_t c = 0; c < row.size(); ++c) row[c] *= gv[c];
  }
  const std::size_t ix = x.id(), ig = g.id();
  return detail::mut(t).push(Op::mul_row, std::move(out), {ix, ig},
                             [ix, ig](const Tape& tp, std::size_t self, std::vector<Matrix>& adj) {
                               const Matrix& g = adj[self];
                               const Matrix& xv = tp.value(ix);
                               const Matrix& gv = tp.value(ig);
                               Matrix& dx = tp.adjoint_slot(adj, ix);
                               Matrix& dg = tp.adjoint_slot(adj, ig);
                               for (std::size_t r = 0; r < g.rows(); ++r) {
                                 for (std::size_t c = 0; c < g.cols(); ++c) {
                                   dx(r, c) += g(r, c) * gv[c];
                                   dg[c] += g(r, c) * xv(r, c);
                                 }
                               }
                             });
}

// Mask entry 1 = excluded position.
inline std::vector<std::uint8_t> causal_mask(std::size_t n) {
  std::vector<std::uint8_t> m(n * n, 0);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i + 1; j < n; ++j) m[i * n + j] = 1;
  }
  return m;
}

// Row-wise softmax; excluded positions are exactly 0. An empty mask excludes nothing.
inline Var masked_softmax(const Var& x, std::vector<std::uint8_t> excluded = {}) {
  const Matrix& xv = x.value();
  if (!excluded.empty() && excluded.size() != xv.size()) {
    throw ShapeError("masked_softmax: mask length " + std::to_string(excluded.size()) +
                     " does not match " + xv.shape());
  }
  const bool masked = !excluded.empty();
  Matrix out(xv.rows(), xv.cols());
  for (std::size_t r = 0; r < xv.rows(); ++r) {
    const std::size_t base = r * xv.cols();
    double mx = -INFINITY;
    for (std::size_t c = 0; c < xv.cols(); ++c) {
      if (masked && excluded[base + c]) continue;
      mx = std::max(mx, xv(r, c));
    }
    if (mx == -INFINITY) {
      throw ShapeError("masked_softmax: row " + std::to_string(r) + " has every position masked");
    }
    double z = 0.0;
    for (std::size_t c = 0; c < xv.cols(); ++c) {
      if (masked && excluded[base + c]) continue;
      const double e = std::exp(xv(r, c) - mx);
      out(r, c) = e;
      z += e;
    }
    for (std::size_t c = 0; c < xv.cols(); ++c) out(r, c) /= z;
  }
  const std::size_t ix = x.id();
  return detail::mut(*x.tape()).push(
      Op::masked_softmax, std::move(out), {ix},
      [ix](const Tape& tp, std::size_t self, std::vector<Matrix>& adj) {
        const Matrix& g = adj[self];
        const Matrix& y = tp.value(self);
        Matrix& dx = tp.adjoint_slot(adj, ix);
        for (std::size_t r = 0; r < y.rows(); ++r) {
          double dot = 0.0;
          for (std::size_t c = 0; c < y.cols(); ++c) dot += y(r, c) * g(r, c);
          for (std::size_t c = 0; c < y.cols(); ++c) dx(r, c) += y(r, c) * (g(r, c) - dot);
        }
      });
}

// Row-wise RMS normalization without a learned scale (see mul_row).
inline Var rms_norm(const Var& x, double eps = 1e-6) {
  const Matrix& xv = x.value();
  const std::size_t n = xv.cols();
  Matrix out(xv.rows(), n);
  std::vector<double> inv_rms(xv.rows());
  for (std::size_t r = 0; r < xv.rows(); ++r) {
    double ss = 0.0;
    for (std::size_t c = 0; c < n; ++c) ss += xv(r, c) * xv(r, c);
    const double inv = 1.0 / std::sqrt(ss / static_cast<double>(n) + eps);
    inv_rms[r] = inv;
    for (std::size_t c = 0; c < n; ++c) out(r, c) = xv(r, c) * inv;
  }
  const std::size_t ix = x.id();
  return detail::mut(*x.tape()).push(
      Op::rms_norm, std::move(out), {ix},
      [ix, inv_rms = std::move(inv_rms)](const Tape& tp, std::size_t self, std::vector<Matrix>& adj) {
        const Matrix& g = adj[self];
        const Matrix& xv = tp.value(ix);
        Matrix& dx = tp.adjoint_slot(adj, ix);
        const std::size_t n = xv.cols();
        for (std::size_t r = 0; r < xv.rows(); ++r) {
          const double inv = inv_rms[r];
          double dot = 0.0;
          for (std::size_t c = 0; c < n; ++c) dot += g(r, c) * xv(r, c);
          const double k = inv * inv * inv * dot / static_cast<double>(n);
          for (std::size_t c = 0; c < n; ++c) dx(r, c) += g(r, c) * inv - xv(r, c) * k;
        }
      });
}

// tanh-approximated GELU.
inline Var gelu(const Var& x) {
  constexpr double kC = 0.7978845608028654;  // sqrt(2/pi)
  Matrix out = x.value();
  for (double& v : out.data()) {
    const double u = kC * (v + 0.044715 * v * v * v);
    v = 0.5 * v * (1.0 + std::tanh(u));
  }
  const std::size_t ix = x.id();
  return detail::mut(*x.tape()).push(
      Op::gelu, std::move(out), {ix}, [ix](const Tape& tp, std::size_t self, std::vector<Matrix>& adj) {
        const Matrix& g = adj[self];
        const Matrix& xv = tp.value(ix);
        Matrix& dx = tp.adjoint_slot(adj, ix);
        for (std::size_t i = 0; i < g.size(); ++i) {
          const double v = xv[i];
          const double u = kC * (v + 0.044715 * v * v * v);
          const double th = std::tanh(u);
          const double du = kC * (1.0 + 3.0 * 0.044715 * v * v);
          dx[i] += g[i] * (0.5 * (1.0 + th) + 0.5 * v * (1.0 - th * th) * du);
        }
      });
}

inline Var log_sigmoid(const Var& x) {
  Matrix out = x.value();
  for (double& v : out.data()) v = -(std::max(-v, 0.0) + std::log1p(std::exp(-std::abs(v))));
  const std::size_t ix = x.id();
  return detail::mut(*x.tape()).push(
      Op::log_sigmoid, std::move(out), {ix}, [ix](const Tape& tp, std::size_t self, std::vector<Matrix>& adj) {
        const Matrix& g = adj[self];
        const Matrix& xv = tp.value(ix);
        Matrix& dx = tp.adjoint_slot(adj, ix);
        for (std::size_t i = 0; i < g.size(); ++i) dx[i] += g[i] * detail::sigmoid(-xv[i]);
      });
}

// max(0, x)
inline Var hinge(const Var& x) {
  Matrix out = x.value();
  for (double& v : out.data()) v = v > 0.0 ? v : 0.0;
  const std::size_t ix = x.id();
  return detail::mut(*x.tape()).push(
      Op::hinge, std::move(out), {ix}, [ix](const Tape& tp, std::size_t self, std::vector<Matrix>& adj) {
        const Matrix& g = adj[self];
        const Matrix& xv = tp.value(ix);
        Matrix& dx = tp.adjoint_slot(adj, ix);
        for (std::size_t i = 0; i < g.size(); ++i) {
          if (xv[i] > 0.0) dx[i] += g[i];
        }
      });
}

inline Var sum(const Var& x) {
  double s = 0.0;
  for (double v : x.value().data()) s += v;
  const std::size_t ix = x.id();
  return detail::mut(*x.tape()).push(Op::sum, Matrix::scalar(s), {ix},
                                     [ix](const Tape& tp, std::size_t self, std::vector<Matrix>& adj) {
                                       const double g = adj[self][0];
                                       for (double& d : tp.adjoint_slot(adj, ix).data()) d += g;
                                     });
}

inline Var mean(const Var& x) {
  const Matrix& xv = x.value();
  if (xv.empty()) throw ShapeError("mean: empty input");
  double s = 0.0;
  for (double v : xv.data()) s += v;
  const double n = static_cast<double>(xv.size());
  const std::size_t ix = x.id();
  return detail::mut(*x.tape()).push(Op::mean, Matrix::scalar(s / n), {ix},
                                     [ix, n](const Tape& tp, std::size_t self, std::vector<Matrix>& adj) {
                                       const double g = adj[self][0] / n;
                                       for (double& d : tp.adjoint_slot(adj, ix).data()) d += g;
                                     });
}

// Population variance over all entries.
inline Var variance(const Var& x) {
  const Matrix& xv = x.value();
  if (xv.empty()) throw ShapeError("variance: empty input");
  const double n = static_cast<double>(xv.size());
  double mu = 0.0;
  for (double v : xv.data()) mu += v;
  mu /= n;
  double var = 0.0;
  for (double v : xv.data()) var += (v - mu) * (v - mu);
  var /= n;
  const std::size_t ix = x.id();
  return detail::mut(*x.tape()).push(
      Op::variance, Matrix::scalar(var), {ix},
      [ix, mu, n](const Tape& tp, std::size_t self, std::vector<Matrix>& adj) {
        const double g = adj[self][0];
        const Matrix& xv = tp.value(ix);
        Matrix& dx = tp.adjoint_slot(adj, ix);
        for (std::size_t i = 0; i < xv.size(); ++i) dx[i] += g * 2.0 * (xv[i] - mu) / n;
      });
}

// Shannon entropy (natural log) with 0 log 0 = 0.
inline Var entropy(const Var& p) {
  double h = 0.0;
  for (double v : p.value().data()) {
    if (v < 0.0) throw NumericError("entropy: negative probability " + std::to_string(v));
    if (v > 0.0) h -= v * std::log(v);
  }
  const std::size_t ip = p.id();
  return detail::mut(*p.tape()).push(Op::entropy, Matrix::scalar(h), {ip},
                                     [ip](const Tape& tp, std::size_t self, std::vector<Matrix>& adj) {
                                       const double g = adj[self][0];
                                       const Matrix& pv = tp.value(ip);
                                       Matrix& dp = tp.adjoint_slot(adj, ip);
                                       for (std::size_t i = 0; i < pv.size(); ++i) {
                                         if (pv[i] > 0.0) dp[i] += -g * (std::log(pv[i]) + 1.0);
                                       }
                                     });
}

inline Var l2_squared(const Var& x) {
  double s = 0.0;
  for (double v : x.value().data()) s += v * v;
  const std::size_t ix = x.id();
  return detail::mut(*x.tape()).push(Op::l2_squared, Matrix::scalar(s), {ix},
                                     [ix](const Tape& tp, std::size_t self, std::vector<Matrix>& adj) {
                                       const double g = adj[self][0];
                                       const Matrix& xv = tp.value(ix);
                                       Matrix& dx = tp.adjoint_slot(adj, ix);
                                       for (std::size_t i = 0; i < xv.size(); ++i) dx[i] += 2.0 * g * xv[i];
                                     });
}

inline Var gather_rows(const Var& table, std::vector<std::size_t> ids) {
  const Matrix& tv = table.value();
  Matrix out(ids.size(), tv.cols());
  for (std::size_t r = 0; r < ids.size(); ++r) {
    if (ids[r] >= tv.rows()) {
      throw ShapeError("gather_rows: index " + std::to_string(ids[r]) + " out of range for " + tv.shape());
    }
    std::copy_n(tv.row(ids[r]).data(), tv.cols(), out.row(r).data());
  }
  const std::size_t it = table.id();
  Tape& tape = detail::mut(*table.tape());
  std::vector<std::size_t> read;
  if (tape.recording()) read = ids;
  const Var v = tape.push(Op::gather_rows, std::move(out), {it},
            [it, ids = std::move(ids)](const Tape& tp, std::size_t self, std::vector<Matrix>& adj) {
              const Matrix& g = adj[self];
              Matrix& dt = tp.adjoint_slot(adj, it);
              for (std::size_t r = 0; r < ids.size(); ++r) {
                auto dst = dt.row(ids[r]);
                auto src = g.row(r);
                for (std::size_t c = 0; c < src.size(); ++c) dst[c] += src[c];
              }
            });
  tape.set_rows_read(v.id(), std::move(read));
  return v;
}

inline Var slice_cols(const Var& x, std::size_t begin, std::size_t count) {
  const Matrix& xv = x.value();
  if (begin + count > xv.cols()) {
    throw ShapeError("slice_cols: columns [" + std::to_string(begin) + ", " + std::to_string(begin + count) +
                     ") out of range for " + xv.shape());
  }
  Matrix out(xv.rows(), count);
  for (std::size_t r = 0; r < xv.rows(); ++r) std::copy_n(xv.row(r).data() + begin, count, out.row(r).data());
  const std::size_t ix = x.id();
  return detail::mut(*x.tape()).push(
      Op::slice_cols, std::move(out), {ix},
      [ix, begin, count](const Tape& tp, std::size_t self, std::vector<Matrix>& adj) {
        const Matrix& g = adj[self];
        Matrix& dx = tp.adjoint_slot(adj, ix);
        for (std::size_t r = 0; r < g.rows(); ++r) {
          for (std::size_t c = 0; c < count; ++c) dx(r, begin + c) += g(r, c);
        }
      });
}

inline Var concat_cols(std::span<const Var> parts) {
  if (parts.empty()) throw ShapeError("concat_cols: no inputs");
  const std::size_t rows = parts.front().value().rows();
  std::size_t cols = 0;
  std::vector<std::size_t> ids;
  for (const Var& p : parts) {
    detail::same_tape(parts.front(), p, "concat_cols");
    if (p.value().rows() != rows) {
      throw ShapeError("concat_cols: shape mismatch " + parts.front().value().shape() + " vs " + p.value().shape());
    }
    cols += p.value().cols();
    ids.push_back(p.id());
  }
  Matrix out(rows, cols);
  std::size_t off = 0;
  for (const Var& p : parts) {
    const Matrix& pv = p.value();
    for (std::size_t r = 0; r < rows; ++r) std::copy_n(pv.row(r).data(), pv.cols(), out.row(r).data() + off);
    off += pv.cols();
  }
  std::vector<std::size_t> parents = ids;
  return detail::mut(*parts.front().tape())
      .push(Op::concat_cols, std::move(out), std::move(parents),
            [ids](const Tape& tp, std::size_t self, std::vector<Matrix>& adj) {
              const Matrix& g = adj[self];
              std::size_t off = 0;
              for (std::size_t id : ids) {
                Matrix& d = tp.adjoint_slot(adj, id);
                for (std::size_t r = 0; r < d.rows(); ++r) {
                  for (std::size_t c = 0; c < d.cols(); ++c) d(r, c) += g(r, off + c);
                }
                off += d.cols();
              }
            });
}

// Mean of rows [row_begin, row_end) as a 1 x cols vector.
inline Var row_mean(const Var& x, std::size_t row_begin, std::size_t row_end) {
  const Matrix& xv = x.value();
  if (row_begin >= row_end || row_end > xv.rows()) {
    throw ShapeError("row_mean: rows [" + std::to_string(row_begin) + ", " + std::to_string(row_end) +
                     ") invalid for " + xv.shape());
  }
  const double n = static_cast<double>(row_end - row_begin);
  Matrix out(1, xv.cols());
  for (std::size_t r = row_begin; r < row_end; ++r) {
    for (std::size_t c = 0; c < xv.cols(); ++c) out[c] += xv(r, c);
  }
  for (double& v : out.data()) v /= n;
  const std::size_t ix = x.id();
  return detail::mut(*x.tape()).push(
      Op::row_mean, std::move(out), {ix},
      [ix, row_begin, row_end, n](const Tape& tp, std::size_t self, std::vector<Matrix>& adj) {
        const Matrix& g = adj[self];
        Matrix& dx = tp.adjoint_slot(adj, ix);
        for (std::size_t r = row_begin; r < row_end; ++r) {
          for (std::size_t c = 0; c < g.cols(); ++c) dx(r, c) += g[c] / n;
        }
      });
}

// Sum of entries [begin, end) of a row vector.
inline Var range_sum(const Var& x, std::size_t begin, std::size_t end) {
  const Matrix& xv = x.value();
  detail::require_row_vector(xv, "range_sum");
  if (begin > end || end > xv.cols()) {
    throw ShapeError("range_sum: range [" + std::to_string(begin) + ", " + std::to_string(end) +
                     ") invalid for " + xv.shape());
  }
  double s = 0.0;
  for (std::size_t c = begin; c < end; ++c) s += xv[c];
  const std::size_t ix = x.id();
  return detail::mut(*x.tape()).push(Op::range_sum, Matrix::scalar(s), {ix},
                                     [ix, begin, end](const Tape& tp, std::size_t self, std::vector<Matrix>& adj) {
                                       const double g = adj[self][0];
                                       Matrix& dx = tp.adjoint_slot(adj, ix);
                                       for (std::size_t c = begin; c < end; ++c) dx[c] += g;
                                     });
}

// Packs scalars into a 1 x n vector.
inline Var stack(std::span<const Var> scalars) {
  if (scalars.empty()) throw ShapeError("stack: no inputs");
  Matrix out(1, scalars.size());
  std::vector<std::size_t> ids;
  ids.reserve(scalars.size());
  for (std::size_t i = 0; i < scalars.size(); ++i) {
    detail::same_tape(scalars.front(), scalars[i], "stack");
    out[i] = scalars[i].item();
    ids.push_back(scalars[i].id());
  }
  std::vector<std::size_t> parents = ids;
  return detail::mut(*scalars.front().tape())
      .push(Op::stack, std::move(out), std::move(parents),
            [ids](const Tape& tp, std::size_t self, std::vector<Matrix>& adj) {
              const Matrix& g = adj[self];
              for (std::size_t i = 0; i < ids.size(); ++i) tp.adjoint_slot(adj, ids[i])[0] += g[i];
            });
}

// Picks entries of a row vector by index.
inline Var select(const Var& x, std::vector<std::size_t> indices) {
  const Matrix& xv = x.value();
  detail::require_row_vector(xv, "select");
  if (indices.empty()) throw ShapeError("select: empty index list");
  Matrix out(1, indices.size());
  for (std::size_t i = 0; i < indices.size(); ++i) {
    if (indices[i] >= xv.cols()) {
      throw ShapeError("select: index " + std::to_string(indices[i]) + " out of range for " + xv.shape());
    }
    out[i] = xv[indices[i]];
  }
  const std::size_t ix = x.id();
  return detail::mut(*x.tape()).push(
      Op::select, std::move(out), {ix},
      [ix, indices = std::move(indices)](const Tape& tp, std::size_t self, std::vector<Matrix>& adj) {
        const Matrix& g = adj[self];
        Matrix& dx = tp.adjoint_slot(adj, ix);
        for (std::size_t i = 0; i < indices.size(); ++i) dx[indices[i]] += g[i];
      });
}

inline Var operator+(const Var& a, const Var& b) { return add(a, b); }
inline Var operator-(const Var& a, const Var& b) { return sub(a, b); }
inline Var operator*(const Var& a, double c) { return scale(a, c); }

// ---------------------------------------------------------------------------
// Gradient checking

using LossBuilder = std::function<Var(Tape&, std::span<const Var>)>;

struct FiniteDifferenceReport {
  double max_relative_error = 0.0;
  std::vector<double> per_param_max;  // one entry per parameter matrix
  std::size_t worst_param = 0;
  std::size_t worst_entry = 0;
  std::size_t probes = 0;
  // Probes of entries the loss never reads: no path to the root, or a table row
  // no gather touches. Their central difference is exactly zero without
  // evaluating, so the analytic entry must be exactly zero as well.
  std::size_t unread_probes = 0;
};

// Compares reverse-mode gradients of `loss` against central differences,
// entry by entry: |analytic - numeric| / (|numeric| + 1e-8).
inline FiniteDifferenceReport finite_difference_check(const LossBuilder& loss, std::vector<Matrix> params,
                                                      double step) {
  if (!(step > 0.0) || !std::isfinite(step)) {
    throw ConfigError("finite_difference_check: step must be positive, got " + std::to_string(step));
  }
  std::vector<Matrix> analytic;
  std::vector<bool> whole(params.size(), false);
  std::vector<std::vector<bool>> live_rows;
  for (const Matrix& p : params) live_rows.emplace_back(p.rows(), false);
  {
    Tape tape;
    std::vector<Var> vars;
    vars.reserve(params.size());
    for (const Matrix& p : params) vars.push_back(tape.leaf(p));
    const Var root = loss(tape, vars);
    const Gradients grads = tape.backward(root);
    for (const Var& v : vars) analytic.push_back(grads[v]);
    // Parents always precede children, so one backward sweep marks every
    // node the root depends on. A parameter row is live when some such node
    // reads the whole matrix or gathers that row.
    std::vector<bool> reaches(root.id() + 1, false);
    reaches[root.id()] = true;
    std::vector<std::size_t> param_of(root.id() + 1, params.size());
    for (std::size_t i = 0; i < vars.size(); ++i) {
      if (vars[i].id() <= root.id()) param_of[vars[i].id()] = i;
    }
    if (param_of[root.id()] < params.size()) whole[param_of[root.id()]] = true;
    for (std::size_t id = root.id() + 1; id-- > 0;) {
      if (!reaches[id]) continue;
      const auto ps = tape.parents(id);
      for (std::size_t k = 0; k < ps.size(); ++k) {
        reaches[ps[k]] = true;
        const std::size_t pi = param_of[ps[k]];
        if (pi == params.size()) continue;
        if (tape.op(id) == Op::gather_rows && k == 0) {
          for (std::size_t r : tape.rows_read(id)) live_rows[pi][r] = true;
        } else {
          whole[pi] = true;
        }
      }
    }
  }
  auto is_live = [&](std::size_t pi, std::size_t ei) {
    return whole[pi] || live_rows[pi][ei / params[pi].cols()];
  };

  auto evaluate = [&](std::size_t pi, std::size_t ei) {
    Tape tape(false);
    std::vector<Var> vars;
    vars.reserve(params.size());
    for (const Matrix& p : params) vars.push_back(tape.leaf(p));
    double value = 0.0;
    try {
      value = loss(tape, vars).item();
    } catch (const NumericError& e) {
      throw NumericError("non-finite loss while probing parameter " + std::to_string(pi) + " entry " +
                         std::to_string(ei) + ": " + e.what());
    }
    if (!std::isfinite(value)) {
      throw NumericError("non-finite loss while probing parameter " + std::to_string(pi) + " entry " +
                         std::to_string(ei));
    }
    return value;
  };

  FiniteDifferenceReport report;
  report.per_param_max.assign(params.size(), 0.0);
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    for (std::size_t ei = 0; ei < params[pi].size(); ++ei) {
      double numeric = 0.0;
      if (is_live(pi, ei)) {
        const double original = params[pi][ei];
        params[pi][ei] = original + step;
        const double up = evaluate(pi, ei);
        params[pi][ei] = original - step;
        const double down = evaluate(pi, ei);
        params[pi][ei] = original;
        numeric = (up - down) / (2.0 * step);
      } else {
        ++report.unread_probes;
      }
      const double rel = std::abs(analytic[pi][ei] - numeric) / (std::abs(numeric) + 1e-8);
      ++report.probes;
      report.per_param_max[pi] = std::max(report.per_param_max[pi], rel);
      if (rel > report.max_relative_error) {
        report.max_relative_error = rel;
        report.worst_param = pi;
        report.worst_entry = ei;
      }
    }
  }
  return report;
}

}  // namespace headrank::ad
