// Reverse-mode autodiff over dense double matrices.
//
// Forward evaluation is eager: every op computes its output when recorded, so
// re-running a construction yields bit-identical values (no reordering, no
// hidden state). gradient() walks the tape backwards once and accumulates
// adjoints for the requested leaves.
#pragma once

#include <array>
#include <cmath>
#include <functional>
#include <limits>
#include <span>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "vtc/tensor.hpp"

namespace vtc {

enum class Op {
  leaf,
  matmul,
  add,
  mul,
  softmax_row,
  log_sigmoid,
  sum,
  mean,
  squared_norm,
  slice,
  concat,
  clip_pass,
  rms_norm_row,
};

struct TapeNode {
  Op op = Op::leaf;
  int a = -1;
  int b = -1;
  Tensor out;
  bool needs_grad = false;
  // op-specific metadata
  bool trans_a = false, trans_b = false;  // matmul
  double lo = 0.0, hi = 0.0;              // clip_pass
  double eps = 0.0;                       // rms_norm_row
  int axis = 0;                           // concat: 0 stacks rows, 1 stacks cols
  std::vector<int> gather;                // slice: flat indices into parent
};

inline double log_sigmoid_scalar(double x) {
  // -log(1 + e^{ -x }) computed on the non-overflowing branch
  return x >= 0.0 ? -std::log1p(std::exp(-x)) : x - std::log1p(std::exp(x));
}

inline double sigmoid_scalar(double x) {
  return x >= 0.0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
}

class Tape {
 public:
  int leaf(Tensor t, bool needs_grad = false) {
    TapeNode n;
    n.op = Op::leaf;
    n.out = std::move(t);
    n.needs_grad = needs_grad;
    return push(std::move(n));
  }

  int constant(double x) { return leaf(Tensor::scalar(x), false); }

  int matmul(int a, int b, bool ta = false, bool tb = false) {
    const Tensor& A = val(a);
    const Tensor& B = val(b);
    const int ac = ta ? A.rows : A.cols;
    const int br = tb ? B.cols : B.rows;
    if (ac != br) fail_shape("matmul", a, b);
    TapeNode n = binary(Op::matmul, a, b);
    n.trans_a = ta;
    n.trans_b = tb;
    matmul_into(A, B, ta, tb, n.out);
    return push(std::move(n));
  }

  int add(int a, int b) {
    const Tensor& A = val(a);
    const Tensor& B = val(b);
    if (!A.same_shape(B)) fail_shape("add", a, b);
    TapeNode n = binary(Op::add, a, b);
    n.out = A;
    for (size_t k = 0; k < B.numel(); ++k) n.out.v[k] += B.v[k];
    return push(std::move(n));
  }

  int mul(int a, int b) {
    const Tensor& A = val(a);
    const Tensor& B = val(b);
    if (!A.same_shape(B)) fail_shape("mul", a, b);
    TapeNode n = binary(Op::mul, a, b);
    n.out = A;
    for (size_t k = 0; k < B.numel(); ++k) n.out.v[k] *= B.v[k];
    return push(std::move(n));
  }

  // Elementwise multiply by a compile-time constant (constant leaf, no grad).
  int scale(int a, double c) {
    const Tensor& A = val(a);
    return mul(a, leaf(Tensor::full(A.rows, A.cols, c), false));
  }

  int neg(int a) { return scale(a, -1.0); }

  int sub(int a, int b) { return add(a, neg(b)); }

  // Row-wise softmax with max subtraction.
  int softmax_row(int a) {
    const Tensor& A = val(a);
    TapeNode n = unary(Op::softmax_row, a);
    n.out = Tensor(A.rows, A.cols);
    for (int i = 0; i < A.rows; ++i) {
      double mx = -std::numeric_limits<double>::infinity();
      for (int j = 0; j < A.cols; ++j) mx = std::max(mx, A.at(i, j));
      double z = 0.0;
      for (int j = 0; j < A.cols; ++j) {
        const double e = std::exp(A.at(i, j) - mx);
        n.out.at(i, j) = e;
        z += e;
      }
      for (int j = 0; j < A.cols; ++j) n.out.at(i, j) /= z;
    }
    return push(std::move(n));
  }

  int log_sigmoid(int a) {
    const Tensor& A = val(a);
    TapeNode n = unary(Op::log_sigmoid, a);
    n.out = Tensor(A.rows, A.cols);
    for (size_t k = 0; k < A.numel(); ++k) n.out.v[k] = log_sigmoid_scalar(A.v[k]);
    return push(std::move(n));
  }

  // softplus(x) = -log_sigmoid(-x); smooth everywhere, used as the FFN nonlinearity.
  int softplus(int a) { return neg(log_sigmoid(neg(a))); }

  int sum(int a) {
    TapeNode n = unary(Op::sum, a);
    double s = 0.0;
    for (double x : val(a).v) s += x;
    n.out = Tensor::scalar(s);
    return push(std::move(n));
  }

  int mean(int a) {
    const Tensor& A = val(a);
    if (A.empty()) fail_shape("mean", a, -1);
    TapeNode n = unary(Op::mean, a);
    double s = 0.0;
    for (double x : A.v) s += x;
    n.out = Tensor::scalar(s / static_cast<double>(A.numel()));
    return push(std::move(n));
  }

  int squared_norm(int a) {
    TapeNode n = unary(Op::squared_norm, a);
    double s = 0.0;
    for (double x : val(a).v) s += x * x;
    n.out = Tensor::scalar(s);
    return push(std::move(n));
  }

  // Gather arbitrary flat indices of the parent into an out_rows x out_cols
  // tensor. Duplicate indices are allowed; their adjoints accumulate.
  int slice(int a, std::vector<int> flat, int out_rows, int out_cols) {
    const Tensor& A = val(a);
    if (flat.size() != static_cast<size_t>(out_rows) * out_cols)
      fail_shape("slice", a, -1);
    for (int ix : flat)
      if (ix < 0 || static_cast<size_t>(ix) >= A.numel()) fail_shape("slice", a, -1);
    TapeNode n = unary(Op::slice, a);
    n.gather = std::move(flat);
    n.out = Tensor(out_rows, out_cols);
    for (size_t k = 0; k < n.gather.size(); ++k) n.out.v[k] = A.v[n.gather[k]];
    return push(std::move(n));
  }

  // Contiguous row block [r0, r1).
  int slice_rows(int a, int r0, int r1) {
    const Tensor& A = val(a);
    if (r0 < 0 || r1 > A.rows || r0 >= r1) fail_shape("slice", a, -1);
    std::vector<int> flat;
    flat.reserve(static_cast<size_t>(r1 - r0) * A.cols);
    for (int i = r0; i < r1; ++i)
      for (int j = 0; j < A.cols; ++j) flat.push_back(i * A.cols + j);
    return slice(a, std::move(flat), r1 - r0, A.cols);
  }

  // Contiguous column block [c0, c1).
  int slice_cols(int a, int c0, int c1) {
    const Tensor& A = val(a);
    if (c0 < 0 || c1 > A.cols || c0 >= c1) fail_shape("slice", a, -1);
    std::vector<int> flat;
    flat.reserve(static_cast<size_t>(A.rows) * (c1 - c0));
    for (int i = 0; i < A.rows; ++i)
      for (int j = c0; j < c1; ++j) flat.push_back(i * A.cols + j);
    return slice(a, std::move(flat), A.rows, c1 - c0);
  }

  // Select whole rows by index (in the given order).
  int gather_rows(int a, const std::vector<int>& rows) {
    const Tensor& A = val(a);
    std::vector<int> flat;
    flat.reserve(rows.size() * A.cols);
    for (int r : rows) {
      if (r < 0 || r >= A.rows) fail_shape("slice", a, -1);
      for (int j = 0; j < A.cols; ++j) flat.push_back(r * A.cols + j);
    }
    return slice(a, std::move(flat), static_cast<int>(rows.size()), A.cols);
  }

  int concat(int a, int b, int axis) {
    const Tensor& A = val(a);
    const Tensor& B = val(b);
    TapeNode n = binary(Op::concat, a, b);
    n.axis = axis;
    if (axis == 0) {
      if (A.cols != B.cols) fail_shape("concat", a, b);
      n.out = Tensor(A.rows + B.rows, A.cols);
      std::copy(A.v.begin(), A.v.end(), n.out.v.begin());
      std::copy(B.v.begin(), B.v.end(), n.out.v.begin() + A.numel());
    } else if (axis == 1) {
      if (A.rows != B.rows) fail_shape("concat", a, b);
      n.out = Tensor(A.rows, A.cols + B.cols);
      for (int i = 0; i < A.rows; ++i) {
        for (int j = 0; j < A.cols; ++j) n.out.at(i, j) = A.at(i, j);
        for (int j = 0; j < B.cols; ++j) n.out.at(i, A.cols + j) = B.at(i, j);
      }
    } else {
      fail_shape("concat", a, b);
    }
    return push(std::move(n));
  }

  // Clamp to [lo, hi] with a straight-through gradient: identity where the
  // input lies inside the interval, zero outside.
  int clip_pass(int a, double lo, double hi) {
    if (!(lo <= hi)) fail_shape("clip_pass", a, -1);
    const Tensor& A = val(a);
    TapeNode n = unary(Op::clip_pass, a);
    n.lo = lo;
    n.hi = hi;
    n.out = A;
    for (double& x : n.out.v) x = std::min(hi, std::max(lo, x));
    return push(std::move(n));
  }

  // y_ij = x_ij * g_j / sqrt(mean_j(x_ij^2) + eps); g is a 1 x cols scale.
  int rms_norm_row(int x, int g, double eps = 1e-6) {
    const Tensor& X = val(x);
    const Tensor& G = val(g);
    if (G.rows != 1 || G.cols != X.cols) fail_shape("rms_norm_row", x, g);
    TapeNode n = binary(Op::rms_norm_row, x, g);
    n.eps = eps;
    n.out = Tensor(X.rows, X.cols);
    for (int i = 0; i < X.rows; ++i) {
      double m = 0.0;
      for (int j = 0; j < X.cols; ++j) m += X.at(i, j) * X.at(i, j);
      m = m / X.cols + eps;
      const double inv = 1.0 / std::sqrt(m);
      for (int j = 0; j < X.cols; ++j) n.out.at(i, j) = X.at(i, j) * G.at(0, j) * inv;
    }
    return push(std::move(n));
  }

  const Tensor& val(int id) const {
    check_id(id);
    return nodes_[id].out;
  }

  const TapeNode& node(int id) const {
    check_id(id);
    return nodes_[id];
  }

  size_t size() const { return nodes_.size(); }

  // Adjoints of `loss` (must be scalar) for each id in `wrt`. Ids not reached
  // by the backward sweep come back as zero tensors of the leaf's shape.
  std::unordered_map<int, Tensor> gradient(int loss, std::span<const int> wrt) const {
    check_id(loss);
    if (nodes_[loss].out.numel() != 1)
      throw std::invalid_argument("tape node " + std::to_string(loss) +
                                  ": gradient of non-scalar loss rejected (" +
                                  nodes_[loss].out.shape_str() + ")");
    std::vector<Tensor> adj(nodes_.size());
    adj[loss] = Tensor::scalar(1.0);
    for (int id = loss; id >= 0; --id) {
      const TapeNode& n = nodes_[id];
      if (adj[id].empty() || !n.needs_grad || n.op == Op::leaf) continue;
      backprop(n, adj[id], adj);
    }
    std::unordered_map<int, Tensor> out;
    for (int id : wrt) {
      check_id(id);
      if (out.find(id) != out.end()) continue;
      if (adj[id].empty())
        out[id] = Tensor(nodes_[id].out.rows, nodes_[id].out.cols);
      else
        out[id] = std::move(adj[id]);
    }
    return out;
  }

  Tensor gradient_single(int loss, int wrt) const {
    const std::array<int, 1> ids{wrt};
    return gradient(loss, ids).at(wrt);
  }

 private:
  std::vector<TapeNode> nodes_;

  void check_id(int id) const {
    if (id < 0 || static_cast<size_t>(id) >= nodes_.size())
      throw std::out_of_range("tape: bad node id " + std::to_string(id));
  }

  TapeNode unary(Op op, int a) {
    check_id(a);
    TapeNode n;
    n.op = op;
    n.a = a;
    n.needs_grad = nodes_[a].needs_grad;
    return n;
  }

  TapeNode binary(Op op, int a, int b) {
    check_id(a);
    check_id(b);
    TapeNode n;
    n.op = op;
    n.a = a;
    n.b = b;
    n.needs_grad = nodes_[a].needs_grad || nodes_[b].needs_grad;
    return n;
  }

  [[noreturn]] void fail_shape(const char* op, int a, int b) const {
    std::string msg = "tape node " + std::to_string(nodes_.size()) + ": " + op +
                      " shape mismatch";
    if (a >= 0 && static_cast<size_t>(a) < nodes_.size())
      msg += " a=" + nodes_[a].out.shape_str();
    if (b >= 0 && static_cast<size_t>(b) < nodes_.size())
      msg += " b=" + nodes_[b].out.shape_str();
    throw std::invalid_argument(msg);
  }

  int push(TapeNode n) {
    nodes_.push_back(std::move(n));
    return static_cast<int>(nodes_.size()) - 1;
  }

  static void accumulate(Tensor& dst, const Tensor& src) {
    if (dst.empty()) dst = Tensor(src.rows, src.cols);
    for (size_t k = 0; k < src.numel(); ++k) dst.v[k] += src.v[k];
  }

  void backprop(const TapeNode& n, const Tensor& u, std::vector<Tensor>& adj) const {
    auto parent_needs = [&](int id) { return id >= 0 && nodes_[id].needs_grad; };
    switch (n.op) {
      case Op::leaf:
        break;
      case Op::matmul: {
        const Tensor& A = nodes_[n.a].out;
        const Tensor& B = nodes_[n.b].out;
        Tensor g;
        if (parent_needs(n.a)) {
          // dA for C = op(A) op(B)
          if (!n.trans_a && !n.trans_b) matmul_into(u, B, false, true, g);
          else if (n.trans_a && !n.trans_b) matmul_into(B, u, false, true, g);
          else if (!n.trans_a && n.trans_b) matmul_into(u, B, false, false, g);
          else matmul_into(B, u, true, true, g);
          accumulate(adj[n.a], g);
        }
        if (parent_needs(n.b)) {
          if (!n.trans_a && !n.trans_b) matmul_into(A, u, true, false, g);
          else if (n.trans_a && !n.trans_b) matmul_into(A, u, false, false, g);
          else if (!n.trans_a && n.trans_b) matmul_into(u, A, true, false, g);
          else matmul_into(u, A, true, true, g);
          accumulate(adj[n.b], g);
        }
        break;
      }
      case Op::add:
        if (parent_needs(n.a)) accumulate(adj[n.a], u);
        if (parent_needs(n.b)) accumulate(adj[n.b], u);
        break;
      case Op::mul: {
        const Tensor& A = nodes_[n.a].out;
        const Tensor& B = nodes_[n.b].out;
        if (parent_needs(n.a)) {
          Tensor g(u.rows, u.cols);
          for (size_t k = 0; k < u.numel(); ++k) g.v[k] = u.v[k] * B.v[k];
          accumulate(adj[n.a], g);
        }
        if (parent_needs(n.b)) {
          Tensor g(u.rows, u.cols);
          for (size_t k = 0; k < u.numel(); ++k) g.v[k] = u.v[k] * A.v[k];
          accumulate(adj[n.b], g);
        }
        break;
      }
      case Op::softmax_row: {
        if (!parent_needs(n.a)) break;
        const Tensor& Y = n.out;
        Tensor g(Y.rows, Y.cols);
        for (int i = 0; i < Y.rows; ++i) {
          double dot = 0.0;
          for (int j = 0; j < Y.cols; ++j) dot += u.at(i, j) * Y.at(i, j);
          for (int j = 0; j < Y.cols; ++j)
            g.at(i, j) = Y.at(i, j) * (u.at(i, j) - dot);
        }
        accumulate(adj[n.a], g);
        break;
      }
      case Op::log_sigmoid: {
        if (!parent_needs(n.a)) break;
        const Tensor& X = nodes_[n.a].out;
        Tensor g(X.rows, X.cols);
        for (size_t k = 0; k < X.numel(); ++k)
          g.v[k] = u.v[k] * sigmoid_scalar(-X.v[k]);
        accumulate(adj[n.a], g);
        break;
      }
      case Op::sum: {
        if (!parent_needs(n.a)) break;
        const Tensor& X = nodes_[n.a].out;
        accumulate(adj[n.a], Tensor::full(X.rows, X.cols, u.item()));
        break;
      }
      case Op::mean: {
        if (!parent_needs(n.a)) break;
        const Tensor& X = nodes_[n.a].out;
        accumulate(adj[n.a],
                   Tensor::full(X.rows, X.cols, u.item() / static_cast<double>(X.numel())));
        break;
      }
      case Op::squared_norm: {
        if (!parent_needs(n.a)) break;
        const Tensor& X = nodes_[n.a].out;
        Tensor g(X.rows, X.cols);
        const double s = 2.0 * u.item();
        for (size_t k = 0; k < X.numel(); ++k) g.v[k] = s * X.v[k];
        accumulate(adj[n.a], g);
        break;
      }
      case Op::slice: {
        if (!parent_needs(n.a)) break;
        const Tensor& X = nodes_[n.a].out;
        if (adj[n.a].empty()) adj[n.a] = Tensor(X.rows, X.cols);
        for (size_t k = 0; k < n.gather.size(); ++k)
          adj[n.a].v[n.gather[k]] += u.v[k];
        break;
      }
      case Op::concat: {
        const Tensor& A = nodes_[n.a].out;
        const Tensor& B = nodes_[n.b].out;
        if (n.axis == 0) {
          if (parent_needs(n.a)) {
            Tensor g(A.rows, A.cols);
            std::copy(u.v.begin(), u.v.begin() + A.numel(), g.v.begin());
            accumulate(adj[n.a], g);
          }
          if (parent_needs(n.b)) {
            Tensor g(B.rows, B.cols);
            std::copy(u.v.begin() + A.numel(), u.v.end(), g.v.begin());
            accumulate(adj[n.b], g);
          }
        } else {
          if (parent_needs(n.a)) {
            Tensor g(A.rows, A.cols);
            for (int i = 0; i < A.rows; ++i)
              for (int j = 0; j < A.cols; ++j) g.at(i, j) = u.at(i, j);
            accumulate(adj[n.a], g);
          }
          if (parent_needs(n.b)) {
            Tensor g(B.rows, B.cols);
            for (int i = 0; i < B.rows; ++i)
              for (int j = 0; j < B.cols; ++j) g.at(i, j) = u.at(i, A.cols + j);
            accumulate(adj[n.b], g);
          }
        }
        break;
      }
      case Op::clip_pass: {
        if (!parent_needs(n.a)) break;
        const Tensor& X = nodes_[n.a].out;
        Tensor g(X.rows, X.cols);
        for (size_t k = 0; k < X.numel(); ++k)
          g.v[k] = (X.v[k] >= n.lo && X.v[k] <= n.hi) ? u.v[k] : 0.0;
        accumulate(adj[n.a], g);
        break;
      }
      case Op::rms_norm_row: {
        const Tensor& X = nodes_[n.a].out;
        const Tensor& G = nodes_[n.b].out;
        const int d = X.cols;
        Tensor gx, gg;
        if (parent_needs(n.a)) gx = Tensor(X.rows, X.cols);
        if (parent_needs(n.b)) gg = Tensor(1, d);
        for (int i = 0; i < X.rows; ++i) {
          double m = 0.0;
          for (int j = 0; j < d; ++j) m += X.at(i, j) * X.at(i, j);
          m = m / d + n.eps;
          const double r = std::sqrt(m);
          if (parent_needs(n.a)) {
            double s = 0.0;
            for (int j = 0; j < d; ++j) s += u.at(i, j) * G.at(0, j) * X.at(i, j);
            const double c = s / (d * r * r * r);
            for (int j = 0; j < d; ++j)
              gx.at(i, j) = u.at(i, j) * G.at(0, j) / r - X.at(i, j) * c;
          }
          if (parent_needs(n.b))
            for (int j = 0; j < d; ++j) gg.at(0, j) += u.at(i, j) * X.at(i, j) / r;
        }
        if (parent_needs(n.a)) accumulate(adj[n.a], gx);
        if (parent_needs(n.b)) accumulate(adj[n.b], gg);
        break;
      }
    }
  }
};

// Max over entries of |analytic - central difference| / max(|analytic|, 1e-8).
// f(x) returns the loss value and its analytic gradient w.r.t. x.
inline double finite_difference_check(
    const std::function<std::pair<double, Tensor>(const Tensor&)>& f,
    const Tensor& at, double step) {
  if (!(step > 0.0) || step > 1e-2)
    throw std::invalid_argument("finite_difference_check: step must be in (0, 1e-2]");
  const Tensor analytic = f(at).second;
  if (!analytic.same_shape(at))
    throw std::invalid_argument("finite_difference_check: gradient shape mismatch");
  double worst = 0.0;
  Tensor x = at;
  for (size_t k = 0; k < at.numel(); ++k) {
    const double keep = x.v[k];
    x.v[k] = keep + step;
    const double up = f(x).first;
    x.v[k] = keep - step;
    const double dn = f(x).first;
    x.v[k] = keep;
    const double numeric = (up - dn) / (2.0 * step);
    const double rel = std::abs(analytic.v[k] - numeric) /
                       std::max(std::abs(analytic.v[k]), 1e-8);
    worst = std::max(worst, rel);
  }
  return worst;
}

}  // namespace vtc
