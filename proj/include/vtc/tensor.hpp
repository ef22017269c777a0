// Dense row-major matrix of doubles. Scalars are 1x1, vectors 1xN.
#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace vtc {

struct Tensor {
  int rows = 0;
  int cols = 0;
  std::vector<double> v;

  Tensor() = default;
  Tensor(int r, int c) : rows(r), cols(c), v(static_cast<size_t>(r) * c, 0.0) {
    if (r < 0 || c < 0) throw std::invalid_argument("tensor: negative dimension");
  }

  static Tensor zeros(int r, int c) { return Tensor(r, c); }
  static Tensor full(int r, int c, double x) {
    Tensor t(r, c);
    for (double& e : t.v) e = x;
    return t;
  }
  static Tensor scalar(double x) { return full(1, 1, x); }
  static Tensor row(std::vector<double> x) {
    Tensor t;
    t.rows = 1;
    t.cols = static_cast<int>(x.size());
    t.v = std::move(x);
    return t;
  }

  size_t numel() const { return v.size(); }
  bool empty() const { return v.empty(); }
  bool same_shape(const Tensor& o) const { return rows == o.rows && cols == o.cols; }

  double& at(int i, int j) { return v[static_cast<size_t>(i) * cols + j]; }
  double at(int i, int j) const { return v[static_cast<size_t>(i) * cols + j]; }
  double& operator[](size_t k) { return v[k]; }
  double operator[](size_t k) const { return v[k]; }

  double item() const {
    if (numel() != 1) throw std::logic_error("tensor: item() on non-scalar");
    return v[0];
  }

  std::string shape_str() const {
    return std::to_string(rows) + "x" + std::to_string(cols);
  }
};

inline Tensor transpose(const Tensor& a) {
  Tensor t(a.cols, a.rows);
  for (int i = 0; i < a.rows; ++i)
    for (int j = 0; j < a.cols; ++j) t.at(j, i) = a.at(i, j);
  return t;
}

// out = op(a) * op(b); inner dimensions must already be validated by the caller.
// Transposed operands are materialized once; the hot path (no transpose) copies nothing.
inline void matmul_into(const Tensor& a, const Tensor& b, bool ta, bool tb, Tensor& out) {
  Tensor At, Bt;
  const Tensor* pa = &a;
  const Tensor* pb = &b;
  if (ta) { At = transpose(a); pa = &At; }
  if (tb) { Bt = transpose(b); pb = &Bt; }
  const int m = pa->rows, k = pa->cols, n = pb->cols;
  out = Tensor(m, n);
  for (int i = 0; i < m; ++i) {
    double* orow = &out.v[static_cast<size_t>(i) * n];
    const double* arow = &pa->v[static_cast<size_t>(i) * k];
    for (int p = 0; p < k; ++p) {
      const double av = arow[p];
      if (av == 0.0) continue;
      const double* brow = &pb->v[static_cast<size_t>(p) * n];
      for (int j = 0; j < n; ++j) orow[j] += av * brow[j];
    }
  }
}

inline void add_scaled_into(Tensor& dst, const Tensor& src, double scale) {
  if (dst.empty()) dst = Tensor(src.rows, src.cols);
  for (size_t k = 0; k < src.numel(); ++k) dst.v[k] += scale * src.v[k];
}

}  // namespace vtc
