#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "m2m/errors.hpp"

namespace m2m {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_size(const Shape& dims) {
  return std::accumulate(dims.begin(), dims.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& dims) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < dims.size(); ++i) os << (i ? "," : "") << dims[i];
  os << ')';
  return os.str();
}

// Dense float64 tensor, 1 to 5 axes, row-major with the last axis fastest.
// A scalar is a tensor of dims (1).
class Tensor {
 public:
  static constexpr std::size_t kMaxRank = 5;

  Tensor() : dims_{1}, data_(1, 0.0) {}

  explicit Tensor(Shape dims) : dims_(std::move(dims)) {
    check_rank();
    data_.assign(shape_size(dims_), 0.0);
  }

  Tensor(Shape dims, std::vector<double> data) : dims_(std::move(dims)), data_(std::move(data)) {
    check_rank();
    if (shape_size(dims_) != data_.size())
      throw ShapeError("tensor data length " + std::to_string(data_.size()) +
                       " does not match dims " + shape_str(dims_));
  }

  static Tensor zeros(Shape dims) { return Tensor(std::move(dims)); }

  static Tensor filled(Shape dims, double v) {
    Tensor t(std::move(dims));
    std::fill(t.data_.begin(), t.data_.end(), v);
    return t;
  }

  static Tensor scalar(double v) { return Tensor({1}, {v}); }

  // Rank-2 tensor from nested rows; all rows must share a length.
  static Tensor matrix(std::initializer_list<std::initializer_list<double>> rows) {
    const std::size_t r = rows.size();
    const std::size_t c = r ? rows.begin()->size() : 0;
    std::vector<double> data;
    data.reserve(r * c);
    for (const auto& row : rows) {
      if (row.size() != c) throw ShapeError("ragged matrix literal");
      data.insert(data.end(), row.begin(), row.end());
    }
    return Tensor({r, c}, std::move(data));
  }

  static Tensor vector(std::vector<double> values) {
    const std::size_t n = values.size();
    return Tensor({n}, std::move(values));
  }

  const Shape& dims() const { return dims_; }
  std::size_t rank() const { return dims_.size(); }
  std::size_t dim(std::size_t axis) const { return dims_.at(axis); }
  std::size_t size() const { return data_.size(); }
  bool is_scalar() const { return data_.size() == 1; }

  std::span<double> data() { return data_; }
  std::span<const double> data() const { return data_; }
  const std::vector<double>& values() const { return data_; }

  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }

  double& at(std::size_t r, std::size_t c) { return data_[r * dims_[1] + c]; }
  double at(std::size_t r, std::size_t c) const { return data_[r * dims_[1] + c]; }

  std::span<double> row(std::size_t r) {
    const std::size_t c = dims_.back();
    return std::span<double>(data_).subspan(r * c, c);
  }
  std::span<const double> row(std::size_t r) const {
    const std::size_t c = dims_.back();
    return std::span<const double>(data_).subspan(r * c, c);
  }

  double item() const {
    if (!is_scalar()) throw ContractError("item() on non-scalar tensor " + shape_str(dims_));
    return data_[0];
  }

  Tensor reshaped(Shape dims) const {
    if (shape_size(dims) != data_.size())
      throw ShapeError("cannot reshape " + shape_str(dims_) + " to " + shape_str(dims));
    return Tensor(std::move(dims), data_);
  }

  bool all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
  }

  Tensor& operator+=(const Tensor& o) {
    require_same(o, "+=");
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += o.data_[i];
    return *this;
  }

  Tensor& operator*=(double s) {
    for (double& v : data_) v *= s;
    return *this;
  }

  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.dims_ == b.dims_ && a.data_ == b.data_;
  }

 private:
  void check_rank() const {
    if (dims_.empty() || dims_.size() > kMaxRank)
      throw ShapeError("tensor rank must be 1..5, got " + std::to_string(dims_.size()));
  }
  void require_same(const Tensor& o, const char* op) const {
    if (dims_ != o.dims_)
      throw ShapeError(std::string("shape mismatch in ") + op + ": " + shape_str(dims_) + " vs " +
                       shape_str(o.dims_));
  }

  Shape dims_;
  std::vector<double> data_;
};

inline double max_abs_diff(const Tensor& a, const Tensor& b) {
  if (a.dims() != b.dims()) throw ShapeError("max_abs_diff on " + shape_str(a.dims()) + " vs " +
                                             shape_str(b.dims()));
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

// Plain (untaped) kernels shared by the autograd ops and used directly by tests.
namespace kernels {

inline void require_rank2(const Tensor& t, const char* op) {
  if (t.rank() != 2)
    throw ShapeError(std::string(op) + " expects a rank-2 tensor, got " + shape_str(t.dims()));
}

// out = a (n,k) · b (k,m)
inline Tensor matmul(const Tensor& a, const Tensor& b) {
  require_rank2(a, "matmul");
  require_rank2(b, "matmul");
  const std::size_t n = a.dim(0), k = a.dim(1), m = b.dim(1);
  if (b.dim(0) != k)
    throw ShapeError("matmul inner dims differ: " + shape_str(a.dims()) + " x " +
                     shape_str(b.dims()));
  Tensor out({n, m});
  const double* pa = a.data().data();
  const double* pb = b.data().data();
  double* po = out.data().data();
  for (std::size_t i = 0; i < n; ++i) {
    double* orow = po + i * m;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = pa[i * k + p];
      if (av == 0.0) continue;
      const double* brow = pb + p * m;
      for (std::size_t j = 0; j < m; ++j) orow[j] += av * brow[j];
    }
  }
  return out;
}

// out = a (n,k) · b(m,k)^T
inline Tensor matmul_nt(const Tensor& a, const Tensor& b) {
  require_rank2(a, "matmul_nt");
  require_rank2(b, "matmul_nt");
  const std::size_t n = a.dim(0), k = a.dim(1), m = b.dim(0);
  if (b.dim(1) != k)
    throw ShapeError("matmul_nt inner dims differ: " + shape_str(a.dims()) + " x " +
                     shape_str(b.dims()) + "^T");
  Tensor out({n, m});
  const double* pa = a.data().data();
  const double* pb = b.data().data();
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < m; ++j) {
      double s = 0.0;
      for (std::size_t p = 0; p < k; ++p) s += pa[i * k + p] * pb[j * k + p];
      out.at(i, j) = s;
    }
  }
  return out;
}

// out = a(k,n)^T · b (k,m)
inline Tensor matmul_tn(const Tensor& a, const Tensor& b) {
  require_rank2(a, "matmul_tn");
  require_rank2(b, "matmul_tn");
  const std::size_t k = a.dim(0), n = a.dim(1), m = b.dim(1);
  if (b.dim(0) != k)
    throw ShapeError("matmul_tn inner dims differ: " + shape_str(a.dims()) + "^T x " +
                     shape_str(b.dims()));
  Tensor out({n, m});
  const double* pa = a.data().data();
  const double* pb = b.data().data();
  double* po = out.data().data();
  for (std::size_t p = 0; p < k; ++p) {
    for (std::size_t i = 0; i < n; ++i) {
      const double av = pa[p * n + i];
      if (av == 0.0) continue;
      double* orow = po + i * m;
      const double* brow = pb + p * m;
      for (std::size_t j = 0; j < m; ++j) orow[j] += av * brow[j];
    }
  }
  return out;
}

inline Tensor transpose(const Tensor& a) {
  require_rank2(a, "transpose");
  const std::size_t n = a.dim(0), m = a.dim(1);
  Tensor out({m, n});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < m; ++j) out.at(j, i) = a.at(i, j);
  return out;
}

// Row-wise softmax with per-row max subtraction.
inline Tensor softmax_rows(const Tensor& m) {
  require_rank2(m, "softmax_rows");
  Tensor out(m.dims());
  const std::size_t cols = m.dim(1);
  for (std::size_t r = 0; r < m.dim(0); ++r) {
    auto in = m.row(r);
    auto o = out.row(r);
    const double mx = *std::max_element(in.begin(), in.end());
    double z = 0.0;
    for (std::size_t c = 0; c < cols; ++c) {
      o[c] = std::exp(in[c] - mx);
      z += o[c];
    }
    for (std::size_t c = 0; c < cols; ++c) o[c] /= z;
  }
  return out;
}

inline double gelu(double x) { return 0.5 * x * (1.0 + std::erf(x / std::sqrt(2.0))); }

// d/dx of the exact-erf GELU: Phi(x) + x * phi(x).
inline double gelu_grad(double x) {
  constexpr double kInvSqrt2Pi = 0.39894228040143267794;
  const double cdf = 0.5 * (1.0 + std::erf(x / std::sqrt(2.0)));
  return cdf + x * kInvSqrt2Pi * std::exp(-0.5 * x * x);
}

inline Tensor gelu(const Tensor& x) {
  Tensor out(x.dims());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = gelu(x[i]);
  return out;
}

}  // namespace kernels

inline Tensor softmax_rows(const Tensor& m) { return kernels::softmax_rows(m); }
inline Tensor gelu(const Tensor& x) { return kernels::gelu(x); }

}  // namespace m2m
