#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "lipshift/error.hpp"

namespace lipshift {

/// Compute precision. Checkpoints always store 32-bit floats.
using real = double;

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>{});
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

/// Dense row-major array. A rank-0 tensor (empty shape) holds one scalar.
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(Shape shape, real fill = real{0}) : shape_(std::move(shape)) {
    check_dims();
    data_.assign(numel(shape_), fill);
  }

  Tensor(Shape shape, std::vector<real> data) : shape_(std::move(shape)), data_(std::move(data)) {
    check_dims();
    if (data_.size() != numel(shape_)) {
      throw DimensionError("tensor data length " + std::to_string(data_.size()) +
                           " does not match shape " + shape_str(shape_));
    }
  }

  static Tensor scalar(real v) { return Tensor(Shape{}, std::vector<real>{v}); }

  static Tensor from_rows(std::initializer_list<std::initializer_list<real>> rows) {
    const std::size_t r = rows.size();
    const std::size_t c = r ? rows.begin()->size() : 0;
    std::vector<real> d;
    d.reserve(r * c);
    for (const auto& row : rows) {
      if (row.size() != c) throw DimensionError("ragged rows in from_rows");
      d.insert(d.end(), row.begin(), row.end());
    }
    return Tensor({r, c}, std::move(d));
  }

  static Tensor vector(std::initializer_list<real> v) {
    return Tensor({v.size()}, std::vector<real>(v));
  }

  static Tensor identity(std::size_t n) {
    Tensor t({n, n});
    for (std::size_t i = 0; i < n; ++i) t.data_[i * n + i] = 1;
    return t;
  }

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t dim(std::size_t i) const { return shape_.at(i); }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return shape_.empty() && data_.empty(); }

  std::span<real> data() noexcept { return data_; }
  std::span<const real> data() const noexcept { return data_; }
  const std::vector<real>& vec() const noexcept { return data_; }

  real& operator[](std::size_t i) { return data_[i]; }
  real operator[](std::size_t i) const { return data_[i]; }

  real& at(std::size_t i, std::size_t j) { return data_[i * shape_[1] + j]; }
  real at(std::size_t i, std::size_t j) const { return data_[i * shape_[1] + j]; }

  real item() const {
    if (data_.size() != 1) throw ContractError("item() on tensor of shape " + shape_str(shape_));
    return data_[0];
  }

  Tensor reshaped(Shape shape) const {
    if (numel(shape) != data_.size()) {
      throw DimensionError("cannot reshape " + shape_str(shape_) + " to " + shape_str(shape));
    }
    return Tensor(std::move(shape), data_);
  }

  bool all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](real v) { return std::isfinite(v); });
  }

  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

 private:
  void check_dims() const {
    for (auto d : shape_) {
      if (d == 0) throw DimensionError("zero-sized dimension in shape " + shape_str(shape_));
    }
  }

  Shape shape_;
  std::vector<real> data_;
};

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
  }
}

// ---------------------------------------------------------------------------
// Raw kernels. None of these mutate their inputs.

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
    throw DimensionError("matmul: incompatible shapes " + shape_str(a.shape()) + " and " +
                         shape_str(b.shape()));
  }
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  Tensor c({m, n});
  const real* A = a.data().data();
  const real* B = b.data().data();
  real* C = c.data().data();
  for (std::size_t i = 0; i < m; ++i) {
    real* crow = C + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const real av = A[i * k + p];
      if (av == 0) continue;
      const real* brow = B + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
  return c;
}

/// a^T b without materializing the transpose.
inline Tensor matmul_tn(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(0) != b.dim(0)) {
    throw DimensionError("matmul_tn: incompatible shapes " + shape_str(a.shape()) + " and " +
                         shape_str(b.shape()));
  }
  const std::size_t k = a.dim(0), m = a.dim(1), n = b.dim(1);
  Tensor c({m, n});
  const real* A = a.data().data();
  const real* B = b.data().data();
  real* C = c.data().data();
  for (std::size_t p = 0; p < k; ++p) {
    const real* brow = B + p * n;
    for (std::size_t i = 0; i < m; ++i) {
      const real av = A[p * m + i];
      if (av == 0) continue;
      real* crow = C + i * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
  return c;
}

/// a b^T without materializing the transpose.
inline Tensor matmul_nt(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(1)) {
    throw DimensionError("matmul_nt: incompatible shapes " + shape_str(a.shape()) + " and " +
                         shape_str(b.shape()));
  }
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(0);
  Tensor c({m, n});
  const real* A = a.data().data();
  const real* B = b.data().data();
  real* C = c.data().data();
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      real s = 0;
      for (std::size_t p = 0; p < k; ++p) s += A[i * k + p] * B[j * k + p];
      C[i * n + j] = s;
    }
  }
  return c;
}

inline Tensor transpose(const Tensor& a) {
  if (a.rank() != 2) throw DimensionError("transpose: expected rank 2, got " + shape_str(a.shape()));
  const std::size_t r = a.dim(0), c = a.dim(1);
  Tensor t({c, r});
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) t[j * r + i] = a[i * c + j];
  return t;
}

inline real dot(const Tensor& a, const Tensor& b) {
  if (a.size() != b.size()) throw DimensionError("dot: size mismatch");
  real s = 0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

inline real norm2(const Tensor& a) { return std::sqrt(dot(a, a)); }

/// out = a + alpha * b
inline Tensor axpy(const Tensor& a, real alpha, const Tensor& b) {
  require_same_shape(a, b, "axpy");
  Tensor out = a;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += alpha * b[i];
  return out;
}

inline Tensor scaled(const Tensor& a, real s) {
  Tensor out = a;
  for (auto& v : out.data()) v *= s;
  return out;
}

enum class ElementwiseKind { add, sub, mul, div };

inline Tensor elementwise(const Tensor& a, const Tensor& b, ElementwiseKind kind) {
  require_same_shape(a, b, "elementwise");
  Tensor out(a.shape());
  for (std::size_t i = 0; i < a.size(); ++i) {
    switch (kind) {
      case ElementwiseKind::add: out[i] = a[i] + b[i]; break;
      case ElementwiseKind::sub: out[i] = a[i] - b[i]; break;
      case ElementwiseKind::mul: out[i] = a[i] * b[i]; break;
      case ElementwiseKind::div: out[i] = a[i] / b[i]; break;
    }
  }
  return out;
}

enum class ReduceKind { sum, mean, max };

/// Bookkeeping for a reduction: maps every input element to its output slot.
struct ReducePlan {
  Shape out_shape;
  std::vector<std::size_t> out_index;  // per input element
  std::size_t count = 1;               // elements folded into each output
};

inline ReducePlan plan_reduce(const Shape& shape, std::vector<std::size_t> axes) {
  std::sort(axes.begin(), axes.end());
  axes.erase(std::unique(axes.begin(), axes.end()), axes.end());
  for (auto ax : axes) {
    if (ax >= shape.size()) {
      throw DimensionError("reduce: axis " + std::to_string(ax) + " invalid for shape " +
                           shape_str(shape));
    }
  }
  std::vector<bool> reduced(shape.size(), false);
  for (auto ax : axes) reduced[ax] = true;

  ReducePlan plan;
  for (std::size_t d = 0; d < shape.size(); ++d) {
    if (reduced[d]) plan.count *= shape[d];
    else plan.out_shape.push_back(shape[d]);
  }
  const std::size_t n = numel(shape);
  plan.out_index.resize(n);
  std::vector<std::size_t> idx(shape.size(), 0);
  for (std::size_t flat = 0; flat < n; ++flat) {
    std::size_t o = 0;
    for (std::size_t d = 0; d < shape.size(); ++d) {
      if (!reduced[d]) o = o * shape[d] + idx[d];
    }
    plan.out_index[flat] = o;
    for (std::size_t d = shape.size(); d-- > 0;) {
      if (++idx[d] < shape[d]) break;
      idx[d] = 0;
    }
  }
  return plan;
}

/// Reduces over `axes` (removed from the result). For max, `argmax` receives the flat
/// input index chosen for each output; ties resolve to the first index.
inline Tensor reduce(const Tensor& a, ReduceKind kind, const std::vector<std::size_t>& axes,
                     std::vector<std::size_t>* argmax = nullptr) {
  const ReducePlan plan = plan_reduce(a.shape(), axes);
  Tensor out(plan.out_shape);
  const std::size_t n_out = out.size();
  if (kind == ReduceKind::max) {
    std::vector<bool> seen(n_out, false);
    std::vector<std::size_t> arg(n_out, 0);
    for (std::size_t i = 0; i < a.size(); ++i) {
      const std::size_t o = plan.out_index[i];
      if (!seen[o] || a[i] > out[o]) {
        out[o] = a[i];
        arg[o] = i;
        seen[o] = true;
      }
    }
    if (argmax) *argmax = std::move(arg);
    return out;
  }
  for (std::size_t i = 0; i < a.size(); ++i) out[plan.out_index[i]] += a[i];
  if (kind == ReduceKind::mean) {
    for (auto& v : out.data()) v /= static_cast<real>(plan.count);
  }
  return out;
}

inline std::vector<std::size_t> all_axes(const Tensor& a) {
  std::vector<std::size_t> axes(a.rank());
  std::iota(axes.begin(), axes.end(), std::size_t{0});
  return axes;
}

/// General axis permutation: out.shape[i] = in.shape[perm[i]].
inline Tensor permute(const Tensor& a, const std::vector<std::size_t>& perm) {
  const auto& in = a.shape();
  if (perm.size() != in.size()) throw DimensionError("permute: rank mismatch");
  Shape out_shape(in.size());
  for (std::size_t i = 0; i < perm.size(); ++i) out_shape[i] = in.at(perm[i]);
  std::vector<std::size_t> in_stride(in.size(), 1);
  for (std::size_t d = in.size(); d-- > 1;) in_stride[d - 1] = in_stride[d] * in[d];
  Tensor out(out_shape);
  std::vector<std::size_t> idx(in.size(), 0);
  for (std::size_t flat = 0; flat < out.size(); ++flat) {
    std::size_t src = 0;
    for (std::size_t d = 0; d < idx.size(); ++d) src += idx[d] * in_stride[perm[d]];
    out[flat] = a[src];
    for (std::size_t d = idx.size(); d-- > 0;) {
      if (++idx[d] < out_shape[d]) break;
      idx[d] = 0;
    }
  }
  return out;
}

inline std::vector<std::size_t> inverse_permutation(const std::vector<std::size_t>& perm) {
  std::vector<std::size_t> inv(perm.size());
  for (std::size_t i = 0; i < perm.size(); ++i) inv[perm[i]] = i;
  return inv;
}

}  // namespace lipshift
