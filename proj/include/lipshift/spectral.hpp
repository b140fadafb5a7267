#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <utility>

#include "lipshift/random.hpp"
#include "lipshift/tensor.hpp"

namespace lipshift {

/// A linear map between tensor spaces together with its adjoint.
struct LinearOperator {
  std::function<Tensor(const Tensor&)> apply;
  std::function<Tensor(const Tensor&)> apply_transpose;
  Shape input_shape;
  Shape output_shape;
};

/// x -> M x for a matrix M of shape [r, c], acting on vectors of length c.
inline LinearOperator matrix_operator(Tensor m) {
  if (m.rank() != 2) throw DimensionError("matrix_operator: expected a matrix, got " + shape_str(m.shape()));
  const std::size_t r = m.dim(0), c = m.dim(1);
  auto shared = std::make_shared<const Tensor>(std::move(m));
  return LinearOperator{
      [shared, c](const Tensor& x) { return matmul(*shared, x.reshaped({c, 1})).reshaped({shared->dim(0)}); },
      [shared, r](const Tensor& u) { return matmul_tn(*shared, u.reshaped({r, 1})).reshaped({shared->dim(1)}); },
      Shape{c},
      Shape{r},
  };
}

struct SigmaEstimate {
  real value = 0;
  int iterations_used = 0;
  bool converged = false;
  real tolerance = 0;
  Tensor right_vector;  // last normalized input-space iterate
};

struct PowerIterationOptions {
  int max_iters = 100;
  real tol = 1e-6;
  std::uint64_t seed = 0x5eed;
};

/// Multiplier applied to a power-iteration estimate when a certified bound is needed but
/// the iteration did not converge.
inline constexpr real kSafetyFactor = 1.001;

/// Largest singular value of `op` by alternating apply / apply_transpose. `start`, when
/// given, warm-starts the iteration instead of a seeded random direction.
inline SigmaEstimate power_iteration(const LinearOperator& op, const PowerIterationOptions& opt = {},
                                     const Tensor* start = nullptr) {
  if (opt.max_iters < 1) throw ContractError("power_iteration: max_iters must be >= 1");
  if (!(opt.tol > 0)) throw ContractError("power_iteration: tol must be > 0");

  Tensor v;
  if (start && start->shape() == op.input_shape && norm2(*start) > 0) {
    v = scaled(*start, 1 / norm2(*start));
  } else {
    Rng rng(opt.seed);
    v = random_unit(op.input_shape, rng);
  }

  SigmaEstimate est;
  est.tolerance = opt.tol;
  real prev = -1;
  for (int it = 1; it <= opt.max_iters; ++it) {
    Tensor u = op.apply(v);
    if (u.shape() != op.output_shape) {
      throw DimensionError("power_iteration: operator produced " + shape_str(u.shape()) + ", expected " +
                           shape_str(op.output_shape));
    }
    const real sigma = norm2(u);
    est.iterations_used = it;
    if (sigma == 0) {
      est.value = 0;
      est.converged = true;
      est.right_vector = v;
      return est;
    }
    est.value = sigma;
    est.right_vector = v;
    if (prev > 0 && std::abs(sigma - prev) <= opt.tol * sigma) {
      est.converged = true;
      return est;
    }
    prev = sigma;
    Tensor w = op.apply_transpose(u);
    if (w.shape() != op.input_shape) {
      throw DimensionError("power_iteration: adjoint produced " + shape_str(w.shape()) + ", expected " +
                           shape_str(op.input_shape));
    }
    const real wn = norm2(w);
    if (wn == 0) {
      est.converged = true;
      return est;
    }
    v = scaled(w, 1 / wn);
  }
  return est;
}

/// Symmetric eigenvalues by cyclic Jacobi rotations.
inline std::vector<real> jacobi_eigenvalues(Tensor a, int max_sweeps = 100) {
  const std::size_t n = a.dim(0);
  for (int sweep = 0; sweep < max_sweeps; ++sweep) {
    real off = 0, diag = 0;
    for (std::size_t i = 0; i < n; ++i) {
      diag += a.at(i, i) * a.at(i, i);
      for (std::size_t j = i + 1; j < n; ++j) off += a.at(i, j) * a.at(i, j);
    }
    if (off <= 1e-30 * (diag + 1e-300)) break;
    for (std::size_t p = 0; p < n; ++p) {
      for (std::size_t q = p + 1; q < n; ++q) {
        const real apq = a.at(p, q);
        if (apq == 0) continue;
        const real theta = (a.at(q, q) - a.at(p, p)) / (2 * apq);
        const real t = (theta >= 0 ? 1 : -1) / (std::abs(theta) + std::sqrt(theta * theta + 1));
        const real c = 1 / std::sqrt(t * t + 1);
        const real s = t * c;
        for (std::size_t k = 0; k < n; ++k) {
          const real akp = a.at(k, p), akq = a.at(k, q);
          a.at(k, p) = c * akp - s * akq;
          a.at(k, q) = s * akp + c * akq;
        }
        for (std::size_t k = 0; k < n; ++k) {
          const real apk = a.at(p, k), aqk = a.at(q, k);
          a.at(p, k) = c * apk - s * aqk;
          a.at(q, k) = s * apk + c * aqk;
        }
      }
    }
  }
  std::vector<real> eig(n);
  for (std::size_t i = 0; i < n; ++i) eig[i] = a.at(i, i);
  return eig;
}

/// Exact largest singular value from the eigenvalues of m^T m. Test-scale only.
inline real svd_oracle(const Tensor& m) {
  if (m.rank() != 2) throw DimensionError("svd_oracle: expected a matrix, got " + shape_str(m.shape()));
  if (m.size() > 65536) throw ContractError("svd_oracle: matrix of " + std::to_string(m.size()) + " entries exceeds 65536");
  const auto eig = jacobi_eigenvalues(matmul_tn(m, m));
  real top = 0;
  for (auto e : eig) top = std::max(top, e);
  return std::sqrt(top);
}

/// Explicit matrix of `op`: column i is apply(e_i).
inline Tensor materialize(const LinearOperator& op) {
  const std::size_t in = numel(op.input_shape);
  const std::size_t out = numel(op.output_shape);
  if (in > 4096) throw ContractError("materialize: input dimension " + std::to_string(in) + " exceeds 4096");
  Tensor m({out, in});
  Tensor e(op.input_shape);
  for (std::size_t i = 0; i < in; ++i) {
    e[i] = 1;
    const Tensor col = op.apply(e);
    if (col.size() != out) throw DimensionError("materialize: operator output size mismatch");
    for (std::size_t r = 0; r < out; ++r) m.at(r, i) = col[r];
    e[i] = 0;
  }
  return m;
}

/// Gaussian matrix divided by its largest singular value, so the map starts 1-Lipschitz.
inline Tensor spectral_normalized_init(std::size_t rows, std::size_t cols, std::uint64_t seed) {
  if (rows == 0 || cols == 0) throw DimensionError("spectral_normalized_init: empty shape");
  Rng rng(seed);
  Tensor w = randn({rows, cols}, rng);
  const auto est = power_iteration(matrix_operator(w), {.max_iters = 5000, .tol = 1e-13, .seed = seed ^ 0xabcdef});
  return scaled(w, 1 / est.value);
}

}  // namespace lipshift
