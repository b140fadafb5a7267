#pragma once

// Independent reference computations used only by the tests.

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <vector>

#include "lipshift/autodiff.hpp"
#include "lipshift/data.hpp"
#include "lipshift/random.hpp"

namespace lipshift::oracle {

inline real rel_err(real a, real b, real floor = 1e-6) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), floor});
}

struct GradCheck {
  real max_rel_err = 0;
  std::size_t checked = 0;
};

/// Central differences of a scalar function of one input tensor against the tape
/// gradient. `f` builds the scalar on the given tape from the given leaf.
inline GradCheck check_input_gradient(const Tensor& x0, const std::function<Var(Tape&, Var)>& f, real h = 1e-5) {
  Tape tape;
  Var x = tape.leaf(x0);
  Var y = f(tape, x);
  tape.backward(y);
  const Tensor g = tape.grad(x.id);
  GradCheck out;
  for (std::size_t i = 0; i < x0.size(); ++i) {
    Tensor xp = x0, xm = x0;
    xp[i] += h;
    xm[i] -= h;
    Tape tp, tm;
    const real fp = f(tp, tp.leaf(xp)).value().item();
    const real fm = f(tm, tm.leaf(xm)).value().item();
    out.max_rel_err = std::max(out.max_rel_err, rel_err(g[i], (fp - fm) / (2 * h)));
    ++out.checked;
  }
  return out;
}

/// Same for parameters. `loss` must not mutate anything but the tape. With `stride` > 1
/// only every stride-th coordinate of each tensor is perturbed.
inline GradCheck check_param_gradients(const std::vector<Parameter*>& params, const std::function<Var(Tape&)>& loss,
                                       real h = 1e-5, std::size_t stride = 1) {
  for (auto* p : params) p->zero_grad();
  {
    Tape tape;
    tape.backward(loss(tape));
    tape.commit_param_grads();
  }
  GradCheck out;
  for (auto* p : params) {
    for (std::size_t i = 0; i < p->value.size(); i += std::max<std::size_t>(1, stride)) {
      const real keep = p->value[i];
      p->value[i] = keep + h;
      Tape tp;
      const real fp = loss(tp).value().item();
      p->value[i] = keep - h;
      Tape tm;
      const real fm = loss(tm).value().item();
      p->value[i] = keep;
      out.max_rel_err = std::max(out.max_rel_err, rel_err(p->grad[i], (fp - fm) / (2 * h)));
      ++out.checked;
    }
  }
  return out;
}

/// Softmax cross-entropy by the textbook formula, mean over rows.
inline real cross_entropy(const Tensor& z, const std::vector<int>& labels) {
  const std::size_t n = z.dim(0), m = z.dim(1);
  real total = 0;
  for (std::size_t i = 0; i < n; ++i) {
    real mx = z.at(i, 0);
    for (std::size_t j = 1; j < m; ++j) mx = std::max(mx, z.at(i, j));
    real s = 0;
    for (std::size_t j = 0; j < m; ++j) s += std::exp(z.at(i, j) - mx);
    total += std::log(s) + mx - z.at(i, static_cast<std::size_t>(labels[i]));
  }
  return total / static_cast<real>(n);
}

/// Nearest-centroid classifier fitted on `train`; returns accuracy on `test` and, per test
/// sample, the l2 distance to the bisecting hyperplane of the two closest centroids.
struct CentroidFit {
  real accuracy = 0;
  std::vector<real> boundary_distance;
};

inline CentroidFit nearest_centroid(const Dataset& train, const Dataset& test) {
  const std::size_t k = train.sample_size(), m = train.num_classes;
  std::vector<std::vector<real>> c(m, std::vector<real>(k, 0));
  std::vector<std::size_t> count(m, 0);
  for (std::size_t i = 0; i < train.size(); ++i) {
    const auto y = static_cast<std::size_t>(train.labels[i]);
    ++count[y];
    for (std::size_t q = 0; q < k; ++q) c[y][q] += train.pixels[i * k + q];
  }
  for (std::size_t y = 0; y < m; ++y)
    for (auto& v : c[y]) v /= static_cast<real>(std::max<std::size_t>(1, count[y]));
  CentroidFit fit;
  std::size_t ok = 0;
  for (std::size_t i = 0; i < test.size(); ++i) {
    std::vector<real> d(m, 0);
    for (std::size_t y = 0; y < m; ++y)
      for (std::size_t q = 0; q < k; ++q) {
        const real diff = test.pixels[i * k + q] - c[y][q];
        d[y] += diff * diff;
      }
    const auto best = static_cast<std::size_t>(std::min_element(d.begin(), d.end()) - d.begin());
    ok += static_cast<int>(best) == test.labels[i];
    real margin = std::numeric_limits<real>::infinity();
    for (std::size_t j = 0; j < m; ++j) {
      if (j == best) continue;
      real sep = 0;
      for (std::size_t q = 0; q < k; ++q) sep += (c[best][q] - c[j][q]) * (c[best][q] - c[j][q]);
      // (d_j - d_best) / (2 |c_best - c_j|) is the distance to the bisector
      margin = std::min(margin, (d[j] - d[best]) / (2 * std::sqrt(sep)));
    }
    fit.boundary_distance.push_back(margin);
  }
  fit.accuracy = static_cast<real>(ok) / static_cast<real>(test.size());
  return fit;
}

/// Empirical Lipschitz ratio ||f(x) - f(y)|| / ||x - y|| over random pairs.
inline real max_pair_ratio(const std::function<Tensor(const Tensor&)>& f, const Shape& shape, std::size_t pairs, Rng& rng,
                           real scale = 1) {
  real worst = 0;
  for (std::size_t p = 0; p < pairs; ++p) {
    const Tensor x = randn(shape, rng, scale);
    Tensor y = x;
    // mix of near and far pairs
    const real r = (p % 2) ? scale : scale * 1e-3;
    const Tensor d = randn(shape, rng, r);
    for (std::size_t i = 0; i < y.size(); ++i) y[i] += d[i];
    const Tensor fx = f(x), fy = f(y);
    real num = 0, den = 0;
    for (std::size_t i = 0; i < fx.size(); ++i) num += (fx[i] - fy[i]) * (fx[i] - fy[i]);
    for (std::size_t i = 0; i < d.size(); ++i) den += d[i] * d[i];
    if (den > 0) worst = std::max(worst, std::sqrt(num / den));
  }
  return worst;
}

}  // namespace lipshift::oracle
