#pragma once

#include <cmath>
#include <cstdint>
#include <iostream>
#include <memory>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "lipshift/autodiff.hpp"
#include "lipshift/random.hpp"
#include "lipshift/spectral.hpp"

namespace lipshift {

/// Forward-pass context. `seed` drives drop masks in training mode only.
struct ForwardMode {
  bool training = false;
  std::uint64_t seed = 0;
};

struct LayerBound {
  real value = 0;
  bool converged = true;
  int iterations = 0;
};

/// FNV-1a; a stable per-layer seed for power iteration call sites.
inline std::uint64_t stable_hash(std::string_view s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

// ---------------------------------------------------------------------------
// Kernels on batched channels-last tensors [N, H, W, C]. Each linear kernel has an
// adjoint, used both for backward and for power iteration.

namespace kernels {

struct Nhwc {
  std::size_t n, h, w, c;
};

inline Nhwc nhwc(const Shape& s, const char* who) {
  if (s.size() != 4) throw DimensionError(std::string(who) + ": expected [N,H,W,C], got " + shape_str(s));
  return {s[0], s[1], s[2], s[3]};
}

/// Channel group g in [0,4): 0 left, 1 right, 2 up, 3 down. out[h][w] = in[h+dh][w+dw].
inline void shift_offsets(std::size_t group, int& dh, int& dw) {
  static constexpr int kDh[4] = {0, 0, 1, -1};
  static constexpr int kDw[4] = {1, -1, 0, 0};
  dh = kDh[group];
  dw = kDw[group];
}

inline Tensor shift(const Tensor& x, std::size_t group_size, bool adjoint) {
  const auto d = nhwc(x.shape(), "shift");
  if (4 * group_size > d.c) throw DimensionError("shift: 4 groups of " + std::to_string(group_size) + " exceed " + std::to_string(d.c) + " channels");
  Tensor out(x.shape());
  for (std::size_t n = 0; n < d.n; ++n)
    for (std::size_t i = 0; i < d.h; ++i)
      for (std::size_t j = 0; j < d.w; ++j)
        for (std::size_t c = 0; c < d.c; ++c) {
          const std::size_t dst = ((n * d.h + i) * d.w + j) * d.c + c;
          if (c >= 4 * group_size) {
            out[dst] = x[dst];
            continue;
          }
          int dh, dw;
          shift_offsets(c / group_size, dh, dw);
          if (adjoint) {
            dh = -dh;
            dw = -dw;
          }
          const long si = static_cast<long>(i) + dh, sj = static_cast<long>(j) + dw;
          if (si < 0 || sj < 0 || si >= static_cast<long>(d.h) || sj >= static_cast<long>(d.w)) continue;
          out[dst] = x[((n * d.h + static_cast<std::size_t>(si)) * d.w + static_cast<std::size_t>(sj)) * d.c + c];
        }
  return out;
}

/// Removes the mean along the last axis. The centering projector is symmetric, so this
/// is its own adjoint.
inline Tensor center_last(const Tensor& x) {
  const std::size_t c = x.shape().back();
  Tensor out = x;
  for (std::size_t base = 0; base < x.size(); base += c) {
    real m = 0;
    for (std::size_t k = 0; k < c; ++k) m += x[base + k];
    m /= static_cast<real>(c);
    for (std::size_t k = 0; k < c; ++k) out[base + k] -= m;
  }
  return out;
}

/// [N,H,W,C] -> [N,H/p,W/p,p*p*C], patch entries ordered (row, col, channel).
inline Tensor gather_patches(const Tensor& x, std::size_t p) {
  const auto d = nhwc(x.shape(), "gather_patches");
  if (d.h % p || d.w % p) {
    throw DimensionError("patch size " + std::to_string(p) + " does not divide spatial dims of " + shape_str(x.shape()));
  }
  const std::size_t ho = d.h / p, wo = d.w / p, k = p * p * d.c;
  Tensor out({d.n, ho, wo, k});
  for (std::size_t n = 0; n < d.n; ++n)
    for (std::size_t i = 0; i < d.h; ++i)
      for (std::size_t j = 0; j < d.w; ++j)
        for (std::size_t c = 0; c < d.c; ++c) {
          const std::size_t dst = ((n * ho + i / p) * wo + j / p) * k + ((i % p) * p + (j % p)) * d.c + c;
          out[dst] = x[((n * d.h + i) * d.w + j) * d.c + c];
        }
  return out;
}

inline Tensor scatter_patches(const Tensor& y, std::size_t p, const Shape& x_shape) {
  const auto d = nhwc(x_shape, "scatter_patches");
  const std::size_t ho = d.h / p, wo = d.w / p, k = p * p * d.c;
  Tensor out(x_shape);
  for (std::size_t n = 0; n < d.n; ++n)
    for (std::size_t i = 0; i < d.h; ++i)
      for (std::size_t j = 0; j < d.w; ++j)
        for (std::size_t c = 0; c < d.c; ++c) {
          const std::size_t src = ((n * ho + i / p) * wo + j / p) * k + ((i % p) * p + (j % p)) * d.c + c;
          out[((n * d.h + i) * d.w + j) * d.c + c] = y[src];
        }
  return out;
}

/// Non-overlapping k x k mean pooling; `global` pools all of H x W into [N, C].
inline Tensor avgpool(const Tensor& x, std::size_t k, bool global) {
  const auto d = nhwc(x.shape(), "avgpool");
  if (global) {
    Tensor out({d.n, d.c});
    const real inv = real{1} / static_cast<real>(d.h * d.w);
    for (std::size_t n = 0; n < d.n; ++n)
      for (std::size_t s = 0; s < d.h * d.w; ++s)
        for (std::size_t c = 0; c < d.c; ++c) out[n * d.c + c] += inv * x[(n * d.h * d.w + s) * d.c + c];
    return out;
  }
  if (d.h % k || d.w % k) {
    throw DimensionError("avgpool: kernel " + std::to_string(k) + " does not divide " + shape_str(x.shape()));
  }
  const std::size_t ho = d.h / k, wo = d.w / k;
  const real inv = real{1} / static_cast<real>(k * k);
  Tensor out({d.n, ho, wo, d.c});
  for (std::size_t n = 0; n < d.n; ++n)
    for (std::size_t i = 0; i < d.h; ++i)
      for (std::size_t j = 0; j < d.w; ++j)
        for (std::size_t c = 0; c < d.c; ++c)
          out[((n * ho + i / k) * wo + j / k) * d.c + c] += inv * x[((n * d.h + i) * d.w + j) * d.c + c];
  return out;
}

inline Tensor avgpool_adjoint(const Tensor& y, std::size_t k, bool global, const Shape& x_shape) {
  const auto d = nhwc(x_shape, "avgpool_adjoint");
  Tensor out(x_shape);
  if (global) {
    const real inv = real{1} / static_cast<real>(d.h * d.w);
    for (std::size_t n = 0; n < d.n; ++n)
      for (std::size_t s = 0; s < d.h * d.w; ++s)
        for (std::size_t c = 0; c < d.c; ++c) out[(n * d.h * d.w + s) * d.c + c] = inv * y[n * d.c + c];
    return out;
  }
  const std::size_t ho = d.h / k, wo = d.w / k;
  const real inv = real{1} / static_cast<real>(k * k);
  for (std::size_t n = 0; n < d.n; ++n)
    for (std::size_t i = 0; i < d.h; ++i)
      for (std::size_t j = 0; j < d.w; ++j)
        for (std::size_t c = 0; c < d.c; ++c)
          out[((n * d.h + i) * d.w + j) * d.c + c] = inv * y[((n * ho + i / k) * wo + j / k) * d.c + c];
  return out;
}

/// Prepends a unit batch axis so per-sample operators can reuse batched kernels.
inline Shape batched(const Shape& sample) {
  Shape s{1};
  s.insert(s.end(), sample.begin(), sample.end());
  return s;
}

}  // namespace kernels

// ---------------------------------------------------------------------------
// Differentiable helpers used by layers and losses.

/// Differentiable power-iteration estimate of sigma_max(M). `warm` (length = cols of M)
/// is advanced `iters` steps against the current value of M without gradient, then the
/// estimate ||M v|| is recorded with exact gradient u v^T for the frozen v.
inline Var sigma_estimate(Var m, Tensor& warm, int iters) {
  const Tensor& mv = m.value();
  if (mv.rank() != 2) throw DimensionError("sigma_estimate: expected a matrix");
  const std::size_t r = mv.dim(0), c = mv.dim(1);
  if (warm.size() != c) throw DimensionError("sigma_estimate: warm vector length mismatch");
  Tensor v = warm.reshaped({c, 1});
  for (int it = 0; it < iters; ++it) {
    Tensor w = matmul_tn(mv, matmul(mv, v));
    const real n = norm2(w);
    if (n == 0) break;
    v = scaled(w, 1 / n);
  }
  warm = v.reshaped({c});
  Tensor u = matmul(mv, v);
  const real sigma = norm2(u);
  return m.tape->record(Tensor::scalar(sigma), {m.id}, [m = m.id, u, v, sigma, r, c](Tape& t, std::size_t self) {
    if (sigma == 0) return;
    const real g = t.node(self).grad[0];
    Tensor gm({r, c});
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) gm.at(i, j) = g * u[i] * v[j] / sigma;
    detail::accumulate(t, m, gm);
  });
}

/// max_i |x_i|; gradient to the first maximizer, with its sign.
inline Var abs_max(Var x) {
  const Tensor& xv = x.value();
  std::size_t arg = 0;
  for (std::size_t i = 1; i < xv.size(); ++i)
    if (std::abs(xv[i]) > std::abs(xv[arg])) arg = i;
  return x.tape->record(Tensor::scalar(std::abs(xv[arg])), {x.id}, [x = x.id, arg](Tape& t, std::size_t self) {
    Tensor g(t.value(x).shape());
    const real s = t.value(x)[arg] >= 0 ? 1 : -1;
    g[arg] = s * t.node(self).grad[0];
    detail::accumulate(t, x, g);
  });
}

/// Pairwise MaxMin on the last axis: (a, b) -> (max, min).
inline Var maxmin(Var x) {
  const Tensor& xv = x.value();
  if (xv.rank() == 0 || xv.shape().back() % 2) {
    throw DimensionError("maxmin: channel count must be even, got shape " + shape_str(xv.shape()));
  }
  Tensor out = xv;
  std::vector<bool> swapped(xv.size() / 2);
  for (std::size_t p = 0; p < swapped.size(); ++p) {
    const real a = xv[2 * p], b = xv[2 * p + 1];
    swapped[p] = b > a;
    out[2 * p] = swapped[p] ? b : a;
    out[2 * p + 1] = swapped[p] ? a : b;
  }
  return x.tape->record(std::move(out), {x.id}, [x = x.id, swapped = std::move(swapped)](Tape& t, std::size_t self) {
    const Tensor& g = t.node(self).grad;
    Tensor gx(g.shape());
    for (std::size_t p = 0; p < swapped.size(); ++p) {
      gx[2 * p] = swapped[p] ? g[2 * p + 1] : g[2 * p];
      gx[2 * p + 1] = swapped[p] ? g[2 * p] : g[2 * p + 1];
    }
    detail::accumulate(t, x, gx);
  });
}

/// Row-wise l2 normalization of a matrix. Zero rows pass through unchanged and set
/// `degenerate` when provided.
inline Var row_normalize(Var w, bool* degenerate = nullptr) {
  const Tensor& wv = w.value();
  if (wv.rank() != 2) throw DimensionError("row_normalize: expected a matrix");
  const std::size_t r = wv.dim(0), c = wv.dim(1);
  Tensor out = wv;
  std::vector<real> norms(r);
  for (std::size_t i = 0; i < r; ++i) {
    real s = 0;
    for (std::size_t j = 0; j < c; ++j) s += wv.at(i, j) * wv.at(i, j);
    norms[i] = std::sqrt(s);
    if (norms[i] == 0) {
      if (degenerate) *degenerate = true;
      continue;
    }
    for (std::size_t j = 0; j < c; ++j) out.at(i, j) /= norms[i];
  }
  return w.tape->record(std::move(out), {w.id}, [w = w.id, norms, r, c](Tape& t, std::size_t self) {
    const Tensor& g = t.node(self).grad;
    const Tensor& y = t.value(self);
    Tensor gw({r, c});
    for (std::size_t i = 0; i < r; ++i) {
      if (norms[i] == 0) {
        for (std::size_t j = 0; j < c; ++j) gw.at(i, j) = g.at(i, j);
        continue;
      }
      real proj = 0;
      for (std::size_t j = 0; j < c; ++j) proj += y.at(i, j) * g.at(i, j);
      for (std::size_t j = 0; j < c; ++j) gw.at(i, j) = (g.at(i, j) - y.at(i, j) * proj) / norms[i];
    }
    detail::accumulate(t, w, gw);
  });
}

/// D_ij = ||row_i - row_j||. Zero distances contribute no gradient.
inline Var pairwise_row_distance(Var w) {
  const Tensor& wv = w.value();
  if (wv.rank() != 2) throw DimensionError("pairwise_row_distance: expected a matrix");
  const std::size_t r = wv.dim(0), c = wv.dim(1);
  Tensor d({r, r});
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = i + 1; j < r; ++j) {
      real s = 0;
      for (std::size_t k = 0; k < c; ++k) {
        const real diff = wv.at(i, k) - wv.at(j, k);
        s += diff * diff;
      }
      d.at(i, j) = d.at(j, i) = std::sqrt(s);
    }
  return w.tape->record(std::move(d), {w.id}, [w = w.id, r, c](Tape& t, std::size_t self) {
    const Tensor& g = t.node(self).grad;
    const Tensor& dist = t.value(self);
    const Tensor& wv = t.value(w);
    Tensor gw({r, c});
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < r; ++j) {
        if (i == j || dist.at(i, j) == 0) continue;
        const real coef = g.at(i, j) / dist.at(i, j);
        for (std::size_t k = 0; k < c; ++k) {
          const real diff = wv.at(i, k) - wv.at(j, k);
          gw.at(i, k) += coef * diff;
          gw.at(j, k) -= coef * diff;
        }
      }
    detail::accumulate(t, w, gw);
  });
}

// ---------------------------------------------------------------------------
// Layers. Each acts on a batch; `input_shape()` is the per-sample shape it was built for.

class Layer {
 public:
  Layer(std::string name, Shape input_shape) : name_(std::move(name)), input_shape_(std::move(input_shape)) {}
  virtual ~Layer() = default;

  const std::string& name() const noexcept { return name_; }
  const Shape& input_shape() const noexcept { return input_shape_; }

  virtual std::string kind() const = 0;
  virtual Shape output_shape() const = 0;
  virtual Var forward(Tape& tape, Var x, const ForwardMode& mode) = 0;

  /// Certified Lipschitz upper bound of the inference-time map.
  virtual LayerBound bound() const = 0;

  /// Bound as a tape value, so margin losses can differentiate through it.
  virtual Var bound_var(Tape& tape, int /*power_iters*/) { return tape.constant(Tensor::scalar(bound().value)); }

  /// The linear part of the inference map (bias dropped), when there is one.
  virtual std::optional<LinearOperator> linear_operator() const { return std::nullopt; }

  virtual std::vector<Parameter*> parameters() { return {}; }

  /// Re-seeds training-time power iteration from a converged estimate.
  virtual void refresh_warm_start() {}

 protected:
  void check_input(const Var& x) const {
    const Shape& s = x.value().shape();
    if (s.size() != input_shape_.size() + 1 || !std::equal(input_shape_.begin(), input_shape_.end(), s.begin() + 1)) {
      throw DimensionError(name_ + ": expected batch of " + shape_str(input_shape_) + ", got " + shape_str(s));
    }
  }

  PowerIterationOptions power_options() const { return {.seed = stable_hash(name_)}; }

 private:
  std::string name_;
  Shape input_shape_;
};

inline LayerBound bound_from(const SigmaEstimate& e) { return {e.value, e.converged, e.iterations_used}; }

/// Partial channel shift: four groups of `shift_fraction * C` channels move one pixel
/// left, right, up and down with zero fill; the rest pass through.
class ShiftLayer final : public Layer {
 public:
  ShiftLayer(std::string name, Shape input_shape, real shift_fraction = real{1} / 12)
      : Layer(std::move(name), std::move(input_shape)), shift_fraction_(shift_fraction) {
    if (this->input_shape().size() != 3) throw DimensionError(this->name() + ": shift expects [H,W,C]");
    const real groups = shift_fraction * static_cast<real>(this->input_shape()[2]);
    const real rounded = std::round(groups);
    if (shift_fraction < 0 || std::abs(groups - rounded) > 1e-9 || 4 * rounded > static_cast<real>(this->input_shape()[2])) {
      throw ConfigError(this->name() + ": shift_fraction " + std::to_string(shift_fraction) + " times " +
                            std::to_string(this->input_shape()[2]) + " channels is not a valid group size",
                        "model.shift_fraction");
    }
    group_size_ = static_cast<std::size_t>(rounded);
    bound_ = bound_from(power_iteration(*linear_operator(), power_options()));
  }

  std::string kind() const override { return "shift"; }
  Shape output_shape() const override { return input_shape(); }
  std::size_t group_size() const noexcept { return group_size_; }
  real shift_fraction() const noexcept { return shift_fraction_; }

  Var forward(Tape&, Var x, const ForwardMode&) override {
    check_input(x);
    const std::size_t g = group_size_;
    return linear_map(
        x, [g](const Tensor& v) { return kernels::shift(v, g, false); },
        [g](const Tensor& v) { return kernels::shift(v, g, true); });
  }

  LayerBound bound() const override { return bound_; }

  std::optional<LinearOperator> linear_operator() const override {
    const std::size_t g = group_size_;
    const Shape s = input_shape();
    const Shape b = kernels::batched(s);
    return LinearOperator{[g, s, b](const Tensor& v) { return kernels::shift(v.reshaped(b), g, false).reshaped(s); },
                          [g, s, b](const Tensor& v) { return kernels::shift(v.reshaped(b), g, true).reshaped(s); }, s, s};
  }

 private:
  real shift_fraction_;
  std::size_t group_size_ = 0;
  LayerBound bound_;
};

/// gamma * (x - mean(x)) + beta over the last axis. No variance division.
class CenterNormLayer final : public Layer {
 public:
  CenterNormLayer(std::string name, Shape input_shape)
      : Layer(std::move(name), std::move(input_shape)),
        gamma_(this->name() + ".gamma", Tensor({dim()}, 1)),
        beta_(this->name() + ".beta", Tensor({dim()}, 0)) {}

  std::string kind() const override { return "centernorm"; }
  Shape output_shape() const override { return input_shape(); }
  std::size_t dim() const { return input_shape().back(); }

  Parameter& gamma() { return gamma_; }
  Parameter& beta() { return beta_; }
  const Parameter& gamma() const { return gamma_; }
  const Parameter& beta() const { return beta_; }

  Var forward(Tape& tape, Var x, const ForwardMode&) override {
    if (x.value().rank() == 0 || x.value().shape().back() != dim()) {
      throw DimensionError(name() + ": last axis must be " + std::to_string(dim()) + ", got " + shape_str(x.value().shape()));
    }
    Var centered = linear_map(x, kernels::center_last, kernels::center_last);
    return add_channel(mul_channel(centered, tape.param(gamma_)), tape.param(beta_));
  }

  /// max_i |gamma_i|; the centering projector has spectral norm exactly 1.
  LayerBound bound() const override {
    real m = 0;
    for (auto g : gamma_.value.data()) m = std::max(m, std::abs(g));
    return {m, true, 0};
  }

  Var bound_var(Tape& tape, int) override { return abs_max(tape.param(gamma_)); }

  std::optional<LinearOperator> linear_operator() const override {
    const Shape s = input_shape();
    const Tensor gamma = gamma_.value;
    auto scale = [gamma](Tensor v) {
      const std::size_t c = gamma.size();
      for (std::size_t i = 0; i < v.size(); ++i) v[i] *= gamma[i % c];
      return v;
    };
    return LinearOperator{[scale](const Tensor& v) { return scale(kernels::center_last(v)); },
                          [scale](const Tensor& v) { return kernels::center_last(scale(v)); }, s, s};
  }

  std::vector<Parameter*> parameters() override { return {&gamma_, &beta_}; }

 private:
  Parameter gamma_;
  Parameter beta_;
};

/// Pairwise channel sorting activation.
class MaxMinLayer final : public Layer {
 public:
  MaxMinLayer(std::string name, Shape input_shape) : Layer(std::move(name), std::move(input_shape)) {
    if (this->input_shape().empty() || this->input_shape().back() % 2) {
      throw DimensionError(this->name() + ": MaxMin needs an even channel count, got " + shape_str(this->input_shape()));
    }
  }
  std::string kind() const override { return "maxmin"; }
  Shape output_shape() const override { return input_shape(); }
  Var forward(Tape&, Var x, const ForwardMode&) override { return maxmin(x); }
  LayerBound bound() const override { return {1, true, 0}; }
};

enum class DropKind { dropout, droppath };

/// Dropout / DropPath. Identity at inference; training masks are rescaled by 1/(1-p).
class DropLayer final : public Layer {
 public:
  DropLayer(std::string name, Shape input_shape, real p_drop, DropKind kind)
      : Layer(std::move(name), std::move(input_shape)), p_(p_drop), kind_(kind) {
    if (!(p_drop >= 0 && p_drop < 1)) {
      throw ConfigError(this->name() + ": drop rate must lie in [0,1), got " + std::to_string(p_drop), "model.p_drop");
    }
  }

  std::string kind() const override { return kind_ == DropKind::dropout ? "dropout" : "droppath"; }
  Shape output_shape() const override { return input_shape(); }
  real rate() const noexcept { return p_; }
  DropKind drop_kind() const noexcept { return kind_; }

  Var forward(Tape& tape, Var x, const ForwardMode& mode) override {
    if (!mode.training || p_ == 0) return x;
    Rng rng(derive_seed(mode.seed, {stable_hash(name())}));
    std::bernoulli_distribution keep(1 - p_);
    const real inv = 1 / (1 - p_);
    Tensor mask(x.value().shape());
    if (kind_ == DropKind::dropout) {
      for (auto& m : mask.data()) m = keep(rng) ? inv : 0;
    } else {
      const std::size_t n = x.value().dim(0);
      const std::size_t per = mask.size() / n;
      for (std::size_t i = 0; i < n; ++i) {
        const real m = keep(rng) ? inv : 0;
        std::fill_n(mask.data().begin() + static_cast<std::ptrdiff_t>(i * per), per, m);
      }
    }
    return mul(x, tape.constant(std::move(mask)));
  }

  LayerBound bound() const override { return {1, true, 0}; }

 private:
  real p_;
  DropKind kind_;
};

/// Residual 1x1 convolution y = x + (x W + b), kept affine. The DropPath, when present,
/// guards the convolution branch of the residual add during training.
class LiResConvBlock final : public Layer {
 public:
  LiResConvBlock(std::string name, Shape input_shape, std::uint64_t seed, real p_drop = 0)
      : Layer(std::move(name), std::move(input_shape)),
        weight_(this->name() + ".weight", init_weight(channels(), seed)),
        bias_(this->name() + ".bias", Tensor({channels()})),
        drop_path_(this->name() + ".drop_path", this->input_shape(), p_drop, DropKind::droppath) {
    Rng rng(derive_seed(seed, {1}));
    warm_ = random_unit({channels()}, rng);
  }

  std::string kind() const override { return "liresconv"; }
  Shape output_shape() const override { return input_shape(); }
  std::size_t channels() const { return input_shape().back(); }
  Parameter& weight() { return weight_; }
  Parameter& bias() { return bias_; }
  const Parameter& weight() const { return weight_; }

  Var forward(Tape& tape, Var x, const ForwardMode& mode) override {
    const Shape& s = x.value().shape();
    if (s.empty() || s.back() != channels()) {
      throw DimensionError(name() + ": channel mismatch, expected " + std::to_string(channels()) + ", got " + shape_str(s));
    }
    const std::size_t rows = x.value().size() / channels();
    Var flat = reshape(x, {rows, channels()});
    Var branch = add_channel(matmul(flat, tape.param(weight_)), tape.param(bias_));
    branch = drop_path_.forward(tape, reshape(branch, s), mode);
    return add(x, branch);
  }

  /// sigma_max(I + W) of the composite map, not 1 + sigma_max(W).
  LayerBound bound() const override { return bound_from(power_iteration(matrix_operator(composite()), power_options())); }

  Var bound_var(Tape& tape, int power_iters) override {
    Var m = add(tape.param(weight_), tape.constant(Tensor::identity(channels())));
    return sigma_estimate(m, warm_, power_iters);
  }

  std::optional<LinearOperator> linear_operator() const override {
    const Shape s = input_shape();
    const Tensor m = composite();
    const std::size_t c = channels();
    return LinearOperator{[m, s, c](const Tensor& v) { return matmul(v.reshaped({v.size() / c, c}), m).reshaped(s); },
                          [m, s, c](const Tensor& v) { return matmul_nt(v.reshaped({v.size() / c, c}), m).reshaped(s); }, s, s};
  }

  std::vector<Parameter*> parameters() override { return {&weight_, &bias_}; }

  void refresh_warm_start() override {
    auto est = power_iteration(matrix_operator(composite()), power_options());
    if (!est.right_vector.empty()) warm_ = est.right_vector;
  }

  Tensor composite() const { return axpy(weight_.value, 1, Tensor::identity(channels())); }

  /// W = M / sigma(M) - I with M = I + G and G spectrally normalized, so the
  /// residual map x(I + W) is exactly 1-Lipschitz at initialization.
  static Tensor init_weight(std::size_t c, std::uint64_t seed) {
    const Tensor m = axpy(Tensor::identity(c), 1, spectral_normalized_init(c, c, seed));
    const auto est = power_iteration(matrix_operator(m), {.max_iters = 5000, .tol = 1e-13, .seed = seed ^ 0x77});
    return axpy(scaled(m, 1 / est.value), -1, Tensor::identity(c));
  }

 private:
  Parameter weight_;
  Parameter bias_;
  DropLayer drop_path_;
  Tensor warm_;
};

enum class InputLayout { nchw, nhwc };

/// Non-overlapping p x p patches flattened and projected: the patch embedding (NCHW
/// image input) and the stage-transition patch merge (NHWC features).
class PatchProjection final : public Layer {
 public:
  PatchProjection(std::string name, Shape input_shape, InputLayout layout, std::size_t patch, std::size_t out_dim,
                  std::uint64_t seed)
      : Layer(std::move(name), std::move(input_shape)), layout_(layout), patch_(patch), out_dim_(out_dim) {
    const Shape hwc = hwc_shape();
    if (patch == 0 || hwc[0] % patch || hwc[1] % patch) {
      throw DimensionError(this->name() + ": patch size " + std::to_string(patch) + " does not divide " +
                           shape_str(this->input_shape()));
    }
    weight_ = Parameter(this->name() + ".weight", spectral_normalized_init(patch * patch * hwc[2], out_dim, seed));
    bias_ = Parameter(this->name() + ".bias", Tensor({out_dim}));
    Rng rng(derive_seed(seed, {1}));
    warm_ = random_unit({out_dim}, rng);
  }

  std::string kind() const override { return layout_ == InputLayout::nchw ? "patch_embed" : "patch_merge"; }
  std::size_t patch() const noexcept { return patch_; }
  Parameter& weight() { return weight_; }
  Parameter& bias() { return bias_; }
  const Parameter& weight() const { return weight_; }

  Shape hwc_shape() const {
    const Shape& s = input_shape();
    if (s.size() != 3) throw DimensionError(name() + ": expected a rank-3 sample shape");
    return layout_ == InputLayout::nchw ? Shape{s[1], s[2], s[0]} : s;
  }

  Shape output_shape() const override {
    const Shape hwc = hwc_shape();
    return {hwc[0] / patch_, hwc[1] / patch_, out_dim_};
  }

  Var forward(Tape& tape, Var x, const ForwardMode&) override {
    check_input(x);
    if (layout_ == InputLayout::nchw) x = permute(x, {0, 2, 3, 1});
    const std::size_t p = patch_;
    const Shape xs = x.value().shape();
    Var patches = linear_map(
        x, [p](const Tensor& v) { return kernels::gather_patches(v, p); },
        [p, xs](const Tensor& g) { return kernels::scatter_patches(g, p, xs); });
    const Shape ps = patches.value().shape();
    const std::size_t k = ps[3];
    Var flat = reshape(patches, {ps[0] * ps[1] * ps[2], k});
    Var y = add_channel(matmul(flat, tape.param(weight_)), tape.param(bias_));
    return reshape(y, {ps[0], ps[1], ps[2], out_dim_});
  }

  /// sigma_max of the projection matrix; patches are disjoint, so the full map has the
  /// same operator norm.
  LayerBound bound() const override { return bound_from(power_iteration(matrix_operator(weight_.value), power_options())); }

  Var bound_var(Tape& tape, int power_iters) override { return sigma_estimate(tape.param(weight_), warm_, power_iters); }

  std::optional<LinearOperator> linear_operator() const override {
    const Shape s = input_shape();
    const Shape out = output_shape();
    const Tensor w = weight_.value;
    const std::size_t p = patch_;
    const bool nchw = layout_ == InputLayout::nchw;
    const Shape hwc = hwc_shape();
    auto apply = [=](const Tensor& v) {
      Tensor x = v.reshaped(kernels::batched(s));
      if (nchw) x = permute(x, {0, 2, 3, 1});
      const Tensor pt = kernels::gather_patches(x, p);
      return matmul(pt.reshaped({pt.size() / w.dim(0), w.dim(0)}), w).reshaped(out);
    };
    auto adjoint = [=](const Tensor& u) {
      const Tensor g = matmul_nt(u.reshaped({u.size() / w.dim(1), w.dim(1)}), w);
      const std::size_t k = w.dim(0);
      Tensor x = kernels::scatter_patches(g.reshaped({1, out[0], out[1], k}), p, kernels::batched(hwc));
      if (nchw) x = permute(x, {0, 3, 1, 2});
      return x.reshaped(s);
    };
    return LinearOperator{apply, adjoint, s, out};
  }

  std::vector<Parameter*> parameters() override { return {&weight_, &bias_}; }

  void refresh_warm_start() override {
    auto est = power_iteration(matrix_operator(weight_.value), power_options());
    if (!est.right_vector.empty()) warm_ = est.right_vector;
  }

 private:
  InputLayout layout_;
  std::size_t patch_;
  std::size_t out_dim_;
  Parameter weight_;
  Parameter bias_;
  Tensor warm_;
};

/// Non-overlapping average pooling with stride = kernel, or global pooling to [C].
class AvgPoolLayer final : public Layer {
 public:
  AvgPoolLayer(std::string name, Shape input_shape, std::size_t kernel, bool global)
      : Layer(std::move(name), std::move(input_shape)), kernel_(kernel), global_(global) {
    const Shape& s = this->input_shape();
    if (s.size() != 3) throw DimensionError(this->name() + ": avgpool expects [H,W,C]");
    if (!global && (kernel == 0 || s[0] % kernel || s[1] % kernel)) {
      throw DimensionError(this->name() + ": kernel " + std::to_string(kernel) + " does not divide " + shape_str(s));
    }
    bound_ = bound_from(power_iteration(*linear_operator(), power_options()));
  }

  std::string kind() const override { return "avgpool"; }
  bool global() const noexcept { return global_; }

  Shape output_shape() const override {
    const Shape& s = input_shape();
    if (global_) return {s[2]};
    return {s[0] / kernel_, s[1] / kernel_, s[2]};
  }

  Var forward(Tape&, Var x, const ForwardMode&) override {
    check_input(x);
    const std::size_t k = kernel_;
    const bool g = global_;
    const Shape xs = x.value().shape();
    return linear_map(
        x, [k, g](const Tensor& v) { return kernels::avgpool(v, k, g); },
        [k, g, xs](const Tensor& v) { return kernels::avgpool_adjoint(v, k, g, xs); });
  }

  /// Power iteration on the pooling operator for the configured input shape.
  LayerBound bound() const override { return bound_; }

  std::optional<LinearOperator> linear_operator() const override {
    const Shape s = input_shape();
    const Shape out = output_shape();
    const std::size_t k = kernel_;
    const bool g = global_;
    return LinearOperator{
        [=](const Tensor& v) { return kernels::avgpool(v.reshaped(kernels::batched(s)), k, g).reshaped(out); },
        [=](const Tensor& u) {
          return kernels::avgpool_adjoint(u.reshaped(kernels::batched(out)), k, g, kernels::batched(s)).reshaped(s);
        },
        s, out};
  }

 private:
  std::size_t kernel_;
  bool global_;
  LayerBound bound_;
};

/// Prediction head with unit-norm class rows: logits = W_hat x + b.
class LLNHead {
 public:
  LLNHead() = default;
  LLNHead(std::string name, std::size_t features, std::size_t classes, std::uint64_t seed)
      : name_(std::move(name)),
        weight_(name_ + ".weight", transpose(spectral_normalized_init(features, classes, seed))),
        bias_(name_ + ".bias", Tensor({classes})) {}

  const std::string& name() const noexcept { return name_; }
  std::size_t features() const { return weight_.value.dim(1); }
  std::size_t classes() const { return weight_.value.dim(0); }
  Parameter& weight() { return weight_; }
  Parameter& bias() { return bias_; }
  const Parameter& weight() const { return weight_; }
  const Parameter& bias() const { return bias_; }

  Var normalized_weight(Tape& tape) {
    bool degenerate = false;
    Var w = row_normalize(tape.param(weight_), &degenerate);
    if (degenerate) warn_degenerate();
    return w;
  }

  Var forward(Tape& tape, Var x) {
    const Shape& s = x.value().shape();
    if (s.size() != 2 || s[1] != features()) {
      throw DimensionError(name_ + ": expected [N," + std::to_string(features()) + "], got " + shape_str(s));
    }
    return forward(tape, x, normalized_weight(tape));
  }

  /// Forward against an already-normalized weight node (shared with the margin constants).
  Var forward(Tape& tape, Var x, Var w_hat) { return add_channel(matmul(x, transpose(w_hat)), tape.param(bias_)); }

  Tensor normalized() const {
    Tape t;
    Parameter copy = weight_;
    bool degenerate = false;
    Tensor out = row_normalize(t.param(copy), &degenerate).value();
    if (degenerate) warn_degenerate();
    return out;
  }

  /// K_hat_ij = ||w_hat_i - w_hat_j||, symmetric with zero diagonal, entries in [0, 2].
  Tensor pair_constants() const {
    Tape t;
    return pairwise_row_distance(t.constant(normalized())).value();
  }

  std::vector<Parameter*> parameters() { return {&weight_, &bias_}; }

 private:
  void warn_degenerate() const {
    std::cerr << "warning: " << name_ << " has a zero-norm class row; using it unnormalized\n";
  }

  std::string name_;
  Parameter weight_;
  Parameter bias_;
};

}  // namespace lipshift
