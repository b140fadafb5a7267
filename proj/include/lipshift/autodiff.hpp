#pragma once

#include <cmath>
#include <cstddef>
#include <deque>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "lipshift/tensor.hpp"

namespace lipshift {

/// A named trainable tensor with its gradient accumulator.
struct Parameter {
  std::string name;
  Tensor value;
  Tensor grad;

  Parameter() = default;
  Parameter(std::string n, Tensor v) : name(std::move(n)), value(std::move(v)), grad(value.shape()) {}

  void zero_grad() { grad = Tensor(value.shape()); }
};

class Tape;

/// Handle to a node on a tape.
struct Var {
  Tape* tape = nullptr;
  std::size_t id = 0;

  const Tensor& value() const;
  const Tensor& grad() const;
  const Shape& shape() const { return value().shape(); }
};

/// Reverse-mode tape. Nodes are appended in evaluation order, which is a topological
/// order, so backward is a single reverse sweep. One tape per thread.
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, std::size_t self)>;

  struct Node {
    Tensor value;
    Tensor grad;
    std::vector<std::size_t> inputs;
    BackwardFn backward;
    bool requires_grad = false;
    bool leaf = true;
    Parameter* param = nullptr;
  };

  Var leaf(Tensor value, bool requires_grad = true) {
    Node n;
    n.value = std::move(value);
    n.requires_grad = requires_grad;
    nodes_.push_back(std::move(n));
    return {this, nodes_.size() - 1};
  }

  Var constant(Tensor value) { return leaf(std::move(value), false); }

  /// Leaf bound to a parameter; `commit_param_grads` moves its gradient into `p.grad`.
  Var param(Parameter& p) {
    Var v = leaf(p.value, true);
    nodes_[v.id].param = &p;
    return v;
  }

  Var record(Tensor value, std::vector<std::size_t> inputs, BackwardFn fn) {
    Node n;
    n.value = std::move(value);
    n.leaf = false;
    for (auto i : inputs) n.requires_grad = n.requires_grad || nodes_.at(i).requires_grad;
    n.inputs = std::move(inputs);
    if (n.requires_grad) n.backward = std::move(fn);
    nodes_.push_back(std::move(n));
    return {this, nodes_.size() - 1};
  }

  const Node& node(std::size_t id) const { return nodes_.at(id); }
  const Tensor& value(std::size_t id) const { return nodes_.at(id).value; }
  bool requires_grad(std::size_t id) const { return nodes_.at(id).requires_grad; }

  /// Gradient accumulator of a node, allocated lazily as zeros.
  Tensor& grad(std::size_t id) {
    Node& n = nodes_.at(id);
    if (n.grad.empty()) n.grad = Tensor(n.value.shape());
    return n.grad;
  }

  const Tensor& grad_view(std::size_t id) {
    return grad(id);
  }

  /// Accumulates d(root)/d(node) into every reachable node. Interior accumulators are
  /// reset first; leaf accumulators keep adding across calls.
  void backward(Var root) {
    if (root.tape != this) throw ContractError("backward: variable belongs to another tape");
    if (nodes_.at(root.id).value.size() != 1) {
      throw ContractError("backward: root must be scalar, got shape " +
                          shape_str(nodes_[root.id].value.shape()));
    }
    for (auto& n : nodes_) {
      if (!n.leaf) n.grad = Tensor();
    }
    grad(root.id)[0] += 1;
    for (std::size_t id = root.id + 1; id-- > 0;) {
      Node& n = nodes_[id];
      if (n.leaf || !n.requires_grad || n.grad.empty()) continue;
      n.backward(*this, id);
    }
  }

  /// Adds every parameter leaf's gradient into its Parameter and clears the leaf.
  void commit_param_grads() {
    for (auto& n : nodes_) {
      if (!n.param || n.grad.empty()) continue;
      if (n.param->grad.shape() != n.grad.shape()) n.param->grad = Tensor(n.grad.shape());
      for (std::size_t i = 0; i < n.grad.size(); ++i) n.param->grad[i] += n.grad[i];
      n.grad = Tensor();
    }
  }

  std::size_t size() const noexcept { return nodes_.size(); }

 private:
  std::deque<Node> nodes_;  // stable references across appends
};

inline const Tensor& Var::value() const { return tape->value(id); }
inline const Tensor& Var::grad() const { return tape->grad_view(id); }

namespace detail {

inline void accumulate(Tape& t, std::size_t id, const Tensor& g) {
  if (!t.requires_grad(id)) return;
  Tensor& acc = t.grad(id);
  for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += g[i];
}

inline void accumulate_scaled(Tape& t, std::size_t id, const Tensor& g, real s) {
  if (!t.requires_grad(id)) return;
  Tensor& acc = t.grad(id);
  for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += s * g[i];
}

inline void same_tape(const Var& a, const Var& b) {
  if (a.tape != b.tape) throw ContractError("variables from different tapes");
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Differentiable primitives.

inline Var matmul(Var a, Var b) {
  detail::same_tape(a, b);
  Tape& t = *a.tape;
  return t.record(matmul(a.value(), b.value()), {a.id, b.id}, [a = a.id, b = b.id](Tape& t, std::size_t self) {
    const Tensor& g = t.node(self).grad;
    if (t.requires_grad(a)) detail::accumulate(t, a, matmul_nt(g, t.value(b)));
    if (t.requires_grad(b)) detail::accumulate(t, b, matmul_tn(t.value(a), g));
  });
}

inline Var transpose(Var a) {
  Tape& t = *a.tape;
  return t.record(transpose(a.value()), {a.id}, [a = a.id](Tape& t, std::size_t self) {
    detail::accumulate(t, a, transpose(t.node(self).grad));
  });
}

inline Var elementwise(Var a, Var b, ElementwiseKind kind) {
  detail::same_tape(a, b);
  Tape& t = *a.tape;
  return t.record(elementwise(a.value(), b.value(), kind), {a.id, b.id},
                  [a = a.id, b = b.id, kind](Tape& t, std::size_t self) {
                    const Tensor& g = t.node(self).grad;
                    const Tensor& av = t.value(a);
                    const Tensor& bv = t.value(b);
                    switch (kind) {
                      case ElementwiseKind::add:
                        detail::accumulate(t, a, g);
                        detail::accumulate(t, b, g);
                        break;
                      case ElementwiseKind::sub:
                        detail::accumulate(t, a, g);
                        detail::accumulate_scaled(t, b, g, -1);
                        break;
                      case ElementwiseKind::mul:
                        detail::accumulate(t, a, elementwise(g, bv, ElementwiseKind::mul));
                        detail::accumulate(t, b, elementwise(g, av, ElementwiseKind::mul));
                        break;
                      case ElementwiseKind::div: {
                        detail::accumulate(t, a, elementwise(g, bv, ElementwiseKind::div));
                        if (t.requires_grad(b)) {
                          Tensor gb(bv.shape());
                          for (std::size_t i = 0; i < gb.size(); ++i) gb[i] = -g[i] * av[i] / (bv[i] * bv[i]);
                          detail::accumulate(t, b, gb);
                        }
                        break;
                      }
                    }
                  });
}

inline Var add(Var a, Var b) { return elementwise(a, b, ElementwiseKind::add); }
inline Var sub(Var a, Var b) { return elementwise(a, b, ElementwiseKind::sub); }
inline Var mul(Var a, Var b) { return elementwise(a, b, ElementwiseKind::mul); }
inline Var div(Var a, Var b) { return elementwise(a, b, ElementwiseKind::div); }

/// Scalar-operand forms. `b` may also be a rank-0/size-1 Var broadcast over `a`.
inline Var add(Var a, real s) {
  Tensor out = a.value();
  for (auto& v : out.data()) v += s;
  return a.tape->record(std::move(out), {a.id}, [a = a.id](Tape& t, std::size_t self) {
    detail::accumulate(t, a, t.node(self).grad);
  });
}

inline Var scale(Var a, real s) {
  return a.tape->record(scaled(a.value(), s), {a.id}, [a = a.id, s](Tape& t, std::size_t self) {
    detail::accumulate_scaled(t, a, t.node(self).grad, s);
  });
}

/// a * s where s is a one-element Var.
inline Var scale_by(Var a, Var s) {
  detail::same_tape(a, s);
  if (s.value().size() != 1) throw DimensionError("scale_by: scale must hold one element");
  const real sv = s.value()[0];
  return a.tape->record(scaled(a.value(), sv), {a.id, s.id}, [a = a.id, s = s.id](Tape& t, std::size_t self) {
    const Tensor& g = t.node(self).grad;
    detail::accumulate_scaled(t, a, g, t.value(s)[0]);
    if (t.requires_grad(s)) {
      Tensor gs(t.value(s).shape());
      gs[0] = dot(g, t.value(a));
      detail::accumulate(t, s, gs);
    }
  });
}

inline Var sqrt(Var a) {
  Tensor out = a.value();
  for (auto& v : out.data()) v = std::sqrt(v);
  return a.tape->record(std::move(out), {a.id}, [a = a.id](Tape& t, std::size_t self) {
    const Tensor& g = t.node(self).grad;
    const Tensor& y = t.value(self);
    Tensor ga(y.shape());
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] = y[i] > 0 ? g[i] / (2 * y[i]) : 0;
    detail::accumulate(t, a, ga);
  });
}

inline Var reshape(Var a, Shape shape) {
  return a.tape->record(a.value().reshaped(std::move(shape)), {a.id}, [a = a.id](Tape& t, std::size_t self) {
    const Tensor& g = t.node(self).grad;
    detail::accumulate(t, a, g);
  });
}

inline Var permute(Var a, std::vector<std::size_t> perm) {
  Tensor out = permute(a.value(), perm);
  return a.tape->record(std::move(out), {a.id}, [a = a.id, inv = inverse_permutation(perm)](Tape& t, std::size_t self) {
    detail::accumulate(t, a, permute(t.node(self).grad, inv));
  });
}

/// Reduction over `axes`; max routes gradient to the first maximal index.
inline Var reduce(Var a, ReduceKind kind, std::vector<std::size_t> axes) {
  std::vector<std::size_t> arg;
  Tensor out = reduce(a.value(), kind, axes, kind == ReduceKind::max ? &arg : nullptr);
  ReducePlan plan = plan_reduce(a.value().shape(), axes);
  return a.tape->record(std::move(out), {a.id},
                        [a = a.id, kind, plan = std::move(plan), arg = std::move(arg)](Tape& t, std::size_t self) {
                          const Tensor& g = t.node(self).grad;
                          Tensor ga(t.value(a).shape());
                          if (kind == ReduceKind::max) {
                            for (std::size_t o = 0; o < arg.size(); ++o) ga[arg[o]] += g[o];
                          } else {
                            const real w = kind == ReduceKind::mean ? real{1} / static_cast<real>(plan.count) : real{1};
                            for (std::size_t i = 0; i < ga.size(); ++i) ga[i] = w * g[plan.out_index[i]];
                          }
                          detail::accumulate(t, a, ga);
                        });
}

inline Var sum(Var a) { return reduce(a, ReduceKind::sum, all_axes(a.value())); }
inline Var mean(Var a) { return reduce(a, ReduceKind::mean, all_axes(a.value())); }

/// x[..., C] + b[C]: per-channel offset along the last axis.
inline Var add_channel(Var x, Var b) {
  detail::same_tape(x, b);
  const Tensor& xv = x.value();
  const std::size_t c = b.value().size();
  if (xv.rank() == 0 || xv.shape().back() != c) {
    throw DimensionError("add_channel: last axis of " + shape_str(xv.shape()) + " does not match " +
                         shape_str(b.value().shape()));
  }
  Tensor out = xv;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += b.value()[i % c];
  return x.tape->record(std::move(out), {x.id, b.id}, [x = x.id, b = b.id, c](Tape& t, std::size_t self) {
    const Tensor& g = t.node(self).grad;
    detail::accumulate(t, x, g);
    if (t.requires_grad(b)) {
      Tensor gb({c});
      for (std::size_t i = 0; i < g.size(); ++i) gb[i % c] += g[i];
      detail::accumulate(t, b, gb);
    }
  });
}

/// x[..., C] * s[C]: per-channel scale along the last axis.
inline Var mul_channel(Var x, Var s) {
  detail::same_tape(x, s);
  const Tensor& xv = x.value();
  const std::size_t c = s.value().size();
  if (xv.rank() == 0 || xv.shape().back() != c) {
    throw DimensionError("mul_channel: last axis of " + shape_str(xv.shape()) + " does not match " +
                         shape_str(s.value().shape()));
  }
  Tensor out = xv;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= s.value()[i % c];
  return x.tape->record(std::move(out), {x.id, s.id}, [x = x.id, s = s.id, c](Tape& t, std::size_t self) {
    const Tensor& g = t.node(self).grad;
    const Tensor& sv = t.value(s);
    const Tensor& xv = t.value(x);
    if (t.requires_grad(x)) {
      Tensor gx(g.shape());
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] = g[i] * sv[i % c];
      detail::accumulate(t, x, gx);
    }
    if (t.requires_grad(s)) {
      Tensor gs({c});
      for (std::size_t i = 0; i < g.size(); ++i) gs[i % c] += g[i] * xv[i];
      detail::accumulate(t, s, gs);
    }
  });
}

/// Applies a fixed linear map and its adjoint. The adjoint doubles as the backward pass.
inline Var linear_map(Var x, std::function<Tensor(const Tensor&)> apply,
                      std::function<Tensor(const Tensor&)> adjoint) {
  Tensor out = apply(x.value());
  return x.tape->record(std::move(out), {x.id}, [x = x.id, adjoint = std::move(adjoint)](Tape& t, std::size_t self) {
    detail::accumulate(t, x, adjoint(t.node(self).grad));
  });
}

/// Mean cross-entropy of row-wise softmax(logits[N, M]) against integer labels.
inline Var cross_entropy(Var logits, const std::vector<int>& labels) {
  const Tensor& z = logits.value();
  if (z.rank() != 2 || z.dim(0) != labels.size()) {
    throw DimensionError("cross_entropy: logits " + shape_str(z.shape()) + " vs " +
                         std::to_string(labels.size()) + " labels");
  }
  const std::size_t n = z.dim(0), m = z.dim(1);
  Tensor probs({n, m});
  real total = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const int y = labels[i];
    if (y < 0 || static_cast<std::size_t>(y) >= m) throw ContractError("cross_entropy: label out of range");
    real zmax = z.at(i, 0);
    for (std::size_t j = 1; j < m; ++j) zmax = std::max(zmax, z.at(i, j));
    real s = 0;
    for (std::size_t j = 0; j < m; ++j) s += std::exp(z.at(i, j) - zmax);
    for (std::size_t j = 0; j < m; ++j) probs.at(i, j) = std::exp(z.at(i, j) - zmax) / s;
    total += zmax + std::log(s) - z.at(i, static_cast<std::size_t>(y));
  }
  return logits.tape->record(Tensor::scalar(total / static_cast<real>(n)), {logits.id},
                             [l = logits.id, probs = std::move(probs), labels, n, m](Tape& t, std::size_t self) {
                               const real g = t.node(self).grad[0] / static_cast<real>(n);
                               Tensor gl({n, m});
                               for (std::size_t i = 0; i < n; ++i)
                                 for (std::size_t j = 0; j < m; ++j)
                                   gl.at(i, j) = g * (probs.at(i, j) - (static_cast<int>(j) == labels[i] ? 1 : 0));
                               detail::accumulate(t, l, gl);
                             });
}

}  // namespace lipshift
