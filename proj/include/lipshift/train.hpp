#pragma once

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "lipshift/certify.hpp"
#include "lipshift/checkpoint.hpp"
#include "lipshift/config.hpp"
#include "lipshift/data.hpp"
#include "lipshift/model.hpp"

namespace lipshift {

/// Training radius ramp: eps_train(t) = min(3t / 2T, 1) * eps. It reaches the target at
/// t = 2T/3 and stays there.
struct EpsSchedule {
  std::size_t total_epochs = 500;
  real target_eps = kDefaultEps;
};

inline real eps_at(const EpsSchedule& s, real t) {
  if (!(t >= 0) || t > static_cast<real>(s.total_epochs)) {
    throw ContractError("eps_at: epoch " + std::to_string(t) + " outside [0, " + std::to_string(s.total_epochs) + "]");
  }
  if (s.total_epochs == 0) return s.target_eps;
  return std::min(3 * t / (2 * static_cast<real>(s.total_epochs)), real{1}) * s.target_eps;
}

/// Cosine decay without warmup: lr * 0.5 * (1 + cos(pi t / T)).
inline real cosine_lr(real base, real t, real total) {
  if (total <= 0) return base;
  return base * 0.5 * (1 + std::cos(std::numbers::pi_v<real> * std::min(t, total) / total));
}

/// Inflates every competitor logit by its clamped radius times the pair constant:
/// z_j + clamp((z_y - z_j) / K_jy, 0, eps) * K_jy.
/// With a detached radius (the training default) the clamp output is a constant, so z_j
/// and K_jy keep their gradient on every branch. The exact derivative follows the clamp
/// instead; interior pairs then collapse to z_y and carry no signal about their margin.
inline Var emma_adjust(Var logits, const std::vector<int>& labels, Var k, real eps,
                       RadiusGrad mode = RadiusGrad::detached) {
  detail::same_tape(logits, k);
  const Tensor& z = logits.value();
  const Tensor& kv = k.value();
  if (z.rank() != 2 || z.dim(0) != labels.size()) throw DimensionError("emma_adjust: logits/labels mismatch");
  const std::size_t n = z.dim(0), m = z.dim(1);
  if (kv.rank() != 2 || kv.dim(0) != m || kv.dim(1) != m) {
    throw DimensionError("emma_adjust: constants " + shape_str(kv.shape()) + " do not match " + std::to_string(m) + " classes");
  }
  if (!(eps >= 0)) throw ContractError("emma_adjust: eps must be >= 0");
  if (!z.all_finite()) throw TrainingError("non-finite logits in margin loss");

  enum Branch : unsigned char { kOwn, kLower, kInterior, kUpper };
  std::vector<Branch> branch(n * m, kOwn);
  std::vector<real> radii(n * m, 0);
  Tensor out = z;
  for (std::size_t i = 0; i < n; ++i) {
    const auto y = static_cast<std::size_t>(labels[i]);
    if (y >= m) throw ContractError("emma_adjust: label out of range");
    for (std::size_t j = 0; j < m; ++j) {
      if (j == y) continue;
      const real kjy = kv.at(j, y);
      const real margin = z.at(i, y) - z.at(i, j);
      Branch b = kLower;
      real radius = 0;
      if (kjy > 0 && margin > 0) {
        radius = margin / kjy;
        b = kInterior;
        if (radius >= eps) {
          radius = eps;
          b = kUpper;
        }
      }
      if (b == kInterior) out.at(i, j) = z.at(i, y);
      else out.at(i, j) = z.at(i, j) + radius * kjy;
      branch[i * m + j] = b;
      radii[i * m + j] = radius;
    }
  }
  return logits.tape->record(std::move(out), {logits.id, k.id},
                             [l = logits.id, kid = k.id, branch = std::move(branch), radii = std::move(radii), labels, n, m,
                              mode](Tape& t, std::size_t self) {
                               const Tensor& g = t.node(self).grad;
                               Tensor gz({n, m});
                               Tensor gk({m, m});
                               for (std::size_t i = 0; i < n; ++i) {
                                 const auto y = static_cast<std::size_t>(labels[i]);
                                 for (std::size_t j = 0; j < m; ++j) {
                                   const real gij = g.at(i, j);
                                   if (mode == RadiusGrad::detached) {
                                     gz.at(i, j) += gij;
                                     if (j != y) gk.at(j, y) += gij * radii[i * m + j];
                                     continue;
                                   }
                                   switch (branch[i * m + j]) {
                                     case kOwn:
                                     case kLower: gz.at(i, j) += gij; break;
                                     case kInterior: gz.at(i, y) += gij; break;
                                     case kUpper:
                                       gz.at(i, j) += gij;
                                       gk.at(j, y) += gij * radii[i * m + j];
                                       break;
                                   }
                                 }
                               }
                               detail::accumulate(t, l, gz);
                               detail::accumulate(t, kid, gk);
                             });
}

/// Cross-entropy on margin-inflated logits. eps_t = 0 reduces to plain cross-entropy.
inline Var emma_loss(Var logits, const std::vector<int>& labels, Var k, real eps_t,
                     RadiusGrad mode = RadiusGrad::detached) {
  return cross_entropy(emma_adjust(logits, labels, k, eps_t, mode), labels);
}

/// z_j + eps * K_jy for every competitor, with no clamp.
inline Var fixed_margin_adjust(Var logits, const std::vector<int>& labels, Var k, real eps) {
  const Tensor& z = logits.value();
  const std::size_t n = z.dim(0), m = z.dim(1);
  Tensor offset({n, m});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < m; ++j)
      if (static_cast<int>(j) != labels[i]) offset.at(i, j) = eps * k.value().at(j, static_cast<std::size_t>(labels[i]));
  // offset depends on K; route its gradient explicitly
  Var off = logits.tape->record(std::move(offset), {k.id}, [kid = k.id, labels, n, m, eps](Tape& t, std::size_t self) {
    const Tensor& g = t.node(self).grad;
    Tensor gk({m, m});
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < m; ++j)
        if (static_cast<int>(j) != labels[i]) gk.at(j, static_cast<std::size_t>(labels[i])) += eps * g.at(i, j);
    detail::accumulate(t, kid, gk);
  });
  return add(logits, off);
}

/// CE(clean, y) + lambda * CE(clean logits inflated at the fixed radius, y).
inline Var trades_eval_loss(Var logits_clean, Var logits_adjusted, const std::vector<int>& labels, real lambda) {
  if (!(lambda >= 0)) throw ContractError("trades_eval_loss: lambda must be >= 0");
  return add(cross_entropy(logits_clean, labels), scale(cross_entropy(logits_adjusted, labels), lambda));
}

/// AdamW with decoupled weight decay.
class AdamW {
 public:
  struct Options {
    real beta1 = 0.9;
    real beta2 = 0.999;
    real epsilon = 1e-8;
    real weight_decay = 0;
  };

  AdamW() = default;
  explicit AdamW(Options opt) : opt_(opt) {}

  std::size_t steps() const noexcept { return step_; }

  void step(const std::vector<Parameter*>& params, real lr) {
    if (m_.empty()) {
      for (auto* p : params) {
        m_.emplace_back(p->value.shape());
        v_.emplace_back(p->value.shape());
      }
    }
    if (m_.size() != params.size()) throw ContractError("AdamW: parameter list changed between steps");
    for (auto* p : params) {
      if (!p->grad.all_finite()) throw TrainingError("non-finite gradient in parameter " + p->name);
    }
    ++step_;
    const real bc1 = 1 - std::pow(opt_.beta1, static_cast<real>(step_));
    const real bc2 = 1 - std::pow(opt_.beta2, static_cast<real>(step_));
    for (std::size_t k = 0; k < params.size(); ++k) {
      Parameter& p = *params[k];
      if (m_[k].shape() != p.value.shape()) throw DimensionError("AdamW: state shape mismatch for " + p.name);
      for (std::size_t i = 0; i < p.value.size(); ++i) {
        const real g = p.grad.size() ? p.grad[i] : 0;
        m_[k][i] = opt_.beta1 * m_[k][i] + (1 - opt_.beta1) * g;
        v_[k][i] = opt_.beta2 * v_[k][i] + (1 - opt_.beta2) * g * g;
        p.value[i] -= lr * opt_.weight_decay * p.value[i];
        p.value[i] -= lr * (m_[k][i] / bc1) / (std::sqrt(v_[k][i] / bc2) + opt_.epsilon);
      }
    }
  }

  std::vector<NamedTensor> export_state(const std::vector<Parameter*>& params) const {
    std::vector<NamedTensor> out;
    for (std::size_t k = 0; k < m_.size(); ++k) {
      out.push_back({std::string(kExtraPrefix) + "m." + params[k]->name, m_[k]});
      out.push_back({std::string(kExtraPrefix) + "v." + params[k]->name, v_[k]});
    }
    out.push_back({std::string(kExtraPrefix) + "step", Tensor::scalar(static_cast<real>(step_))});
    return out;
  }

  void import_state(const std::vector<Parameter*>& params, const std::vector<NamedTensor>& state) {
    auto find = [&](const std::string& name) -> const Tensor* {
      for (const auto& t : state)
        if (t.name == name) return &t.value;
      return nullptr;
    };
    m_.clear();
    v_.clear();
    step_ = 0;
    const Tensor* st = find(std::string(kExtraPrefix) + "step");
    if (!st) return;
    step_ = static_cast<std::size_t>(st->item());
    for (auto* p : params) {
      const Tensor* m = find(std::string(kExtraPrefix) + "m." + p->name);
      const Tensor* v = find(std::string(kExtraPrefix) + "v." + p->name);
      if (!m || !v || m->shape() != p->value.shape() || v->shape() != p->value.shape()) {
        throw FormatError("optimizer state missing or mismatched for " + p->name);
      }
      m_.push_back(*m);
      v_.push_back(*v);
    }
  }

  /// Rounds moments to 32-bit, matching what a checkpoint stores.
  void quantize() {
    for (auto* set : {&m_, &v_})
      for (auto& t : *set)
        for (auto& x : t.data()) x = static_cast<real>(static_cast<float>(x));
  }

 private:
  Options opt_;
  std::vector<Tensor> m_, v_;
  std::size_t step_ = 0;
};

struct TrainLogRow {
  std::size_t epoch = 0;
  real eps_train = 0;
  real loss = 0;
  real clean_acc = 0;
  real vra = 0;
  real backbone_bound = 0;
  real scaled_bound = 0;
  real lr = 0;
};

inline constexpr const char* kTrainLogHeader = "epoch,eps_train,loss,clean_acc,vra,backbone_bound,scaled_bound,lr";

inline std::string format_log_row(const TrainLogRow& r) {
  char buf[512];
  std::snprintf(buf, sizeof buf, "%zu,%.9g,%.9g,%.9g,%.9g,%.9g,%.9g,%.9g", r.epoch, r.eps_train, r.loss, r.clean_acc, r.vra,
                r.backbone_bound, r.scaled_bound, r.lr);
  return buf;
}

struct TrainOptions {
  std::optional<std::filesystem::path> out_dir;  // log, checkpoints and resume state
  const Dataset* eval = nullptr;                 // defaults to the training set
  bool resume = false;
  std::ostream* progress = nullptr;
  std::size_t stop_after = 0;  // if nonzero, return once this epoch is done (budgeted runs)
};

struct TrainResult {
  std::vector<TrainLogRow> log;
  std::size_t start_epoch = 0;
};

namespace train_files {
inline std::filesystem::path log(const std::filesystem::path& d) { return d / "train_log.csv"; }
inline std::filesystem::path model(const std::filesystem::path& d) { return d / "model.lsft"; }
inline std::filesystem::path state(const std::filesystem::path& d) { return d / "state.lsft"; }
inline std::filesystem::path report(const std::filesystem::path& d) { return d / "lipschitz_report.txt"; }
}  // namespace train_files

inline std::string format_report(const LipschitzReport& r) {
  std::ostringstream os;
  os.precision(9);
  os << "{\n  \"layers\": [\n";
  for (std::size_t i = 0; i < r.per_layer.size(); ++i) {
    const auto& e = r.per_layer[i];
    os << "    {\"name\": \"" << e.name << "\", \"kind\": \"" << e.kind << "\", \"bound\": " << e.bound
       << ", \"converged\": " << (e.converged ? "true" : "false") << "}" << (i + 1 < r.per_layer.size() ? "," : "") << "\n";
  }
  os << "  ],\n  \"backbone_bound\": " << r.backbone_bound << ",\n  \"p_drop\": " << r.p_drop
     << ",\n  \"scaled_bound\": " << r.scaled_bound << ",\n  \"head_pairs\": [";
  const std::size_t m = r.head_pairs.empty() ? 0 : r.head_pairs.dim(0);
  for (std::size_t i = 0; i < m; ++i) {
    os << (i ? ", " : "") << "[";
    for (std::size_t j = 0; j < m; ++j) os << (j ? ", " : "") << r.head_pairs.at(i, j);
    os << "]";
  }
  os << "]\n}\n";
  return os.str();
}

/// Margin constants K = L_b * K_hat as tape values for one training step.
inline Var margin_constants_var(LipShiFTModel& model, Tape& tape, Var w_hat, const TrainConfig& cfg) {
  Var lb = model.backbone_bound_var(tape, cfg.power_iters);
  if (cfg.paper_drop_scaling) lb = scale(lb, 1 - model.config().p_drop);
  Var k = scale_by(pairwise_row_distance(w_hat), lb);
  return cfg.detach_bound ? tape.constant(k.value()) : k;
}

/// One optimization step on a batch; returns the batch loss.
inline real train_step(LipShiFTModel& model, AdamW& opt, const Batch& batch, const TrainConfig& cfg, real eps_t, real lr,
                       std::uint64_t mask_seed) {
  Tape tape;
  Var x = tape.constant(batch.images);
  Var w_hat = model.head().normalized_weight(tape);
  Var logits = model.forward(tape, x, {.training = true, .seed = mask_seed}, w_hat);
  Var k = margin_constants_var(model, tape, w_hat, cfg);
  if (!logits.value().all_finite()) {
    throw TrainingError("non-finite logits in batch of " + std::to_string(batch.labels.size()) + " (first sample index " +
                        std::to_string(batch.indices.front()) + ")");
  }
  Var loss = cfg.loss == LossKind::emma
                 ? emma_loss(logits, batch.labels, k, eps_t, cfg.emma_radius)
                 : trades_eval_loss(logits, fixed_margin_adjust(logits, batch.labels, k, cfg.eps), batch.labels, cfg.trades_lambda);
  if (!std::isfinite(loss.value().item())) throw TrainingError("non-finite loss");
  auto params = model.parameters();
  for (auto* p : params) p->zero_grad();
  tape.backward(loss);
  tape.commit_param_grads();
  opt.step(params, lr);
  return loss.value().item();
}

/// Margin training with the ramped radius, cosine learning rate and per-epoch bound
/// recomputation. With an output directory it appends the CSV log and writes checkpoints;
/// parameters are rounded to 32-bit whenever a checkpoint is taken (always at the end),
/// so the in-memory model equals its persisted form.
inline TrainResult train(LipShiFTModel& model, const Dataset& data, const RunConfig& run, const TrainOptions& io = {}) {
  const TrainConfig& cfg = run.train;
  cfg.validate();
  if (data.size() == 0) throw ContractError("train: empty dataset");
  if (data.sample_shape != model.config().input_shape) {
    throw DimensionError("train: dataset samples " + shape_str(data.sample_shape) + " do not match model input " +
                         shape_str(model.config().input_shape));
  }
  const Dataset& eval = io.eval ? *io.eval : data;
  const std::size_t batch = std::min(cfg.batch_size, data.size());
  const std::size_t per_epoch = (data.size() + batch - 1) / batch;
  const real total_steps = static_cast<real>(cfg.epochs * per_epoch);
  const EpsSchedule schedule{cfg.epochs, cfg.eps};
  AdamW opt({.weight_decay = cfg.weight_decay});
  TrainResult result;

  auto params = model.parameters();
  if (io.out_dir && io.resume && std::filesystem::exists(train_files::state(*io.out_dir))) {
    auto state = load_checkpoint(train_files::state(*io.out_dir));
    for (auto* p : params) p->value = state.model.find_parameter(p->name)->value;
    opt.import_state(params, state.extra);
    result.start_epoch = opt.steps() / per_epoch;
    // keep log rows up to the resumed epoch
    std::ifstream in(train_files::log(*io.out_dir));
    std::string line, kept;
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      if (line.rfind("epoch", 0) == 0 || std::stoul(line.substr(0, line.find(','))) <= result.start_epoch) kept += line + "\n";
    }
    in.close();
    std::ofstream(train_files::log(*io.out_dir), std::ios::trunc) << kept;
  } else if (io.out_dir) {
    std::filesystem::create_directories(*io.out_dir);
    std::ofstream(train_files::log(*io.out_dir), std::ios::trunc) << kTrainLogHeader << "\n";
  }

  auto checkpoint = [&] {
    model.quantize();
    opt.quantize();
    if (!io.out_dir) return;
    save_checkpoint(train_files::model(*io.out_dir), model, run);
    save_checkpoint(train_files::state(*io.out_dir), model, run, opt.export_state(params));
  };

  if (cfg.epochs == 0) checkpoint();

  for (std::size_t epoch = result.start_epoch; epoch < cfg.epochs; ++epoch) {
    model.refresh_warm_start();
    const real eps_t = eps_at(schedule, static_cast<real>(epoch));
    const auto batches = batch_iter(data, batch, derive_seed(cfg.seed, {epoch, 0xba7c}), cfg.mix, cfg.crop_pad);
    real loss_sum = 0;
    for (std::size_t b = 0; b < batches.size(); ++b) {
      const real step = static_cast<real>(epoch * per_epoch + b);
      loss_sum += train_step(model, opt, batches[b], cfg, eps_t, cosine_lr(cfg.lr, step, total_steps),
                             derive_seed(cfg.seed, {epoch, b, 0xd409}));
    }
    const bool last = epoch + 1 == cfg.epochs;
    const bool save = last || (cfg.save_every && (epoch + 1) % cfg.save_every == 0);
    if (save) {
      model.quantize();
      opt.quantize();
    }
    const auto ev = evaluate(model, eval, {.eps = cfg.eps, .paper_drop_scaling = cfg.paper_drop_scaling});
    TrainLogRow row{epoch + 1,
                    eps_t,
                    loss_sum / static_cast<real>(batches.size()),
                    ev.clean_accuracy(),
                    ev.vra(),
                    ev.report.backbone_bound,
                    ev.report.scaled_bound,
                    cosine_lr(cfg.lr, static_cast<real>((epoch + 1) * per_epoch), total_steps)};
    result.log.push_back(row);
    if (io.progress) *io.progress << format_log_row(row) << std::endl;
    if (io.out_dir) {
      std::ofstream(train_files::log(*io.out_dir), std::ios::app) << format_log_row(row) << "\n";
    }
    if (save) checkpoint();
    if (last && io.out_dir) std::ofstream(train_files::report(*io.out_dir)) << format_report(ev.report);
    if (io.stop_after && epoch + 1 >= io.stop_after) break;
  }
  return result;
}

}  // namespace lipshift
