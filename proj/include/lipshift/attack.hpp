#pragma once

#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <vector>

#include "lipshift/certify.hpp"
#include "lipshift/config.hpp"
#include "lipshift/data.hpp"
#include "lipshift/model.hpp"
#include "lipshift/parallel.hpp"
#include "lipshift/random.hpp"

namespace lipshift {

/// z_y - max_{j != y} z_j per row.
inline std::vector<real> margins(const Tensor& z, const std::vector<int>& labels) {
  const std::size_t n = z.dim(0), m = z.dim(1);
  std::vector<real> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    const auto y = static_cast<std::size_t>(labels[i]);
    real best = -std::numeric_limits<real>::infinity();
    for (std::size_t j = 0; j < m; ++j)
      if (j != y) best = std::max(best, z.at(i, j));
    out[i] = z.at(i, y) - best;
  }
  return out;
}

/// Sum over rows of max_{j != y} z_j - z_y; the attack ascends it.
inline Var summed_violation(Var logits, const std::vector<int>& labels) {
  const Tensor& z = logits.value();
  const std::size_t n = z.dim(0), m = z.dim(1);
  std::vector<std::size_t> runner(n);
  real total = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const auto y = static_cast<std::size_t>(labels[i]);
    std::size_t best = y == 0 ? 1 : 0;
    for (std::size_t j = 0; j < m; ++j)
      if (j != y && z.at(i, j) > z.at(i, best)) best = j;
    runner[i] = best;
    total += z.at(i, best) - z.at(i, y);
  }
  return logits.tape->record(Tensor::scalar(total), {logits.id},
                             [l = logits.id, runner = std::move(runner), labels, n, m](Tape& t, std::size_t self) {
                               const real g = t.node(self).grad[0];
                               Tensor gz({n, m});
                               for (std::size_t i = 0; i < n; ++i) {
                                 gz.at(i, runner[i]) += g;
                                 gz.at(i, static_cast<std::size_t>(labels[i])) -= g;
                               }
                               detail::accumulate(t, l, gz);
                             });
}

struct AttackOutcome {
  std::size_t sample_id = 0;
  bool clean_correct = false;
  bool attack_success = false;
  real final_margin = 0;  // smallest z_y - max_{j != y} z_j seen, clean point included
  real perturbation_norm = 0;
  Tensor adversarial;  // input achieving final_margin, [C,H,W]
};

namespace attack_detail {

/// Per-sample gradient of the violation w.r.t. a batch of inputs, plus the logits.
inline Tensor input_gradient(LipShiFTModel& model, const Tensor& x, const std::vector<int>& labels, Tensor& logits) {
  Tape tape;
  Var xv = tape.leaf(x);
  Var z = model.forward(tape, xv, {});
  logits = z.value();
  tape.backward(summed_violation(z, labels));
  return tape.grad(xv.id);
}

inline void clip_to_ball(std::span<real> delta, std::span<const real> x, real eps) {
  real n = 0;
  for (real d : delta) n += d * d;
  n = std::sqrt(n);
  if (n > eps && n > 0)
    for (auto& d : delta) d *= eps / n;
  for (std::size_t i = 0; i < delta.size(); ++i) delta[i] = std::clamp(x[i] + delta[i], real{0}, real{1}) - x[i];
}

}  // namespace attack_detail

/// l2 PGD on a batch: normalized-gradient ascent on the top violation, projected onto
/// the eps-ball and the [0,1] box. Restart 0 starts at the clean input; later restarts
/// start uniformly inside the ball.
inline std::vector<AttackOutcome> pgd_l2_batch(LipShiFTModel& model, const Tensor& x, const std::vector<int>& labels,
                                               const AttackConfig& cfg, std::size_t first_id = 0) {
  cfg.validate();
  if (x.rank() != 4 || x.dim(0) != labels.size()) throw DimensionError("pgd_l2: expected [B,C,H,W] and one label per row");
  const std::size_t n = x.dim(0), k = x.size() / n;
  const real step = cfg.effective_step_size();
  std::vector<AttackOutcome> out(n);

  Tensor z;
  attack_detail::input_gradient(model, x, labels, z);
  const auto m0 = margins(z, labels);
  for (std::size_t i = 0; i < n; ++i) {
    out[i].sample_id = first_id + i;
    out[i].clean_correct = argmax(std::span<const real>(z.data().data() + i * z.dim(1), z.dim(1))) == labels[i];
    out[i].attack_success = !out[i].clean_correct;
    out[i].final_margin = m0[i];
    out[i].adversarial = Tensor({x.dim(1), x.dim(2), x.dim(3)}, std::vector<real>(x.data().begin() + i * k, x.data().begin() + (i + 1) * k));
  }

  auto record = [&](const Tensor& xa, const Tensor& za, const Tensor& delta) {
    const auto ms = margins(za, labels);
    for (std::size_t i = 0; i < n; ++i) {
      const bool flips = argmax(std::span<const real>(za.data().data() + i * za.dim(1), za.dim(1))) != labels[i];
      if (ms[i] < out[i].final_margin || (flips && !out[i].attack_success)) {
        out[i].final_margin = std::min(ms[i], out[i].final_margin);
        std::copy(xa.data().begin() + i * k, xa.data().begin() + (i + 1) * k, out[i].adversarial.data().begin());
        real nrm = 0;
        for (std::size_t q = 0; q < k; ++q) nrm += delta[i * k + q] * delta[i * k + q];
        out[i].perturbation_norm = std::sqrt(nrm);
      }
      out[i].attack_success = out[i].attack_success || flips;
    }
  };

  for (int r = 0; r < cfg.restarts; ++r) {
    Tensor delta(x.shape());
    if (r > 0) {
      for (std::size_t i = 0; i < n; ++i) {
        Rng rng(derive_seed(cfg.seed, {first_id + i, static_cast<std::uint64_t>(r)}));
        const Tensor u = random_unit({k}, rng);
        const real radius = cfg.eps * std::pow(std::uniform_real_distribution<real>(0, 1)(rng), 1.0 / static_cast<real>(k));
        std::span<real> d(delta.data().data() + i * k, k);
        for (std::size_t q = 0; q < k; ++q) d[q] = radius * u[q];
        attack_detail::clip_to_ball(d, std::span<const real>(x.data().data() + i * k, k), cfg.eps);
      }
    }
    for (int s = 0; s <= cfg.steps; ++s) {
      const Tensor xa = elementwise(x, delta, ElementwiseKind::add);
      Tensor za;
      const Tensor g = attack_detail::input_gradient(model, xa, labels, za);
      record(xa, za, delta);
      if (s == cfg.steps) break;
      for (std::size_t i = 0; i < n; ++i) {
        std::span<real> d(delta.data().data() + i * k, k);
        real gn = 0;
        for (std::size_t q = 0; q < k; ++q) gn += g[i * k + q] * g[i * k + q];
        gn = std::sqrt(gn);
        if (gn == 0) continue;
        for (std::size_t q = 0; q < k; ++q) d[q] += step * g[i * k + q] / gn;
        attack_detail::clip_to_ball(d, std::span<const real>(x.data().data() + i * k, k), cfg.eps);
      }
    }
  }
  return out;
}

inline AttackOutcome pgd_l2(LipShiFTModel& model, const Tensor& image, int label, const AttackConfig& cfg, std::size_t id = 0) {
  Shape s{1};
  s.insert(s.end(), image.shape().begin(), image.shape().end());
  return pgd_l2_batch(model, image.reshaped(s), {label}, cfg, id).front();
}

/// Attacks every sample of a dataset, chunked across worker threads.
inline std::vector<AttackOutcome> pgd_l2(LipShiFTModel& model, const Dataset& d, const AttackConfig& cfg,
                                         std::size_t chunk = 32) {
  if (d.size() == 0) throw ContractError("pgd_l2: empty dataset");
  std::vector<AttackOutcome> out(d.size());
  const std::size_t chunks = (d.size() + chunk - 1) / chunk;
  parallel_for(chunks, [&](std::size_t c) {
    std::vector<std::size_t> idx;
    for (std::size_t i = c * chunk; i < std::min(d.size(), (c + 1) * chunk); ++i) idx.push_back(i);
    auto part = pgd_l2_batch(model, d.images(idx), d.labels_of(idx), cfg, idx.front());
    for (std::size_t i = 0; i < part.size(); ++i) out[idx[i]] = std::move(part[i]);
  });
  return out;
}

inline real empirical_robust_accuracy(const std::vector<AttackOutcome>& r) {
  if (r.empty()) return 0;
  std::size_t ok = 0;
  for (const auto& a : r) ok += a.clean_correct && !a.attack_success;
  return static_cast<real>(ok) / static_cast<real>(r.size());
}

inline void write_attack_csv(const std::filesystem::path& path, const std::vector<AttackOutcome>& r) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw FormatError("cannot write " + path.string());
  out << "sample_id,clean_correct,attack_success,final_margin\n";
  out.precision(9);
  for (const auto& a : r) out << a.sample_id << ',' << a.clean_correct << ',' << a.attack_success << ',' << a.final_margin << '\n';
}

struct SoundnessReport {
  std::size_t certified = 0;          // samples carrying a certificate
  std::size_t attack_violations = 0;  // certified, yet PGD changed the prediction
  std::size_t probe_violations = 0;   // certified, yet a random point in the ball changed it
  std::size_t bound_violations = 0;   // a pairwise margin moved faster than K_jy allows
  std::size_t probes = 0;
  real worst_ratio = 0;  // max over probes of |margin change| / (K_jy * |delta|)

  std::size_t violations() const noexcept { return attack_violations + probe_violations + bound_violations; }
};

/// Cross-checks certificates against PGD aimed at the predicted class and against random
/// points on the eps-sphere, and checks every pairwise margin against its constant.
inline SoundnessReport soundness_check(LipShiFTModel& model, const Dataset& d, const AttackConfig& cfg, std::size_t probes_per_sample,
                                       bool paper_drop_scaling = false) {
  SoundnessReport rep;
  const auto ev = evaluate(model, d, {.eps = cfg.eps, .paper_drop_scaling = paper_drop_scaling});
  const Tensor k = ev.report.pair_constants(paper_drop_scaling);
  Dataset target = d;
  std::vector<std::size_t> cert;
  for (std::size_t i = 0; i < d.size(); ++i) {
    target.labels[i] = ev.certificates[i].predicted;
    if (ev.certificates[i].verdict == Verdict::certified) cert.push_back(i);
  }
  rep.certified = cert.size();
  if (cert.empty()) return rep;
  Dataset certified_set = target.subset(cert);
  for (const auto& a : pgd_l2(model, certified_set, cfg)) rep.attack_violations += a.attack_success;

  const std::size_t kk = d.sample_size();
  const std::size_t m = model.config().num_classes;
  std::vector<SoundnessReport> part(cert.size());
  parallel_for(cert.size(), [&](std::size_t c) {
    const std::size_t i = cert[c];
    const Tensor x = d.image(i);
    const int y = target.labels[i];
    Tensor batch({probes_per_sample, d.sample_shape[0], d.sample_shape[1], d.sample_shape[2]});
    std::vector<real> norms(probes_per_sample);
    Rng rng(derive_seed(cfg.seed, {0x9b0be, i}));
    for (std::size_t p = 0; p < probes_per_sample; ++p) {
      Tensor u = random_unit({kk}, rng);
      std::span<real> delta(u.data().data(), kk);
      for (auto& v : delta) v *= cfg.eps;
      attack_detail::clip_to_ball(delta, x.data(), cfg.eps);
      real nrm = 0;
      for (std::size_t q = 0; q < kk; ++q) {
        batch[p * kk + q] = x[q] + delta[q];
        nrm += delta[q] * delta[q];
      }
      norms[p] = std::sqrt(nrm);
    }
    const Tensor z0 = model.logits(x.reshaped({1, x.dim(0), x.dim(1), x.dim(2)}));
    const Tensor z = model.logits(batch);
    SoundnessReport& r = part[c];
    for (std::size_t p = 0; p < probes_per_sample; ++p) {
      ++r.probes;
      if (argmax(std::span<const real>(z.data().data() + p * m, m)) != y) ++r.probe_violations;
      if (norms[p] == 0) continue;
      for (std::size_t j = 0; j < m; ++j) {
        if (static_cast<int>(j) == y) continue;
        const auto yy = static_cast<std::size_t>(y);
        const real change = std::abs((z.at(p, yy) - z.at(p, j)) - (z0.at(0, yy) - z0.at(0, j)));
        const real ratio = change / (k.at(j, yy) * norms[p]);
        r.worst_ratio = std::max(r.worst_ratio, ratio);
        if (ratio > 1 + 1e-9) ++r.bound_violations;
      }
    }
  });
  for (const auto& r : part) {
    rep.probes += r.probes;
    rep.probe_violations += r.probe_violations;
    rep.bound_violations += r.bound_violations;
    rep.worst_ratio = std::max(rep.worst_ratio, r.worst_ratio);
  }
  return rep;
}

}  // namespace lipshift
