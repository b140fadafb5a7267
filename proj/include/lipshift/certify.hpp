#pragma once

#include <filesystem>
#include <fstream>
#include <limits>
#include <span>
#include <vector>

#include "lipshift/data.hpp"
#include "lipshift/model.hpp"
#include "lipshift/parallel.hpp"

namespace lipshift {

/// Default certification radius in raw [0,1] pixel space.
inline constexpr real kDefaultEps = 36.0 / 255.0;

enum class Verdict { certified, bottom };

inline const char* to_string(Verdict v) { return v == Verdict::certified ? "certified" : "bottom"; }

struct Certificate {
  std::size_t sample_id = 0;
  int predicted = -1;
  Verdict verdict = Verdict::bottom;
  int limiting_class = -1;
  real slack = 0;  // min_j (z_y - z_j - eps * K_jy)
};

/// First index of the largest entry.
inline int argmax(std::span<const real> z) {
  return static_cast<int>(std::max_element(z.begin(), z.end()) - z.begin());
}

/// Margin test on logits: certified iff z_y - z_j > eps * K_jy for every j != y.
/// Anything else, including a tie at the top, is bottom.
inline Certificate certify_sample(std::span<const real> logits, const Tensor& k, real eps, std::size_t sample_id = 0) {
  const std::size_t m = logits.size();
  if (k.rank() != 2 || k.dim(0) != m || k.dim(1) != m) {
    throw DimensionError("certify_sample: " + std::to_string(m) + " logits vs constants " + shape_str(k.shape()));
  }
  if (!(eps >= 0)) throw ContractError("certify_sample: eps must be >= 0");
  Certificate c;
  c.sample_id = sample_id;
  c.predicted = argmax(logits);
  const auto y = static_cast<std::size_t>(c.predicted);
  c.slack = std::numeric_limits<real>::infinity();
  for (std::size_t j = 0; j < m; ++j) {
    if (j == y) continue;
    const real s = logits[y] - logits[j] - eps * k.at(j, y);
    if (s < c.slack) {
      c.slack = s;
      c.limiting_class = static_cast<int>(j);
    }
  }
  c.verdict = c.slack > 0 ? Verdict::certified : Verdict::bottom;
  return c;
}

struct EvalOptions {
  real eps = kDefaultEps;
  bool paper_drop_scaling = false;
  std::size_t batch_size = 256;
};

struct EvalResult {
  std::vector<Certificate> certificates;
  std::vector<int> labels;
  LipschitzReport report;
  std::size_t correct = 0;
  std::size_t certified_correct = 0;

  std::size_t size() const noexcept { return labels.size(); }
  real clean_accuracy() const { return static_cast<real>(correct) / static_cast<real>(size()); }
  real vra() const { return static_cast<real>(certified_correct) / static_cast<real>(size()); }
};

/// Inference logits for the whole dataset, [N, num_classes].
inline Tensor dataset_logits(LipShiFTModel& model, const Dataset& d, std::size_t batch_size = 256) {
  if (d.size() == 0) throw ContractError("dataset is empty");
  if (d.sample_shape != model.config().input_shape) {
    throw DimensionError("dataset samples " + shape_str(d.sample_shape) + " do not match model input " +
                         shape_str(model.config().input_shape));
  }
  const std::size_t m = model.config().num_classes;
  Tensor out({d.size(), m});
  const std::size_t chunks = (d.size() + batch_size - 1) / batch_size;
  parallel_for(chunks, [&](std::size_t c) {
    std::vector<std::size_t> idx;
    for (std::size_t i = c * batch_size; i < std::min(d.size(), (c + 1) * batch_size); ++i) idx.push_back(i);
    const Tensor z = model.logits(d.images(idx));
    std::copy(z.data().begin(), z.data().end(), out.data().begin() + static_cast<std::ptrdiff_t>(c * batch_size * m));
  });
  return out;
}

/// Clean accuracy and verified robust accuracy from one Lipschitz report.
inline EvalResult evaluate(LipShiFTModel& model, const Dataset& d, const EvalOptions& opt = {}) {
  if (d.size() == 0) throw ContractError("evaluate: empty dataset");
  EvalResult r;
  r.report = model.lipschitz_report();
  const Tensor k = r.report.pair_constants(opt.paper_drop_scaling);
  const Tensor z = dataset_logits(model, d, opt.batch_size);
  const std::size_t m = z.dim(1);
  r.labels = d.labels;
  for (std::size_t i = 0; i < d.size(); ++i) {
    const auto cert = certify_sample(std::span<const real>(z.data().data() + i * m, m), k, opt.eps, i);
    const bool correct = cert.predicted == d.labels[i];
    r.correct += correct;
    r.certified_correct += correct && cert.verdict == Verdict::certified;
    r.certificates.push_back(cert);
  }
  return r;
}

inline real vra(LipShiFTModel& model, const Dataset& d, real eps, bool paper_drop_scaling = false) {
  return evaluate(model, d, {.eps = eps, .paper_drop_scaling = paper_drop_scaling}).vra();
}

inline void write_certificates_csv(const std::filesystem::path& path, const std::vector<Certificate>& certs) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw FormatError("cannot write " + path.string());
  out << "sample_id,pred,verdict,slack,limiting_class\n";
  out.precision(9);
  for (const auto& c : certs) {
    out << c.sample_id << ',' << c.predicted << ',' << to_string(c.verdict) << ',' << c.slack << ',' << c.limiting_class << '\n';
  }
}

}  // namespace lipshift
