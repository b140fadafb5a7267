#pragma once

#include <algorithm>
#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "lipshift/layers.hpp"

namespace lipshift {

/// Architecture hyperparameters. Stage widths double through patch merges in ShiftViT;
/// here every stage width is given explicitly.
struct ArchConfig {
  std::vector<std::size_t> stage_depths{1, 1, 1, 1};
  std::vector<std::size_t> embed_dims{16, 32, 64, 128};
  std::size_t patch_size = 1;
  real shift_fraction = 0.125;
  real p_drop = 0;
  std::size_t num_classes = 2;
  Shape input_shape{1, 8, 8};  // C, H, W

  /// Full-scale CIFAR stage layout.
  static ArchConfig paper_default() {
    ArchConfig c;
    c.stage_depths = {6, 6, 10, 6};
    c.embed_dims = {96, 192, 384, 768};
    c.patch_size = 4;
    c.shift_fraction = real{1} / 12;
    c.num_classes = 10;
    c.input_shape = {3, 32, 32};
    return c;
  }

  void validate() const {
    auto fail = [](const std::string& field, const std::string& why) { throw ConfigError(field + ": " + why, field); };
    if (stage_depths.empty()) fail("model.stage_depths", "at least one stage is required");
    for (auto d : stage_depths)
      if (d < 1) fail("model.stage_depths", "every depth must be >= 1");
    if (embed_dims.size() != stage_depths.size()) fail("model.embed_dims", "needs one width per stage");
    for (auto d : embed_dims)
      if (d == 0 || d % 2) fail("model.embed_dims", "widths must be positive and even for MaxMin pairing");
    if (input_shape.size() != 3 || numel(input_shape) == 0 || std::count(input_shape.begin(), input_shape.end(), 0u)) {
      fail("model.input_shape", "expected C,H,W with positive entries");
    }
    if (patch_size == 0 || input_shape[1] % patch_size || input_shape[2] % patch_size) {
      fail("model.patch_size", "must divide the input height and width");
    }
    std::size_t h = input_shape[1] / patch_size, w = input_shape[2] / patch_size;
    for (std::size_t s = 1; s < stage_depths.size(); ++s) {
      if (h % 2 || w % 2) fail("model.stage_depths", "spatial size is not divisible by 2 at a stage transition");
      h /= 2;
      w /= 2;
    }
    if (!(p_drop >= 0 && p_drop < 1)) fail("model.p_drop", "must lie in [0,1)");
    if (num_classes < 2) fail("model.num_classes", "must be >= 2");
    if (!(shift_fraction >= 0 && shift_fraction <= 0.25)) fail("model.shift_fraction", "must lie in [0, 0.25]");
    for (auto d : embed_dims) {
      const real g = shift_fraction * static_cast<real>(d);
      if (std::abs(g - std::round(g)) > 1e-9) {
        fail("model.shift_fraction", "shift_fraction * " + std::to_string(d) + " channels is not an integer");
      }
    }
  }
};

struct LayerReportEntry {
  std::string name;
  std::string kind;
  real bound = 0;
  bool converged = true;
};

/// Global Lipschitz bound of the backbone and the per-class-pair margin constants.
struct LipschitzReport {
  std::vector<LayerReportEntry> per_layer;
  real backbone_bound = 1;
  real p_drop = 0;
  real scaled_bound = 1;  // backbone_bound * (1 - p_drop)
  Tensor head_pairs;      // K_hat
  Tensor margin_constants;  // scaled_bound * K_hat

  bool any_unconverged() const {
    return std::any_of(per_layer.begin(), per_layer.end(), [](const auto& e) { return !e.converged; });
  }

  /// K_ij for certification: unscaled (sound) by default, the (1 - p_drop) form on request.
  Tensor pair_constants(bool paper_drop_scaling) const {
    return scaled(head_pairs, paper_drop_scaling ? scaled_bound : backbone_bound);
  }
};

/// Dropout-scaled bound (1 - p_drop) * L. Not a sound Lipschitz bound of the inference
/// map; reported next to the unscaled one.
inline real drop_scaled_bound(real backbone_bound, real p_drop) { return backbone_bound * (1 - p_drop); }

class LipShiFTModel {
 public:
  LipShiFTModel(const ArchConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
    cfg_.validate();
    std::uint64_t stream = 0;
    auto next_seed = [&] { return derive_seed(seed, {stream++}); };

    const Shape& in = cfg_.input_shape;
    auto embed = std::make_unique<PatchProjection>("patch_embed", in, InputLayout::nchw, cfg_.patch_size,
                                                   cfg_.embed_dims[0], next_seed());
    Shape cur = embed->output_shape();
    layers_.push_back(std::move(embed));

    for (std::size_t s = 0; s < cfg_.stage_depths.size(); ++s) {
      if (s > 0) {
        auto merge = std::make_unique<PatchProjection>("stage" + std::to_string(s) + ".merge", cur, InputLayout::nhwc, 2,
                                                       cfg_.embed_dims[s], next_seed());
        cur = merge->output_shape();
        layers_.push_back(std::move(merge));
      }
      for (std::size_t b = 0; b < cfg_.stage_depths[s]; ++b) {
        const std::string prefix = "stage" + std::to_string(s) + ".block" + std::to_string(b);
        layers_.push_back(std::make_unique<ShiftLayer>(prefix + ".shift", cur, cfg_.shift_fraction));
        layers_.push_back(std::make_unique<CenterNormLayer>(prefix + ".norm", cur));
        layers_.push_back(std::make_unique<LiResConvBlock>(prefix + ".liresconv", cur, next_seed(), cfg_.p_drop));
        layers_.push_back(std::make_unique<MaxMinLayer>(prefix + ".act", cur));
      }
    }
    auto pool = std::make_unique<AvgPoolLayer>("pool", cur, 0, true);
    cur = pool->output_shape();
    layers_.push_back(std::move(pool));
    layers_.push_back(std::make_unique<DropLayer>("head_dropout", cur, cfg_.p_drop, DropKind::dropout));
    head_ = LLNHead("head", cur[0], cfg_.num_classes, next_seed());
  }

  LipShiFTModel(const LipShiFTModel&) = delete;
  LipShiFTModel& operator=(const LipShiFTModel&) = delete;
  LipShiFTModel(LipShiFTModel&&) = default;
  LipShiFTModel& operator=(LipShiFTModel&&) = default;

  const ArchConfig& config() const noexcept { return cfg_; }
  const std::vector<std::unique_ptr<Layer>>& layers() const noexcept { return layers_; }
  LLNHead& head() { return head_; }
  const LLNHead& head() const { return head_; }

  std::vector<Parameter*> parameters() {
    std::vector<Parameter*> out;
    for (auto& l : layers_) {
      auto p = l->parameters();
      out.insert(out.end(), p.begin(), p.end());
    }
    auto h = head_.parameters();
    out.insert(out.end(), h.begin(), h.end());
    return out;
  }

  std::size_t parameter_count() {
    std::size_t n = 0;
    for (auto* p : parameters()) n += p->value.size();
    return n;
  }

  /// Backbone features [N, C_last] for an image batch [N, C, H, W].
  Var features(Tape& tape, Var x, const ForwardMode& mode) {
    const Shape& s = x.value().shape();
    if (s.size() != 4 || !std::equal(cfg_.input_shape.begin(), cfg_.input_shape.end(), s.begin() + 1)) {
      throw DimensionError("model input must be [N," + shape_str(cfg_.input_shape).substr(1) + ", got " + shape_str(s));
    }
    for (auto& l : layers_) x = l->forward(tape, x, mode);
    return x;
  }

  Var forward(Tape& tape, Var x, const ForwardMode& mode) { return head_.forward(tape, features(tape, x, mode)); }

  Var forward(Tape& tape, Var x, const ForwardMode& mode, Var w_hat) {
    return head_.forward(tape, features(tape, x, mode), w_hat);
  }

  /// Inference logits for a batch; deterministic and drop-free.
  Tensor logits(const Tensor& x) {
    Tape tape;
    return forward(tape, tape.constant(x), {}).value();
  }

  /// Product of differentiable per-layer bound estimates (training path).
  Var backbone_bound_var(Tape& tape, int power_iters) {
    Var prod = tape.constant(Tensor::scalar(1));
    for (auto& l : layers_) prod = mul(prod, l->bound_var(tape, power_iters));
    return prod;
  }

  void refresh_warm_start() {
    for (auto& l : layers_) l->refresh_warm_start();
  }

  LipschitzReport lipschitz_report() const {
    LipschitzReport r;
    r.backbone_bound = 1;
    for (const auto& l : layers_) {
      const LayerBound b = l->bound();
      LayerReportEntry e{l->name(), l->kind(), b.value, b.converged};
      if (!b.converged) e.bound *= kSafetyFactor;
      r.backbone_bound *= e.bound;
      r.per_layer.push_back(std::move(e));
    }
    r.p_drop = cfg_.p_drop;
    r.scaled_bound = drop_scaled_bound(r.backbone_bound, cfg_.p_drop);
    r.head_pairs = head_.pair_constants();
    r.margin_constants = scaled(r.head_pairs, r.scaled_bound);
    return r;
  }

  /// Rounds every parameter to 32-bit precision, matching what a checkpoint stores.
  void quantize() {
    for (auto* p : parameters())
      for (auto& v : p->value.data()) v = static_cast<real>(static_cast<float>(v));
  }

  Parameter* find_parameter(const std::string& name) {
    for (auto* p : parameters())
      if (p->name == name) return p;
    return nullptr;
  }

 private:
  ArchConfig cfg_;
  std::vector<std::unique_ptr<Layer>> layers_;
  LLNHead head_;
};

inline LipShiFTModel build_model(const ArchConfig& cfg, std::uint64_t seed) { return LipShiFTModel(cfg, seed); }

}  // namespace lipshift
