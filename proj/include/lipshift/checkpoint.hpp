#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "lipshift/config.hpp"
#include "lipshift/data.hpp"
#include "lipshift/model.hpp"

namespace lipshift {

// Little-endian layout:
//   "LSFT" | u32 version | u32 len + UTF-8 config | u32 count |
//   per tensor: u32 len + UTF-8 name | u8 rank | u32 dims[rank] | f32 data[]

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct NamedTensor {
  std::string name;
  Tensor value;
};

struct CheckpointData {
  std::string config;
  std::vector<NamedTensor> tensors;
};

inline std::vector<unsigned char> encode_checkpoint(const CheckpointData& ck) {
  std::vector<unsigned char> out{'L', 'S', 'F', 'T'};
  io::put_u32(out, kCheckpointVersion);
  io::put_u32(out, static_cast<std::uint32_t>(ck.config.size()));
  out.insert(out.end(), ck.config.begin(), ck.config.end());
  io::put_u32(out, static_cast<std::uint32_t>(ck.tensors.size()));
  for (const auto& t : ck.tensors) {
    io::put_u32(out, static_cast<std::uint32_t>(t.name.size()));
    out.insert(out.end(), t.name.begin(), t.name.end());
    if (t.value.rank() > 255) throw FormatError("tensor rank exceeds 255: " + t.name);
    out.push_back(static_cast<unsigned char>(t.value.rank()));
    for (auto d : t.value.shape()) io::put_u32(out, static_cast<std::uint32_t>(d));
    for (auto v : t.value.data()) io::put_f32(out, static_cast<float>(v));
  }
  return out;
}

inline CheckpointData decode_checkpoint(const std::vector<unsigned char>& bytes, const std::string& what) {
  io::Reader r(bytes, what);
  if (bytes.size() < 4 || r.bytes(4) != "LSFT") throw FormatError(what + ": bad magic");
  const auto version = r.u32();
  if (version != kCheckpointVersion) throw FormatError(what + ": unsupported version " + std::to_string(version));
  CheckpointData ck;
  ck.config = r.bytes(r.u32());
  const std::uint32_t count = r.u32();
  for (std::uint32_t i = 0; i < count; ++i) {
    NamedTensor t;
    t.name = r.bytes(r.u32());
    const std::size_t rank = r.u8();
    Shape shape;
    for (std::size_t d = 0; d < rank; ++d) {
      const std::size_t dim = r.u32();
      if (dim == 0) throw FormatError(what + ": zero dimension in tensor " + t.name);
      shape.push_back(dim);
    }
    const std::size_t n = numel(shape);
    r.need(4 * n);
    std::vector<real> data(n);
    for (auto& v : data) v = r.f32();
    t.value = Tensor(std::move(shape), std::move(data));
    ck.tensors.push_back(std::move(t));
  }
  if (!r.done()) throw FormatError(what + ": trailing bytes at offset " + std::to_string(r.offset()));
  return ck;
}

inline CheckpointData snapshot(LipShiFTModel& model, const RunConfig& cfg, std::vector<NamedTensor> extra = {}) {
  CheckpointData ck;
  ck.config = serialize_config(cfg);
  for (auto* p : model.parameters()) ck.tensors.push_back({p->name, p->value});
  for (auto& e : extra) ck.tensors.push_back(std::move(e));
  return ck;
}

inline void save_checkpoint(const std::filesystem::path& path, LipShiFTModel& model, const RunConfig& cfg,
                            std::vector<NamedTensor> extra = {}) {
  io::write_file(path, encode_checkpoint(snapshot(model, cfg, std::move(extra))));
}

struct LoadedCheckpoint {
  RunConfig config;
  LipShiFTModel model;
  std::vector<NamedTensor> extra;  // non-model tensors, e.g. optimizer moments
};

/// Prefix for tensors that are not model parameters (optimizer state and the like).
inline constexpr std::string_view kExtraPrefix = "optim.";

inline LoadedCheckpoint restore_checkpoint(const CheckpointData& ck, const std::string& what) {
  RunConfig cfg;
  try {
    cfg = parse_config(ck.config);
    cfg.model.validate();
  } catch (const ConfigError& e) {
    throw FormatError(what + ": embedded config is invalid: " + e.what());
  }
  LipShiFTModel model(cfg.model, cfg.seed);
  std::vector<NamedTensor> extra;
  std::size_t matched = 0;
  for (const auto& t : ck.tensors) {
    if (t.name.rfind(kExtraPrefix, 0) == 0) {
      extra.push_back(t);
      continue;
    }
    Parameter* p = model.find_parameter(t.name);
    if (!p) throw FormatError(what + ": unknown parameter " + t.name);
    if (p->value.shape() != t.value.shape()) {
      throw FormatError(what + ": parameter " + t.name + " has shape " + shape_str(t.value.shape()) + ", model expects " +
                        shape_str(p->value.shape()));
    }
    p->value = t.value;
    ++matched;
  }
  if (matched != model.parameters().size()) throw FormatError(what + ": missing model parameters");
  model.refresh_warm_start();
  return {std::move(cfg), std::move(model), std::move(extra)};
}

inline LoadedCheckpoint load_checkpoint(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw FormatError(path.string() + ": no such checkpoint");
  return restore_checkpoint(decode_checkpoint(io::read_file(path), path.string()), path.string());
}

}  // namespace lipshift
