#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "lipshift/random.hpp"
#include "lipshift/tensor.hpp"

namespace lipshift {

/// Labeled images in [0,1], stored flat; each sample has shape `sample_shape` (C,H,W).
struct Dataset {
  std::string name;
  Shape sample_shape{3, 32, 32};
  std::size_t num_classes = 0;
  std::vector<real> pixels;
  std::vector<int> labels;

  std::size_t size() const noexcept { return labels.size(); }
  std::size_t sample_size() const { return numel(sample_shape); }

  Tensor image(std::size_t i) const {
    const std::size_t k = sample_size();
    return Tensor(sample_shape, std::vector<real>(pixels.begin() + static_cast<std::ptrdiff_t>(i * k),
                                                  pixels.begin() + static_cast<std::ptrdiff_t>((i + 1) * k)));
  }

  /// Stacks the selected samples into [B, C, H, W].
  Tensor images(const std::vector<std::size_t>& idx) const {
    if (idx.empty()) throw ContractError("images: empty selection");
    const std::size_t k = sample_size();
    Shape s{idx.size()};
    s.insert(s.end(), sample_shape.begin(), sample_shape.end());
    Tensor out(s);
    for (std::size_t b = 0; b < idx.size(); ++b) {
      if (idx[b] >= size()) throw ContractError("images: index out of range");
      std::copy_n(pixels.begin() + static_cast<std::ptrdiff_t>(idx[b] * k), k,
                  out.data().begin() + static_cast<std::ptrdiff_t>(b * k));
    }
    return out;
  }

  std::vector<int> labels_of(const std::vector<std::size_t>& idx) const {
    std::vector<int> out;
    out.reserve(idx.size());
    for (auto i : idx) out.push_back(labels.at(i));
    return out;
  }

  Dataset slice(std::size_t begin, std::size_t count) const {
    if (begin + count > size()) throw ContractError("slice: range exceeds dataset");
    Dataset d{name, sample_shape, num_classes, {}, {}};
    const std::size_t k = sample_size();
    d.pixels.assign(pixels.begin() + static_cast<std::ptrdiff_t>(begin * k),
                    pixels.begin() + static_cast<std::ptrdiff_t>((begin + count) * k));
    d.labels.assign(labels.begin() + static_cast<std::ptrdiff_t>(begin),
                    labels.begin() + static_cast<std::ptrdiff_t>(begin + count));
    return d;
  }

  Dataset subset(const std::vector<std::size_t>& idx) const {
    Dataset d{name, sample_shape, num_classes, {}, {}};
    if (idx.empty()) return d;
    const Tensor t = images(idx);
    d.pixels.assign(t.data().begin(), t.data().end());
    d.labels = labels_of(idx);
    return d;
  }

  void push_back(const Tensor& img, int label) {
    if (img.shape() != sample_shape) throw DimensionError("push_back: sample shape mismatch");
    pixels.insert(pixels.end(), img.data().begin(), img.data().end());
    labels.push_back(label);
  }
};

inline std::vector<std::size_t> iota_indices(std::size_t n) {
  std::vector<std::size_t> v(n);
  std::iota(v.begin(), v.end(), std::size_t{0});
  return v;
}

namespace io {

inline std::vector<unsigned char> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void put_u32(std::vector<unsigned char>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<unsigned char>(v >> (8 * i)));
}

inline void put_f32(std::vector<unsigned char>& out, float f) {
  std::uint32_t bits;
  std::memcpy(&bits, &f, 4);
  put_u32(out, bits);
}

/// Little-endian cursor over a byte buffer; every read is bounds-checked.
class Reader {
 public:
  Reader(const std::vector<unsigned char>& buf, std::string what) : buf_(buf), what_(std::move(what)) {}

  void need(std::size_t n) const {
    if (pos_ + n > buf_.size()) {
      throw FormatError(what_ + ": truncated at byte offset " + std::to_string(pos_) + " (needed " +
                        std::to_string(n) + " more bytes)");
    }
  }
  std::uint8_t u8() {
    need(1);
    return buf_[pos_++];
  }
  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(buf_[pos_ + i]) << (8 * i);
    pos_ += 4;
    return v;
  }
  float f32() {
    const std::uint32_t bits = u32();
    float f;
    std::memcpy(&f, &bits, 4);
    return f;
  }
  std::string bytes(std::size_t n) {
    need(n);
    std::string s(buf_.begin() + static_cast<std::ptrdiff_t>(pos_), buf_.begin() + static_cast<std::ptrdiff_t>(pos_ + n));
    pos_ += n;
    return s;
  }
  std::size_t offset() const noexcept { return pos_; }
  bool done() const noexcept { return pos_ == buf_.size(); }
  const std::string& what() const noexcept { return what_; }

 private:
  const std::vector<unsigned char>& buf_;
  std::string what_;
  std::size_t pos_ = 0;
};

inline void write_file(const std::filesystem::path& path, const std::vector<unsigned char>& bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

}  // namespace io

enum class CifarVariant { c10, c100 };

/// CIFAR binary batches: per record one label byte (CIFAR-100: coarse then fine) followed
/// by 3072 channel-major pixel bytes.
inline Dataset load_cifar_binary(const std::filesystem::path& path, CifarVariant variant) {
  const auto bytes = io::read_file(path);
  const std::size_t label_bytes = variant == CifarVariant::c10 ? 1 : 2;
  const std::size_t pixels_per = 3 * 32 * 32;
  const std::size_t record = label_bytes + pixels_per;
  if (bytes.size() % record) {
    throw FormatError(path.string() + ": truncated record at byte offset " + std::to_string(bytes.size() / record * record));
  }
  Dataset d;
  d.name = path.filename().string();
  d.sample_shape = {3, 32, 32};
  d.num_classes = variant == CifarVariant::c10 ? 10 : 100;
  const std::size_t n = bytes.size() / record;
  d.labels.reserve(n);
  d.pixels.reserve(n * pixels_per);
  for (std::size_t r = 0; r < n; ++r) {
    const std::size_t off = r * record;
    const unsigned label = bytes[off + label_bytes - 1];
    if (label >= d.num_classes) {
      throw FormatError(path.string() + ": bad label byte " + std::to_string(label) + " at byte offset " +
                        std::to_string(off + label_bytes - 1));
    }
    d.labels.push_back(static_cast<int>(label));
    for (std::size_t k = 0; k < pixels_per; ++k) d.pixels.push_back(static_cast<real>(bytes[off + label_bytes + k]) / 255);
  }
  return d;
}

/// Raw tensor file: "LSDT", u32 version, u32 N, C, H, W, float32 pixels, u32 labels.
inline constexpr std::uint32_t kRawTensorVersion = 1;

inline void save_raw_tensor(const Dataset& d, const std::filesystem::path& path) {
  std::vector<unsigned char> out{'L', 'S', 'D', 'T'};
  io::put_u32(out, kRawTensorVersion);
  io::put_u32(out, static_cast<std::uint32_t>(d.size()));
  for (auto s : d.sample_shape) io::put_u32(out, static_cast<std::uint32_t>(s));
  for (auto v : d.pixels) io::put_f32(out, static_cast<float>(v));
  for (auto l : d.labels) io::put_u32(out, static_cast<std::uint32_t>(l));
  io::write_file(path, out);
}

inline Dataset load_raw_tensor(const std::filesystem::path& path, std::size_t num_classes = 0) {
  const auto bytes = io::read_file(path);
  io::Reader r(bytes, path.string());
  if (r.bytes(4) != "LSDT") throw FormatError(path.string() + ": bad magic");
  const auto version = r.u32();
  if (version != kRawTensorVersion) throw FormatError(path.string() + ": unsupported version " + std::to_string(version));
  const std::size_t n = r.u32();
  Dataset d;
  d.name = path.filename().string();
  d.sample_shape = {r.u32(), r.u32(), r.u32()};
  if (std::count(d.sample_shape.begin(), d.sample_shape.end(), 0u)) throw FormatError(path.string() + ": zero dimension");
  const std::size_t k = numel(d.sample_shape);
  r.need(n * k * 4 + n * 4);
  d.pixels.reserve(n * k);
  for (std::size_t i = 0; i < n * k; ++i) {
    const std::size_t at = r.offset();
    const real v = r.f32();
    if (!(v >= 0 && v <= 1)) throw FormatError(path.string() + ": pixel outside [0,1] at byte offset " + std::to_string(at));
    d.pixels.push_back(v);
  }
  std::size_t max_label = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t at = r.offset();
    const std::uint32_t l = r.u32();
    if (num_classes && l >= num_classes) {
      throw FormatError(path.string() + ": bad label " + std::to_string(l) + " at byte offset " + std::to_string(at));
    }
    max_label = std::max<std::size_t>(max_label, l);
    d.labels.push_back(static_cast<int>(l));
  }
  if (!r.done()) throw FormatError(path.string() + ": trailing bytes at offset " + std::to_string(r.offset()));
  d.num_classes = num_classes ? num_classes : (n ? max_label + 1 : 0);
  return d;
}

/// Crops the zero-padded image at offset (top, left) within the padded canvas.
inline Tensor crop_padded(const Tensor& img, std::size_t pad, std::size_t top, std::size_t left) {
  if (img.rank() != 3) throw DimensionError("crop_padded: expected [C,H,W], got " + shape_str(img.shape()));
  if (top > 2 * pad || left > 2 * pad) throw ContractError("crop_padded: offset outside padded canvas");
  const std::size_t c = img.dim(0), h = img.dim(1), w = img.dim(2);
  Tensor out(img.shape());
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t i = 0; i < h; ++i)
      for (std::size_t j = 0; j < w; ++j) {
        const long si = static_cast<long>(i + top) - static_cast<long>(pad);
        const long sj = static_cast<long>(j + left) - static_cast<long>(pad);
        if (si < 0 || sj < 0 || si >= static_cast<long>(h) || sj >= static_cast<long>(w)) continue;
        out[(ch * h + i) * w + j] = img[(ch * h + static_cast<std::size_t>(si)) * w + static_cast<std::size_t>(sj)];
      }
  return out;
}

/// Zero-pad by `pad` on every side and crop back at a seeded uniform offset.
inline Tensor random_crop_pad(const Tensor& img, std::size_t pad, std::uint64_t seed) {
  if (pad == 0) return img;
  Rng rng(seed);
  std::uniform_int_distribution<std::size_t> off(0, 2 * pad);
  const std::size_t top = off(rng);
  const std::size_t left = off(rng);
  return crop_padded(img, pad, top, left);
}

/// Per-pixel noise standard deviation of synthetic blobs; `separation` is measured in it.
inline constexpr real kBlobNoise = 0.1;

/// Class-conditional Gaussian images clipped to [0,1]. Class means sit around 0.5 at
/// distance `separation * kBlobNoise` from each other (exactly so for two classes, which
/// are placed antipodally). Sample i has label i % classes.
inline Dataset synthetic_blobs(std::size_t n_per_class, std::size_t classes, const Shape& shape, real separation,
                               std::uint64_t seed) {
  if (!(separation > 0)) throw ContractError("synthetic_blobs: separation must be > 0");
  if (classes < 2) throw ContractError("synthetic_blobs: need at least two classes");
  Rng rng(seed);
  const real dist = separation * kBlobNoise;
  std::vector<Tensor> means;
  if (classes == 2) {
    const Tensor d = random_unit(shape, rng);
    means.push_back(axpy(Tensor(shape, 0.5), dist / 2, d));
    means.push_back(axpy(Tensor(shape, 0.5), -dist / 2, d));
  } else {
    for (std::size_t k = 0; k < classes; ++k) means.push_back(axpy(Tensor(shape, 0.5), dist / std::sqrt(real{2}), random_unit(shape, rng)));
  }
  Dataset d;
  d.name = "synthetic_blobs";
  d.sample_shape = shape;
  d.num_classes = classes;
  std::normal_distribution<real> noise(0, kBlobNoise);
  for (std::size_t i = 0; i < n_per_class * classes; ++i) {
    const std::size_t k = i % classes;
    Tensor img = means[k];
    for (auto& v : img.data()) v = std::clamp(v + noise(rng), real{0}, real{1});
    d.push_back(img, static_cast<int>(k));
  }
  return d;
}

/// Clean-to-augmented proportion inside each batch, e.g. 1:3.
struct MixRatio {
  std::size_t clean = 1;
  std::size_t augmented = 3;
};

struct Batch {
  Tensor images;
  std::vector<int> labels;
  std::vector<std::size_t> indices;
  std::size_t clean_count = 0;
};

/// One epoch of batches in seeded shuffled order. With `mix`, the leading share of each
/// batch is clean and the rest is random-crop augmented.
inline std::vector<Batch> batch_iter(const Dataset& d, std::size_t batch_size, std::uint64_t shuffle_seed,
                                     std::optional<MixRatio> mix = std::nullopt, std::size_t crop_pad = 4) {
  if (batch_size < 1) throw ContractError("batch_iter: batch_size must be >= 1");
  if (batch_size > d.size()) {
    throw ContractError("batch_iter: batch_size " + std::to_string(batch_size) + " exceeds dataset size " +
                        std::to_string(d.size()));
  }
  if (mix && mix->clean + mix->augmented == 0) throw ContractError("batch_iter: empty mix ratio");
  std::vector<std::size_t> order = iota_indices(d.size());
  Rng rng(shuffle_seed);
  std::shuffle(order.begin(), order.end(), rng);

  std::vector<Batch> out;
  for (std::size_t start = 0, b = 0; start < order.size(); start += batch_size, ++b) {
    Batch batch;
    batch.indices.assign(order.begin() + static_cast<std::ptrdiff_t>(start),
                         order.begin() + static_cast<std::ptrdiff_t>(std::min(order.size(), start + batch_size)));
    batch.labels = d.labels_of(batch.indices);
    batch.images = d.images(batch.indices);
    const std::size_t n = batch.indices.size();
    batch.clean_count = n;
    if (mix) {
      const std::size_t total = mix->clean + mix->augmented;
      batch.clean_count = (n * mix->clean + total / 2) / total;
      const std::size_t k = d.sample_size();
      for (std::size_t i = batch.clean_count; i < n; ++i) {
        const Tensor aug = random_crop_pad(d.image(batch.indices[i]), crop_pad, derive_seed(shuffle_seed, {b, i}));
        std::copy(aug.data().begin(), aug.data().end(), batch.images.data().begin() + static_cast<std::ptrdiff_t>(i * k));
      }
    }
    out.push_back(std::move(batch));
  }
  return out;
}

}  // namespace lipshift
