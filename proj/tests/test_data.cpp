#include <gtest/gtest.h>

#include <algorithm>
#include <cstdlib>
#include <filesystem>
#include <set>

#include "lipshift/config.hpp"
#include "lipshift/data.hpp"
#include "support/oracles.hpp"

using namespace lipshift;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / "lipshift_test_data";
  fs::create_directories(dir);
  return dir / name;
}

std::vector<unsigned char> cifar_record(unsigned char coarse, unsigned char label, unsigned char base, bool c100) {
  std::vector<unsigned char> r;
  if (c100) r.push_back(coarse);
  r.push_back(label);
  for (int k = 0; k < 3072; ++k) r.push_back(static_cast<unsigned char>((base + k) % 256));
  return r;
}

}  // namespace

TEST(Cifar, TwoRecordRoundTrip) {
  auto bytes = cifar_record(0, 3, 0, false);
  const auto second = cifar_record(0, 9, 17, false);
  bytes.insert(bytes.end(), second.begin(), second.end());
  io::write_file(scratch("c10.bin"), bytes);
  const Dataset d = load_cifar_binary(scratch("c10.bin"), CifarVariant::c10);
  ASSERT_EQ(d.size(), 2u);
  EXPECT_EQ(d.labels, (std::vector<int>{3, 9}));
  EXPECT_EQ(d.sample_shape, (Shape{3, 32, 32}));
  for (std::size_t k = 0; k < 3072; ++k) {
    ASSERT_EQ(d.pixels[k], static_cast<real>(k % 256) / 255);
    ASSERT_EQ(d.pixels[3072 + k], static_cast<real>((17 + k) % 256) / 255);
  }
}

TEST(Cifar, HundredUsesFineLabel) {
  io::write_file(scratch("c100.bin"), cifar_record(4, 77, 0, true));
  const Dataset d = load_cifar_binary(scratch("c100.bin"), CifarVariant::c100);
  EXPECT_EQ(d.labels.at(0), 77);
  EXPECT_EQ(d.num_classes, 100u);
}

TEST(Cifar, EmptyFileIsAnEmptyDataset) {
  io::write_file(scratch("empty.bin"), {});
  EXPECT_EQ(load_cifar_binary(scratch("empty.bin"), CifarVariant::c10).size(), 0u);
}

TEST(Cifar, DirectoryConcatenatesBatchesInOrder) {
  const fs::path dir = scratch("c10dir");
  fs::remove_all(dir);
  io::write_file(dir / "data_batch_2.bin", cifar_record(0, 2, 0, false));
  io::write_file(dir / "data_batch_1.bin", cifar_record(0, 1, 0, false));
  io::write_file(dir / "test_batch.bin", cifar_record(0, 7, 0, false));
  io::write_file(dir / "readme.html", {'x'});
  RunConfig c;
  c.dataset.kind = DatasetKind::cifar10;
  c.dataset.path = dir.string();
  c.model.input_shape = {3, 32, 32};
  c.model.num_classes = 10;
  const auto s = load_datasets(c);
  EXPECT_EQ(s.train.labels, (std::vector<int>{1, 2}));
  EXPECT_EQ(s.test.labels, (std::vector<int>{7}));
  fs::remove(dir / "data_batch_1.bin");
  fs::remove(dir / "data_batch_2.bin");
  EXPECT_THROW(load_datasets(c), ConfigError);
}

TEST(Cifar, BadLabelAndTruncationReportOffsets) {
  auto bytes = cifar_record(0, 1, 0, false);
  const auto bad = cifar_record(0, 12, 0, false);
  bytes.insert(bytes.end(), bad.begin(), bad.end());
  io::write_file(scratch("bad.bin"), bytes);
  try {
    load_cifar_binary(scratch("bad.bin"), CifarVariant::c10);
    FAIL();
  } catch (const FormatError& e) {
    EXPECT_NE(std::string(e.what()).find("offset 3073"), std::string::npos) << e.what();
  }
  bytes.resize(3073 + 100);
  io::write_file(scratch("short.bin"), bytes);
  EXPECT_THROW(load_cifar_binary(scratch("short.bin"), CifarVariant::c10), FormatError);
}

TEST(Cifar, RealBatchWhenPresent) {
  const char* path = std::getenv("LIPSHIFT_CIFAR10_BATCH");
  if (!path || !fs::exists(path)) GTEST_SKIP() << "set LIPSHIFT_CIFAR10_BATCH to a CIFAR-10 batch file";
  const Dataset d = load_cifar_binary(path, CifarVariant::c10);
  EXPECT_EQ(d.size(), 10000u);
  for (int l : d.labels) ASSERT_TRUE(l >= 0 && l < 10);
}

TEST(RawTensor, RoundTripAndRejections) {
  const Dataset d = synthetic_blobs(3, 2, {1, 4, 4}, 5, 1);
  save_raw_tensor(d, scratch("d.lsdt"));
  const Dataset back = load_raw_tensor(scratch("d.lsdt"));
  EXPECT_EQ(back.labels, d.labels);
  EXPECT_EQ(back.sample_shape, d.sample_shape);
  EXPECT_EQ(back.num_classes, 2u);
  for (std::size_t i = 0; i < d.pixels.size(); ++i) EXPECT_EQ(back.pixels[i], static_cast<real>(static_cast<float>(d.pixels[i])));
  EXPECT_THROW(load_raw_tensor(scratch("d.lsdt"), 1), FormatError);
  auto bytes = io::read_file(scratch("d.lsdt"));
  bytes[0] = 'X';
  io::write_file(scratch("bad.lsdt"), bytes);
  EXPECT_THROW(load_raw_tensor(scratch("bad.lsdt")), FormatError);
}

TEST(CropPad, ZeroPadIsIdentity) {
  Rng rng(1);
  const Tensor img = rand_uniform({3, 4, 4}, rng, 0, 1);
  const Tensor out = random_crop_pad(img, 0, 9);
  for (std::size_t i = 0; i < img.size(); ++i) EXPECT_EQ(out[i], img[i]);
}

TEST(CropPad, OriginOffsetShiftsByPad) {
  Tensor img({1, 4, 4});
  for (std::size_t i = 0; i < 16; ++i) img[i] = static_cast<real>(i + 1);
  const Tensor out = crop_padded(img, 2, 0, 0);
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t j = 0; j < 4; ++j) {
      const real expect = (i >= 2 && j >= 2) ? img[(i - 2) * 4 + (j - 2)] : 0;
      EXPECT_EQ(out[i * 4 + j], expect);
    }
}

TEST(CropPad, EveryOffsetKeepsShapeAndPixelSet) {
  Tensor img({1, 4, 4});
  for (std::size_t i = 0; i < 16; ++i) img[i] = static_cast<real>(i + 1);
  const std::set<real> allowed(img.data().begin(), img.data().end());
  for (std::size_t top = 0; top <= 4; ++top)
    for (std::size_t left = 0; left <= 4; ++left) {
      const Tensor out = crop_padded(img, 2, top, left);
      EXPECT_EQ(out.shape(), img.shape());
      for (auto v : out.data()) EXPECT_TRUE(v == 0 || allowed.count(v));
    }
}

TEST(Blobs, SeparatedAndDeterministic) {
  EXPECT_THROW(synthetic_blobs(2, 2, {1, 8, 8}, 0, 1), ContractError);
  const Dataset a = synthetic_blobs(200, 2, {1, 8, 8}, 10, 3);
  const Dataset b = synthetic_blobs(200, 2, {1, 8, 8}, 10, 3);
  EXPECT_EQ(a.pixels, b.pixels);
  EXPECT_EQ(a.labels, b.labels);
  for (auto v : a.pixels) ASSERT_TRUE(v >= 0 && v <= 1);
  EXPECT_EQ(oracle::nearest_centroid(a, a).accuracy, 1.0);
}

TEST(Blobs, DeskSplitCentroidOracle) {
  RunConfig cfg;
  const auto splits = load_datasets(cfg);
  EXPECT_EQ(splits.train.size(), 400u);
  EXPECT_EQ(splits.test.size(), 100u);
  const auto fit = oracle::nearest_centroid(splits.train, splits.test);
  EXPECT_EQ(fit.accuracy, 1.0);
  // an ideal classifier certifies a sample iff it lies farther than eps from the bisector
  std::size_t robust = 0;
  for (real d : fit.boundary_distance) robust += d > 36.0 / 255;
  EXPECT_GE(static_cast<real>(robust) / static_cast<real>(fit.boundary_distance.size()), 0.95);
}

TEST(BatchIter, FullBatchIsAPermutation) {
  const Dataset d = synthetic_blobs(5, 2, {1, 2, 2}, 3, 1);
  const auto batches = batch_iter(d, d.size(), 7);
  ASSERT_EQ(batches.size(), 1u);
  std::vector<std::size_t> idx = batches[0].indices;
  std::sort(idx.begin(), idx.end());
  EXPECT_EQ(idx, iota_indices(d.size()));
  EXPECT_THROW(batch_iter(d, d.size() + 1, 7), ContractError);
}

TEST(BatchIter, CoversEveryIndexOnceAndIsSeeded) {
  const Dataset d = synthetic_blobs(25, 2, {1, 2, 2}, 3, 1);
  const auto a = batch_iter(d, 8, 11), b = batch_iter(d, 8, 11);
  std::vector<std::size_t> seen;
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a[i].indices, b[i].indices);
    EXPECT_EQ(a[i].images.data()[0], b[i].images.data()[0]);
    seen.insert(seen.end(), a[i].indices.begin(), a[i].indices.end());
    EXPECT_EQ(a[i].labels, d.labels_of(a[i].indices));
  }
  std::sort(seen.begin(), seen.end());
  EXPECT_EQ(seen, iota_indices(d.size()));
}

TEST(BatchIter, MixRatioCounts) {
  const Dataset d = synthetic_blobs(128, 2, {1, 8, 8}, 3, 1);
  const auto batches = batch_iter(d, 128, 2, MixRatio{1, 3});
  ASSERT_EQ(batches.size(), 2u);
  for (const auto& b : batches) {
    EXPECT_EQ(b.clean_count, 32u);
    EXPECT_EQ(b.images.dim(0), 128u);
    EXPECT_EQ(b.labels, d.labels_of(b.indices));
    for (std::size_t i = 0; i < b.clean_count; ++i) {
      const Tensor img = d.image(b.indices[i]);
      for (std::size_t q = 0; q < 64; ++q) ASSERT_EQ(b.images[i * 64 + q], img[q]);
    }
  }
}
