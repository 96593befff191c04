#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <map>
#include <set>
#include <vector>

#include <gtest/gtest.h>

#include "bnfl/data.hpp"
#include "bnfl/errors.hpp"
#include "bnfl/network.hpp"

using namespace bnfl;

namespace {

Dataset ten_class(std::size_t per_class, std::uint64_t seed) {
  SyntheticSpec s;
  s.classes = 10;
  s.samples_per_class = per_class;
  s.dims = 12;
  s.seed = seed;
  return gen_synthetic(s);
}

std::filesystem::path temp_dir(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / ("bnfl_test_" + name);
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p;
}

}  // namespace

TEST(Synthetic, ZeroSpreadGivesIdenticalClassSamples) {
  SyntheticSpec s;
  s.classes = 3;
  s.samples_per_class = 5;
  s.dims = 4;
  s.cluster_spread = 0.0;
  const auto d = gen_synthetic(s);
  for (std::size_t i = 0; i < d.size(); ++i)
    for (std::size_t j = 0; j < d.size(); ++j)
      if (d.labels[i] == d.labels[j]) {
        const auto a = d.sample(i), b = d.sample(j);
        EXPECT_TRUE(std::equal(a.begin(), a.end(), b.begin()));
      }
}

TEST(Synthetic, SeededBitIdentical) {
  EXPECT_EQ(ten_class(20, 9).features, ten_class(20, 9).features);
  EXPECT_NE(ten_class(20, 9).features, ten_class(20, 10).features);
}

TEST(Synthetic, MeansSitAtRequestedScale) {
  SyntheticSpec s;
  s.classes = 4;
  s.samples_per_class = 1;
  s.dims = 6;
  s.cluster_spread = 0.0;
  s.scale = 2.5;
  const auto d = gen_synthetic(s);
  for (std::size_t i = 0; i < d.size(); ++i) {
    double n = 0;
    for (double v : d.sample(i)) n += v * v;
    EXPECT_NEAR(std::sqrt(n), 2.5, 1e-12);
  }
}

TEST(Synthetic, SeparableClustersTrainToHighAccuracy) {
  const auto d = gaussian_clusters({{1.0, 0.0}, {-1.0, 0.0}}, 100, 0.1, 4);
  const Architecture arch({2}, {LayerSpec::linear("fc", 2, 2)});
  auto w = arch.init_params<double>(1);
  const auto zero = Gradient<double>::zeros_like(w);
  BatchSampler sampler(d.size(), 20, 5);
  for (int step = 0; step < 200; ++step) {
    const auto idx = sampler.next();
    const auto f = forward(arch, w, gather_batch<double>(d, idx, arch.input_shape()), BnPlan<double>::train(0), 1e-5);
    w = sgd_step(w, backward(arch, w, f.cache, gather_labels(d, idx)).grad, zero, 0.5);
  }
  const auto all = iota_indices(d.size());
  const auto logits = forward(arch, w, gather_batch<double>(d, all, arch.input_shape()), BnPlan<double>::train(0), 1e-5).logits;
  std::size_t correct = 0;
  for (std::size_t i = 0; i < d.size(); ++i) correct += (logits[2 * i + 1] > logits[2 * i]) == (d.labels[i] == 1);
  EXPECT_GT(static_cast<double>(correct) / static_cast<double>(d.size()), 0.99);
}

TEST(Synthetic, FileRoundTrip) {
  const auto d = ten_class(3, 2);
  const auto path = temp_dir("syn") / "data.bin";
  write_synthetic(path, d);
  const auto back = read_synthetic(path);
  EXPECT_EQ(back.features, d.features);
  EXPECT_EQ(back.labels, d.labels);
  EXPECT_EQ(back.sample_shape, d.sample_shape);
  EXPECT_EQ(back.class_count, d.class_count);
}

TEST(Idx, SingleImageRoundTrip) {
  const std::vector<std::uint8_t> px{0, 51, 102, 255, 204, 153};
  const auto img = encode_idx_images(1, 2, 3, px);
  const std::vector<std::uint8_t> lab{7};
  const auto d = parse_idx(img, encode_idx_labels(lab), Normalization::none());
  ASSERT_EQ(d.size(), 1u);
  EXPECT_EQ(d.sample_shape, (Shape{1, 2, 3}));
  EXPECT_EQ(d.labels[0], 7);
  for (std::size_t i = 0; i < px.size(); ++i) EXPECT_DOUBLE_EQ(d.features[i], px[i] / 255.0);

  const auto dir = temp_dir("idx");
  write_bytes(dir / "img", img);
  write_bytes(dir / "lab", encode_idx_labels(lab));
  EXPECT_EQ(load_idx(dir / "img", dir / "lab", Normalization::none()).features, d.features);
}

TEST(Idx, MnistNormalization) {
  const std::vector<std::uint8_t> px{0, 255};
  const std::vector<std::uint8_t> lab{1};
  const auto d = parse_idx(encode_idx_images(1, 1, 2, px), encode_idx_labels(lab), Normalization::mnist());
  EXPECT_NEAR(d.features[0], -0.1307 / 0.3081, 1e-15);
  EXPECT_NEAR(d.features[1], (1.0 - 0.1307) / 0.3081, 1e-15);
}

TEST(Idx, CountMismatch) {
  const std::vector<std::uint8_t> px(8, 1);
  const std::vector<std::uint8_t> lab{1};
  try {
    parse_idx(encode_idx_images(2, 2, 2, px), encode_idx_labels(lab), Normalization::none());
    FAIL();
  } catch (const FormatError& e) {
    EXPECT_NE(std::string(e.what()).find("count mismatch"), std::string::npos);
  }
}

TEST(Idx, BadMagic) {
  const std::vector<std::uint8_t> px(4, 1);
  const std::vector<std::uint8_t> lab{1};
  auto img = encode_idx_images(1, 2, 2, px);
  img[3] = 0x01;
  try {
    parse_idx(img, encode_idx_labels(lab), Normalization::none());
    FAIL();
  } catch (const FormatError& e) {
    EXPECT_EQ(e.offset(), 0u);
  }
  EXPECT_THROW(parse_idx(encode_idx_images(1, 2, 2, px), img, Normalization::none()), FormatError);
}

TEST(Idx, EveryTruncationRejected) {
  std::vector<std::uint8_t> px(3 * 4 * 5);
  for (std::size_t i = 0; i < px.size(); ++i) px[i] = static_cast<std::uint8_t>(i * 7);
  const std::vector<std::uint8_t> lab{1, 2, 3};
  const auto img = encode_idx_images(3, 4, 5, px);
  const auto lb = encode_idx_labels(lab);
  for (std::size_t n = 0; n < img.size(); ++n) {
    const std::vector<std::uint8_t> cut(img.begin(), img.begin() + static_cast<std::ptrdiff_t>(n));
    EXPECT_THROW(parse_idx(cut, lb, Normalization::none()), FormatError) << "image prefix " << n;
  }
  for (std::size_t n = 0; n < lb.size(); ++n) {
    const std::vector<std::uint8_t> cut(lb.begin(), lb.begin() + static_cast<std::ptrdiff_t>(n));
    EXPECT_THROW(parse_idx(img, cut, Normalization::none()), FormatError) << "label prefix " << n;
  }
}

TEST(Idx, OfficialMnistWhenPresent) {
  const char* env = std::getenv("BNFL_MNIST_DIR");
  const std::filesystem::path dir = env ? env : "";
  if (!env || !std::filesystem::exists(dir / "train-images-idx3-ubyte")) GTEST_SKIP() << "BNFL_MNIST_DIR not set";
  const auto d = load_idx(dir / "train-images-idx3-ubyte", dir / "train-labels-idx1-ubyte", Normalization::mnist());
  EXPECT_EQ(d.size(), 60000u);
  EXPECT_EQ(d.sample_shape, (Shape{1, 28, 28}));
}

TEST(Partition, FullSkewGivesDisjointHalves) {
  const auto d = ten_class(30, 1);
  const auto parts = partition_label_skew(d, {2, 1.0, 3});
  ASSERT_EQ(parts.size(), 2u);
  for (int y : parts[0].labels) EXPECT_LT(y, 5);
  for (int y : parts[1].labels) EXPECT_GE(y, 5);
  EXPECT_EQ(parts[0].size() + parts[1].size(), d.size());
}

TEST(Partition, HalfSkewIsBalancedInExpectation) {
  const auto d = ten_class(400, 2);
  const auto assign = label_skew_assignment(d, {2, 0.5, 7});
  // Chi-square over (class, client) cells against an even split; class totals are fixed, so 10 dof.
  std::map<std::pair<int, std::size_t>, double> counts;
  for (std::size_t i = 0; i < d.size(); ++i) counts[{d.labels[i], assign[i]}] += 1;
  double chi = 0;
  for (int y = 0; y < 10; ++y) {
    for (std::size_t c = 0; c < 2; ++c) {
      const double o = counts[{y, c}];
      chi += (o - 200.0) * (o - 200.0) / 200.0;
    }
  }
  EXPECT_LT(chi, 29.59);  // 0.999 quantile
}

TEST(Partition, RoundRobinPreferenceForManyClients) {
  EXPECT_EQ(preferred_client(0, 10, 2), 0u);
  EXPECT_EQ(preferred_client(4, 10, 2), 0u);
  EXPECT_EQ(preferred_client(5, 10, 2), 1u);
  EXPECT_EQ(preferred_client(7, 10, 5), 2u);
  const auto d = ten_class(10, 3);
  const auto parts = partition_label_skew(d, {5, 1.0, 1});
  for (std::size_t c = 0; c < 5; ++c)
    for (int y : parts[c].labels) EXPECT_EQ(preferred_client(y, 10, 5), c);
}

TEST(Partition, ReproducibleAndConserving) {
  SyntheticSpec s;
  s.classes = 2;
  s.samples_per_class = 5;
  s.dims = 3;
  const auto d = gen_synthetic(s);
  const PartitionPlan plan{2, 0.7, 11};
  EXPECT_EQ(label_skew_assignment(d, plan), label_skew_assignment(d, plan));
  const auto parts = partition_label_skew(d, plan);
  std::multiset<std::pair<std::vector<double>, int>> before, after;
  for (std::size_t i = 0; i < d.size(); ++i)
    before.insert({std::vector<double>(d.sample(i).begin(), d.sample(i).end()), d.labels[i]});
  for (const auto& p : parts)
    for (std::size_t i = 0; i < p.size(); ++i)
      after.insert({std::vector<double>(p.sample(i).begin(), p.sample(i).end()), p.labels[i]});
  EXPECT_EQ(before, after);
}

TEST(Partition, InvalidProbabilityNamesField) {
  const auto d = ten_class(2, 1);
  try {
    partition_label_skew(d, {2, 0.3, 1});
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_EQ(e.field(), "partition.p");
  }
  EXPECT_THROW(partition_label_skew(d, {2, 1.2, 1}), ConfigError);
}

TEST(Partition, ClientWeightsSumToOneExactly) {
  const auto d = ten_class(7, 4);
  const auto parts = partition_label_skew(d, {3, 0.8, 2});
  const auto P = client_weights(parts);
  Rational sum;
  for (const auto& p : P) sum += p;
  EXPECT_EQ(sum, Rational(1));
}

TEST(Folds, ContiguousBlocksCoverEverything) {
  const auto folds = make_folds(23, 5, 9);
  ASSERT_EQ(folds.size(), 5u);
  std::vector<int> seen(23, 0);
  for (const auto& f : folds) {
    EXPECT_EQ(f.train.size() + f.test.size(), 23u);
    for (auto i : f.test) seen[i]++;
  }
  for (int s : seen) EXPECT_EQ(s, 1);
  EXPECT_THROW(make_folds(10, 1, 0), ConfigError);
}

TEST(Sampler, EpochWithoutReplacement) {
  BatchSampler s(10, 5, 3);
  std::vector<std::size_t> epoch;
  for (int i = 0; i < 2; ++i) {
    auto b = s.next();
    epoch.insert(epoch.end(), b.begin(), b.end());
  }
  std::sort(epoch.begin(), epoch.end());
  EXPECT_EQ(epoch, iota_indices(10));
}

TEST(Sampler, CopiesReplayTheSameBatches) {
  BatchSampler a(17, 4, 8);
  a.next();
  BatchSampler b = a;
  for (int i = 0; i < 10; ++i) EXPECT_EQ(a.next(), b.next());
}

TEST(Sampler, ReshufflesEachEpoch) {
  BatchSampler s(40, 40, 1);
  EXPECT_NE(s.next(), s.next());
}

TEST(Seeds, DerivedStreamsDiffer) {
  EXPECT_NE(derive_seed(1, 2, 0), derive_seed(1, 2, 1));
  EXPECT_NE(derive_seed(1, 2, 0), derive_seed(1, 3, 0));
  EXPECT_EQ(derive_seed(5, 6, 7), derive_seed(5, 6, 7));
}

TEST(DatasetChecks, ValidateRejectsBadLabels) {
  auto d = ten_class(2, 1);
  d.labels[0] = 10;
  EXPECT_THROW(d.validate(), StructuralError);
}
