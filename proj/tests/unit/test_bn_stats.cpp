#include <cmath>
#include <random>
#include <vector>

#include <gtest/gtest.h>

#include "bnfl/bn_stats.hpp"
#include "bnfl/errors.hpp"

using namespace bnfl;

namespace {

BNStats<double> one(double mean, double var) { return BNStats<double>({MeanVar<double>{{mean}, {var}}}); }

Tensor<double> random_matrix(std::size_t rows, std::size_t cols, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n(0.5, 2.0);
  Tensor<double> t({rows, cols});
  for (auto& v : t) v = n(rng);
  return t;
}

}  // namespace

TEST(BatchStats, DuplicatedRowHasZeroVariance) {
  Tensor<double> y({2, 3}, {1.5, -2.0, 7.0, 1.5, -2.0, 7.0});
  const auto s = batch_stats(y);
  EXPECT_EQ(s.mean, (std::vector<double>{1.5, -2.0, 7.0}));
  EXPECT_EQ(s.var, (std::vector<double>{0.0, 0.0, 0.0}));
}

TEST(BatchStats, SymmetricPair) {
  Tensor<double> y({2, 2}, {-3.0, -0.5, 3.0, 0.5});
  const auto s = batch_stats(y);
  EXPECT_DOUBLE_EQ(s.mean[0], 0.0);
  EXPECT_DOUBLE_EQ(s.var[0], 9.0);
  EXPECT_DOUBLE_EQ(s.var[1], 0.25);
}

TEST(BatchStats, MatchesNaiveTwoPass) {
  const auto y = random_matrix(8, 4, 11);
  const auto s = batch_stats(y);
  for (std::size_t c = 0; c < 4; ++c) {
    long double m = 0;
    for (std::size_t r = 0; r < 8; ++r) m += y[r * 4 + c];
    m /= 8;
    long double v = 0;
    for (std::size_t r = 0; r < 8; ++r) v += (y[r * 4 + c] - m) * (y[r * 4 + c] - m);
    v /= 8;
    EXPECT_NEAR(s.mean[c], static_cast<double>(m), 1e-12);
    EXPECT_NEAR(s.var[c], static_cast<double>(v), 1e-12);
  }
}

TEST(BatchStats, ConvPoolsSpatialPositions) {
  // [B=2, C=1, H=1, W=2]
  Tensor<double> y({2, 1, 1, 2}, {1.0, 2.0, 3.0, 6.0});
  const auto s = batch_stats(y);
  EXPECT_DOUBLE_EQ(s.mean[0], 3.0);
  EXPECT_DOUBLE_EQ(s.var[0], (4.0 + 1.0 + 0.0 + 9.0) / 4.0);
}

TEST(BatchStats, SingleSampleIsDegenerate) {
  Tensor<double> y({1, 3}, {1.0, 2.0, 3.0});
  EXPECT_THROW(batch_stats(y), DegenerateBatchError);
}

TEST(Ema, Endpoints) {
  const auto run = one(2.0, 1.0), inc = one(4.0, 3.0);
  EXPECT_EQ(ema_update(run, inc, 0.0), inc);
  EXPECT_EQ(ema_update(run, inc, 1.0), run);
}

TEST(Ema, HandValue) {
  const auto out = ema_update(one(2.0, 2.0), one(4.0, 4.0), 0.9);
  EXPECT_NEAR(out[0].mean[0], 2.2, 1e-15);
  EXPECT_NEAR(out[0].var[0], 2.2, 1e-15);
}

TEST(Ema, RejectsRhoOutsideUnitInterval) {
  EXPECT_THROW(ema_update(one(0, 1), one(0, 1), 1.5), ConfigError);
  EXPECT_THROW(ema_update(one(0, 1), one(0, 1), -0.1), ConfigError);
}

TEST(Ema, UnrollIdentity) {
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> u(0.0, 5.0);
  const double rho = 0.8;
  const std::size_t E = 7;
  auto running = one(u(rng), u(rng));
  const auto start = running;
  std::vector<BNStats<double>> xs;
  for (std::size_t t = 0; t < E; ++t) {
    xs.push_back(one(u(rng), u(rng)));
    running = ema_update(running, xs.back(), rho);
  }
  auto expect = std::pow(rho, E) * start;
  for (std::size_t t = 0; t < E; ++t) expect.axpy((1 - rho) * std::pow(rho, static_cast<double>(E - 1 - t)), xs[t]);
  EXPECT_LE(running.max_abs_diff(expect), 1e-12);
}

TEST(CorrectStats, EqualControlVariatesLeaveBatch) {
  const auto b = one(0.7, 0.4), k = one(3.0, 2.0);
  EXPECT_EQ(correct_stats(b, k, k, 1e-2), b);
}

TEST(CorrectStats, ClipsNegativeVariance) {
  const auto out = correct_stats(one(0.0, 0.5), one(0.0, 1.0), one(0.0, 0.0), 1e-2);
  EXPECT_DOUBLE_EQ(out[0].var[0], 1e-2);
}

TEST(CorrectStats, ShiftsMeanWithoutClipping) {
  const auto out = correct_stats(one(1.0, 1.0), one(0.3, 0.0), one(0.1, 0.0), 1e-2);
  EXPECT_NEAR(out[0].mean[0], 0.8, 1e-15);
  const auto neg = correct_stats(one(-5.0, 1.0), one(0.0, 0.0), one(0.0, 0.0), 1e-2);
  EXPECT_DOUBLE_EQ(neg[0].mean[0], -5.0);
}

TEST(CorrectStats, Idempotent) {
  const auto b = one(0.2, 0.001);
  const auto zero = one(0.0, 0.0);
  const auto once = correct_stats(b, zero, zero, 1e-2);
  EXPECT_EQ(correct_stats(once, zero, zero, 1e-2), once);
}

TEST(BnForward, Identity) {
  const double eps = 1e-5;
  Tensor<double> y({3, 1}, {-1.0, 0.25, 4.0});
  const std::vector<double> a{1.0}, b{0.0};
  const auto x = bn_forward<double>(y, {{0.0}, {1.0 - eps}}, a, b, eps);
  for (std::size_t i = 0; i < 3; ++i) EXPECT_NEAR(x[i], y[i], 1e-15);
}

TEST(BnForward, AtMeanGivesBeta) {
  Tensor<double> y({2, 2}, {1.0, 2.0, 1.0, 2.0});
  const std::vector<double> a{3.0, -1.0}, b{0.5, 7.0};
  const auto x = bn_forward<double>(y, {{1.0, 2.0}, {0.3, 9.0}}, a, b, 1e-5);
  EXPECT_EQ(x.values(), (std::vector<double>{0.5, 7.0, 0.5, 7.0}));
}

TEST(BnForward, HandValue) {
  Tensor<double> y({1, 1}, {3.0});
  const std::vector<double> a{2.0}, b{-1.0};
  EXPECT_DOUBLE_EQ(bn_forward<double>(y, {{1.0}, {3.0}}, a, b, 1.0)[0], 1.0);
}

TEST(BnForward, StandardizedPair) {
  Tensor<double> y({2, 1}, {-1.0, 1.0});
  const std::vector<double> a{1.0}, b{0.0};
  auto out = bn_layer_forward<double>(y, BnDirective<double>::batch(), a, b, 0.0);
  EXPECT_DOUBLE_EQ(out.output[0], -1.0);
  EXPECT_DOUBLE_EQ(out.output[1], 1.0);
}

TEST(BnLayer, BatchModeMoments) {
  const auto y = random_matrix(32, 3, 5);
  const std::vector<double> a{1.5, 0.5, 2.0}, b{0.1, -0.2, 0.3};
  const double eps = 1e-5;
  const auto out = bn_layer_forward<double>(y, BnDirective<double>::batch(), a, b, eps);
  const auto m = batch_stats(out.output);
  for (std::size_t c = 0; c < 3; ++c) {
    EXPECT_NEAR(m.mean[c], b[c], 1e-6);
    EXPECT_NEAR(m.var[c], a[c] * a[c] * out.batch.var[c] / (out.batch.var[c] + eps), 1e-6);
  }
}

TEST(BnLayer, CorrectedDirectiveShiftsAndCounts) {
  Tensor<double> y({2, 2}, {0.0, 0.0, 2.0, 0.0});
  const std::vector<double> a{1.0, 1.0}, b{0.0, 0.0};
  const auto out =
      bn_layer_forward<double>(y, BnDirective<double>::corrected({{0.5, 0.0}, {-0.5, 0.0}}, 1e-2), a, b, 1e-5);
  EXPECT_DOUBLE_EQ(out.used.mean[0], 1.5);
  EXPECT_DOUBLE_EQ(out.used.var[0], 0.5);
  EXPECT_DOUBLE_EQ(out.used.var[1], 1e-2);
  EXPECT_EQ(out.clipped, 1u);
  EXPECT_EQ(out.batch.mean[0], 1.0);
}

TEST(BnBackward, FrozenIsAffineChainRule) {
  const auto y = random_matrix(4, 2, 8);
  const std::vector<double> a{1.0, 1.0}, b{0.0, 0.0};
  const double eps = 1e-5;
  const MeanVar<double> s{{0.2, -0.1}, {2.0, 0.5}};
  const auto out = bn_layer_forward<double>(y, BnDirective<double>::fixed(s), a, b, eps);
  Tensor<double> up({4, 2});
  for (std::size_t i = 0; i < up.size(); ++i) up[i] = 0.1 * static_cast<double>(i) - 0.3;
  const auto g = bn_backward<double>(up, out.cache, a, BnGradMode::Frozen);
  for (std::size_t i = 0; i < up.size(); ++i) EXPECT_NEAR(g.input[i], up[i] / std::sqrt(s.var[i % 2] + eps), 1e-15);
}

TEST(BnBackward, ConstantUpstreamGivesZeroSum) {
  const auto y = random_matrix(6, 3, 9);
  const std::vector<double> a{1.2, 0.7, -0.4}, b{0.0, 1.0, 2.0};
  const auto out = bn_layer_forward<double>(y, BnDirective<double>::batch(), a, b, 1e-5);
  Tensor<double> up({6, 3}, 0.75);
  const auto g = bn_backward<double>(up, out.cache, a, BnGradMode::ThroughBatch);
  for (std::size_t c = 0; c < 3; ++c) {
    double s = 0;
    for (std::size_t r = 0; r < 6; ++r) s += g.input[r * 3 + c];
    EXPECT_NEAR(s, 0.0, 1e-13);
  }
}

TEST(BnBackward, MatchesFiniteDifferences) {
  auto y = random_matrix(5, 2, 10);
  const std::vector<double> a{1.3, -0.6}, b{0.2, 0.4};
  const double eps = 1e-5, h = 1e-5;
  Tensor<double> w({5, 2});
  for (std::size_t i = 0; i < w.size(); ++i) w[i] = std::sin(static_cast<double>(i) + 0.3);
  auto loss = [&](const Tensor<double>& in) {
    const auto o = bn_layer_forward<double>(in, BnDirective<double>::batch(), a, b, eps).output;
    double s = 0;
    for (std::size_t i = 0; i < o.size(); ++i) s += w[i] * o[i];
    return s;
  };
  const auto out = bn_layer_forward<double>(y, BnDirective<double>::batch(), a, b, eps);
  const auto g = bn_backward<double>(w, out.cache, a, BnGradMode::ThroughBatch);
  for (std::size_t i = 0; i < y.size(); ++i) {
    const double orig = y[i];
    y[i] = orig + h;
    const double up = loss(y);
    y[i] = orig - h;
    const double down = loss(y);
    y[i] = orig;
    const double fd = (up - down) / (2 * h);
    EXPECT_NEAR(g.input[i], fd, 1e-5 * std::max(1.0, std::abs(fd)));
  }
}

TEST(BnBackward, ModeMismatchIsStructural) {
  const auto y = random_matrix(4, 2, 12);
  const std::vector<double> a{1.0, 1.0}, b{0.0, 0.0};
  const auto out = bn_layer_forward<double>(y, BnDirective<double>::fixed({{0, 0}, {1, 1}}), a, b, 1e-5);
  EXPECT_THROW(bn_backward<double>(Tensor<double>({4, 2}, 1.0), out.cache, a, BnGradMode::ThroughBatch),
               StructuralError);
}

TEST(BNStatsArithmetic, IncongruentRejected) {
  auto a = one(0, 1);
  const BNStats<double> b({MeanVar<double>{{0, 0}, {1, 1}}});
  EXPECT_THROW(a += b, StructuralError);
}
