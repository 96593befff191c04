#include <cmath>
#include <random>
#include <vector>

#include <gtest/gtest.h>

#include "bnfl/algorithms.hpp"
#include "bnfl/errors.hpp"
#include "bnfl/server.hpp"

using namespace bnfl;

namespace {

struct Fixture {
  Architecture arch = Architecture::mlp(6, 5, 3);
  Dataset data;
  ServerState<double> server;
  ClientState<double> client;

  explicit Fixture(std::uint64_t seed = 1)
      : data(make_data(seed)),
        server(init_server<double>(arch, seed)),
        client{0, &data, server.weights, server.running, server.cv, BatchSampler(data.size(), 8, seed)} {}

  static Dataset make_data(std::uint64_t seed) {
    SyntheticSpec s;
    s.classes = 3;
    s.samples_per_class = 10;
    s.dims = 6;
    s.seed = seed;
    return gen_synthetic(s);
  }

  ClientUpdateContext<double> ctx(Algorithm a, std::size_t E, double lr = 0.05) const {
    ClientUpdateContext<double> c;
    c.arch = &arch;
    c.spec.algorithm = a;
    c.local_steps = E;
    c.lr = lr;
    c.record = true;
    return c;
  }
};

BNStats<double> one(double mean, double var) { return BNStats<double>({MeanVar<double>{{mean}, {var}}}); }

double gap(const std::vector<double>& a, const std::vector<double>& b) {
  double m = 0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

}  // namespace

TEST(Names, RoundTripAndCaseInsensitive) {
  for (auto a : kAllAlgorithms) EXPECT_EQ(parse_algorithm(algorithm_name(a)), a);
  EXPECT_EQ(parse_algorithm("bn-scaffold-ii"), Algorithm::BnScaffold2);
  EXPECT_EQ(parse_algorithm("FedBN+SCAFFOLD"), Algorithm::FedBNScaffold);
  EXPECT_THROW(parse_algorithm("FedProx"), ConfigError);
}

TEST(Spec, TStarRequiredIffFixBN) {
  AlgorithmSpec s;
  s.algorithm = Algorithm::FixBN;
  EXPECT_THROW(s.validate(), ConfigError);
  s.t_star = 10;
  EXPECT_NO_THROW(s.validate());
  s.algorithm = Algorithm::FedAvg;
  EXPECT_THROW(s.validate(), ConfigError);
}

TEST(Traits, CombinedBaselinesUseGradientControlVariatesOnly) {
  for (auto a : {Algorithm::FixBNScaffold, Algorithm::FedBNScaffold, Algorithm::SiloBNScaffold}) {
    const auto t = algorithm_traits(a);
    EXPECT_TRUE(t.uses_c());
    EXPECT_FALSE(t.uses_k());
  }
  EXPECT_EQ(algorithm_traits(Algorithm::FedBN).locality, BnLocality::AllBn);
  EXPECT_EQ(algorithm_traits(Algorithm::SiloBN).locality, BnLocality::RunningStats);
  EXPECT_TRUE(algorithm_traits(Algorithm::BnScaffold1).option1());
}

TEST(ClientUpdate, FedAvgSingleStepIsPlainSgd) {
  Fixture f;
  const auto r = client_update(f.client, f.server.broadcast(), f.ctx(Algorithm::FedAvg, 1));
  BatchSampler s = f.client.sampler;
  const auto idx = s.next();
  const auto fw = forward(f.arch, f.server.weights, gather_batch<double>(f.data, idx, f.arch.input_shape()),
                          BnPlan<double>::train(2), 1e-5);
  const auto g = backward(f.arch, f.server.weights, fw.cache, gather_labels(f.data, idx)).grad;
  auto want = f.server.weights;
  want.axpy(-0.05, g);
  EXPECT_EQ(r.state.weights, want);
  EXPECT_EQ(r.state.cv.c.squared_norm(), 0.0);
  EXPECT_EQ(r.state.cv.k.max_abs_diff(f.arch.zero_stats<double>()), 0.0);
}

TEST(ClientUpdate, ScaffoldTwoSingleStepGivesTheGradient) {
  Fixture f(2);
  const auto r = client_update(f.client, f.server.broadcast(), f.ctx(Algorithm::Scaffold2, 1));
  const auto fw = forward(f.arch, r.steps[0].weights, gather_batch<double>(f.data, r.steps[0].batch, f.arch.input_shape()),
                          r.steps[0].plan, 1e-5);
  const auto g = backward(f.arch, r.steps[0].weights, fw.cache, gather_labels(f.data, r.steps[0].batch)).grad;
  EXPECT_LE(gap(r.state.cv.c.flatten(), g.flatten()), 1e-12);
}

TEST(ClientUpdate, BnScaffoldTwoSingleStepGivesBatchStats) {
  Fixture f(3);
  auto ctx = f.ctx(Algorithm::BnScaffold2, 1);
  ctx.spec.var_threshold = 0.0;
  const auto r = client_update(f.client, f.server.broadcast(), ctx);
  EXPECT_LE(gap(r.state.cv.k.flatten(), r.batch_trace[0].flatten()), 1e-12);
}

TEST(ClientUpdate, ZeroControlVariatesReproduceFedAvg) {
  Fixture f(4);
  auto base = f.ctx(Algorithm::FedAvg, 4);
  const auto fed = client_update(f.client, f.server.broadcast(), base);
  for (auto a : {Algorithm::Scaffold2, Algorithm::BnScaffold2}) {
    auto c = f.ctx(a, 4);
    c.spec.var_threshold = 0.0;
    const auto r = client_update(f.client, f.server.broadcast(), c);
    EXPECT_EQ(r.state.weights, fed.state.weights) << algorithm_name(a);
    EXPECT_EQ(r.state.running, fed.state.running) << algorithm_name(a);
    ASSERT_EQ(r.steps.size(), fed.steps.size());
    for (std::size_t t = 0; t < r.steps.size(); ++t) EXPECT_EQ(r.steps[t].batch, fed.steps[t].batch);
  }
}

TEST(ClientUpdate, RunningTraceHoldsEPlusOneEntries) {
  Fixture f(5);
  const auto r = client_update(f.client, f.server.broadcast(), f.ctx(Algorithm::BnScaffold2, 6));
  EXPECT_EQ(r.running_trace.size(), 7u);
  EXPECT_EQ(r.stats_trace.size(), 6u);
  EXPECT_EQ(r.running_trace.back(), r.state.running);
  EXPECT_EQ(r.gradients, 48u);
}

TEST(ClientUpdate, FixBnFreezesRunningStatsAfterTStar) {
  Fixture f(6);
  auto c = f.ctx(Algorithm::FixBN, 5);
  c.spec.t_star = 2;
  const auto r = client_update(f.client, f.server.broadcast(), c);
  EXPECT_NE(r.running_trace[2], r.running_trace[1]);
  for (std::size_t t = 3; t < r.running_trace.size(); ++t) EXPECT_EQ(r.running_trace[t], r.running_trace[2]);
  EXPECT_EQ(r.stats_trace[3], r.running_trace[2]);
}

TEST(ClientUpdate, FedBnKeepsLocalAffineAndRunning) {
  Fixture f(7);
  auto local = f.client;
  for (std::size_t i = 0; i < local.weights.size(); ++i)
    if (local.weights[i].bn_affine) local.weights[i].value.fill(0.3);
  local.running[0].mean[0] = 4.0;
  const auto [w, s] = localize(local, f.server.broadcast(), BnLocality::AllBn);
  for (std::size_t i = 0; i < w.size(); ++i) {
    if (w[i].bn_affine) EXPECT_EQ(w[i].value, local.weights[i].value);
    else EXPECT_EQ(w[i].value, f.server.weights[i].value);
  }
  EXPECT_EQ(s, local.running);
  const auto [w2, s2] = localize(local, f.server.broadcast(), BnLocality::RunningStats);
  EXPECT_EQ(w2, f.server.weights);
  EXPECT_EQ(s2, local.running);
}

TEST(ClientUpdate, DivergenceCarriesStepAndClient) {
  Fixture f(8);
  f.client.id = 3;
  auto c = f.ctx(Algorithm::FedAvg, 5, 1e300);
  c.iteration = 40;
  try {
    client_update(f.client, f.server.broadcast(), c);
    FAIL();
  } catch (const DivergenceError& e) {
    EXPECT_GE(e.step(), 40);
    EXPECT_EQ(e.client(), 3u);
  }
}

TEST(OptionTwo, CTrivialCases) {
  const auto w = Architecture::mlp(3, 4, 2).init_params<double>(1);
  const auto c = Architecture::mlp(3, 4, 2).init_params<double>(2);
  EXPECT_EQ(update_c_option2(c, c, w, w, 3, 0.1).squared_norm(), 0.0);
}

TEST(OptionTwo, KSingleStepEqualsBatchStat) {
  const auto zero = one(0, 0);
  const auto start = one(1.0, 2.0), s0 = one(-0.4, 0.7);
  for (double rho : {0.1, 0.5, 0.99}) {
    const auto end = ema_update(start, s0, rho);
    EXPECT_LE(update_k_option2(zero, zero, start, end, 1, rho).max_abs_diff(s0), 1e-12);
  }
}

TEST(OptionTwo, KConstantTraceGivesConstantPlusDelta) {
  const auto kl = one(0.2, 0.1), kg = one(-0.3, 0.5), star = one(1.5, 0.8);
  auto run = one(3.0, 3.0);
  const auto start = run;
  for (int t = 0; t < 6; ++t) run = ema_update(run, star, 0.9);
  EXPECT_LE(update_k_option2(kl, kg, start, run, 6, 0.9).max_abs_diff(kl - kg + star), 1e-12);
}

TEST(OptionTwo, KMatchesWeightedSum) {
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> u(0.0, 3.0);
  const double rho = 0.9;
  auto run = one(u(rng), u(rng));
  const auto start = run;
  std::vector<BNStats<double>> trace;
  for (int t = 0; t < 5; ++t) {
    trace.push_back(one(u(rng), u(rng)));
    run = ema_update(run, trace.back(), rho);
  }
  const auto zero = one(0, 0);
  // Independent definitional sum.
  double m = 0, v = 0;
  for (int t = 0; t < 5; ++t) {
    const double wt = (1 - rho) / (1 - std::pow(rho, 5)) * std::pow(rho, 4 - t);
    m += wt * trace[static_cast<std::size_t>(t)][0].mean[0];
    v += wt * trace[static_cast<std::size_t>(t)][0].var[0];
  }
  const auto k = update_k_option2(zero, zero, start, run, 5, rho);
  EXPECT_NEAR(k[0].mean[0], m, 1e-10);
  EXPECT_NEAR(k[0].var[0], v, 1e-10);
  EXPECT_LE(weighted_stats_sum(trace, rho).max_abs_diff(k), 1e-12);
}

TEST(OptionTwo, KSmallRhoKeepsLastTerm) {
  const double rho = 1e-6;
  auto run = one(5.0, 5.0);
  const auto start = run;
  std::vector<BNStats<double>> trace{one(1, 1), one(2, 3), one(-1, 0.5)};
  for (const auto& s : trace) run = ema_update(run, s, rho);
  const auto zero = one(0, 0);
  EXPECT_LE(update_k_option2(zero, zero, start, run, 3, rho).max_abs_diff(trace.back()), 1e-5);
}

TEST(OptionTwo, KRejectsDegenerateRho) {
  const auto z = one(0, 0);
  EXPECT_THROW(update_k_option2(z, z, z, z, 2, 0.0), ConfigError);
  EXPECT_THROW(update_k_option2(z, z, z, z, 2, 1.0), ConfigError);
}

TEST(OptionOne, StreamingStatsMatchOneShot) {
  Fixture f(9);
  const auto streamed = full_dataset_stats(f.arch, f.server.weights, f.data, 1e-5, 7);
  const auto all = iota_indices(f.data.size());
  const auto one_shot = forward(f.arch, f.server.weights, gather_batch<double>(f.data, all, f.arch.input_shape()),
                                BnPlan<double>::train(2), 1e-5)
                            .batch_stats;
  EXPECT_LE(gap(streamed.flatten(), one_shot.flatten()), 1e-10);
}

TEST(OptionOne, ConstantDatasetHasZeroVariance) {
  Fixture f(10);
  Dataset d = f.data;
  for (std::size_t i = 0; i < d.size(); ++i)
    std::copy(f.data.sample(0).begin(), f.data.sample(0).end(), d.features.begin() + static_cast<std::ptrdiff_t>(i * 6));
  const auto s = full_dataset_stats(f.arch, f.server.weights, d, 1e-5, 4);
  for (const auto& l : s.layers())
    for (double v : l.var) EXPECT_NEAR(v, 0.0, 1e-20);
}

TEST(OptionOne, FullGradientIsMeanOfPerSampleGradients) {
  Fixture f(11);
  const auto sub = f.data.subset(iota_indices(16));
  const auto stats = full_dataset_stats(f.arch, f.server.weights, sub, 1e-5, 5);
  const auto g = full_gradient(f.arch, f.server.weights, sub, stats, 1e-5, 5);
  auto mean = Gradient<double>::zeros_like(f.server.weights);
  for (std::size_t i = 0; i < sub.size(); ++i) {
    const std::vector<std::size_t> idx{i};
    const auto fw = forward(f.arch, f.server.weights, gather_batch<double>(sub, idx, f.arch.input_shape()),
                            BnPlan<double>::injected(stats), 1e-5);
    mean.axpy(1.0 / 16, backward(f.arch, f.server.weights, fw.cache, gather_labels(sub, idx)).grad);
  }
  EXPECT_LE(gap(g.flatten(), mean.flatten()), 1e-10);
}

TEST(OptionOne, DuplicatedDatasetGivesSameControlVariates) {
  Fixture f(12);
  std::vector<std::size_t> twice = iota_indices(f.data.size());
  const auto n = twice.size();
  for (std::size_t i = 0; i < n; ++i) twice.push_back(i);
  const auto dup = f.data.subset(twice);
  EXPECT_LE(gap(update_c_option1(f.arch, f.server.weights, f.data, 1e-5).flatten(),
                update_c_option1(f.arch, f.server.weights, dup, 1e-5).flatten()),
            1e-12);
  EXPECT_LE(gap(update_k_option1(f.arch, f.server.weights, f.data, 1e-5).flatten(),
                update_k_option1(f.arch, f.server.weights, dup, 1e-5).flatten()),
            1e-12);
}

TEST(OptionOne, SingleSampleDataset) {
  Fixture f(13);
  const std::vector<std::size_t> idx{4};
  const auto d = f.data.subset(idx);
  const auto stats = full_dataset_stats(f.arch, f.server.weights, d, 1e-5);
  const auto fw = forward(f.arch, f.server.weights, gather_batch<double>(d, iota_indices(1), f.arch.input_shape()),
                          BnPlan<double>::injected(stats), 1e-5);
  const auto g = backward(f.arch, f.server.weights, fw.cache, d.labels).grad;
  EXPECT_LE(gap(update_c_option1(f.arch, f.server.weights, d, 1e-5).flatten(), g.flatten()), 1e-14);
}

TEST(FedTan, WeightedFirstStepStats) {
  EXPECT_EQ(fedtan_first_step_stats<double>({one(0.7, 0.2)}, {1.0}), one(0.7, 0.2));
  EXPECT_DOUBLE_EQ(fedtan_first_step_stats<double>({one(0, 1), one(2, 1)}, {0.5, 0.5})[0].mean[0], 1.0);
  EXPECT_NEAR(fedtan_first_step_stats<double>({one(1, 1), one(2, 1), one(10, 1)}, {0.5, 0.3, 0.2})[0].mean[0], 3.1,
              1e-14);
  EXPECT_THROW(fedtan_first_step_stats<double>({one(1, 1), one(2, 1)}, {0.5, 0.6}), ConfigError);
}

TEST(FedTan, PooledVarianceOfTwoClients) {
  // Pooled over the union of two equal batches: mean 1, variance 1 + (0 - 1)^2.
  const auto s = fedtan_first_step_stats<double>({one(0, 1), one(2, 1)}, {0.5, 0.5});
  EXPECT_DOUBLE_EQ(s[0].var[0], 2.0);
}

TEST(FedTan, SharedStatsOfIdenticalBatchesAreTheBatchStats) {
  Fixture f(14);
  BatchSampler s = f.client.sampler;
  const auto x = gather_batch<double>(f.data, s.next(), f.arch.input_shape());
  const auto shared = fedtan_shared_stats<double>(f.arch, f.server.weights, {x, x}, {0.5, 0.5}, 1e-5);
  const auto direct = forward(f.arch, f.server.weights, x, BnPlan<double>::train(2), 1e-5).batch_stats;
  EXPECT_LE(gap(shared.flatten(), direct.flatten()), 1e-12);
}
