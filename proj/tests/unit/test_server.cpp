#include <cmath>
#include <vector>

#include <gtest/gtest.h>

#include "bnfl/errors.hpp"
#include "bnfl/server.hpp"

using namespace bnfl;

namespace {

Dataset synthetic(std::uint64_t seed, std::size_t per_class = 12) {
  SyntheticSpec s;
  s.classes = 3;
  s.samples_per_class = per_class;
  s.dims = 5;
  s.seed = seed;
  return gen_synthetic(s);
}

ParamSet<double> scalar_set(double v) {
  return ParamSet<double>({NamedTensor<double>{"x", Tensor<double>({1}, v), false}});
}

}  // namespace

TEST(Aggregate, SingleClientIsUnchanged) {
  const auto w = Architecture::mlp(4, 3, 2).init_params<double>(3);
  EXPECT_EQ(aggregate<double>(std::vector<const ParamSet<double>*>{&w}, {1.0}), w);
}

TEST(Aggregate, WeightedScalars) {
  const auto a = scalar_set(0.0), b = scalar_set(4.0);
  EXPECT_DOUBLE_EQ(aggregate<double>(std::vector<const ParamSet<double>*>{&a, &b}, {0.25, 0.75})[0].value[0], 3.0);
}

TEST(Aggregate, IdenticalInputsAreAFixpoint) {
  const auto w = Architecture::mlp(4, 3, 2).init_params<double>(5);
  EXPECT_EQ(aggregate<double>(std::vector<const ParamSet<double>*>{&w, &w, &w}, {0.2, 0.3, 0.5}), w);
  const auto s = Architecture::mlp(4, 3, 2).init_running_stats<double>();
  EXPECT_EQ(aggregate<double>(std::vector<const BNStats<double>*>{&s, &s}, {0.5, 0.5}), s);
}

TEST(Aggregate, WeightsMustSumToOne) {
  EXPECT_THROW(weights_as<double>({Rational(1, 2), Rational(1, 3)}), ConfigError);
  EXPECT_THROW(weights_as<double>({}), ConfigError);
  EXPECT_NO_THROW(weights_as<double>({Rational(1, 3), Rational(2, 3)}));
}

TEST(Accounting, FedTanRoundsGrowWithDepth) {
  EXPECT_EQ(comm_rounds_per_local_step(Algorithm::FedTAN, 2, 10, 18), Rational(22));
  EXPECT_EQ(comm_rounds_per_local_step(Algorithm::FedAvg, 2, 10, 18), Rational(2, 5));
}

TEST(Accounting, GradientsPerLocalStep) {
  EXPECT_EQ(account_gradients(Algorithm::FedAvg, 2, 128, 1000, 10), Rational(256));
  EXPECT_EQ(account_gradients(Algorithm::BnScaffold2, 5, 32, 1000, 10), Rational(160));
  EXPECT_EQ(account_gradients(Algorithm::Scaffold1, 2, 128, 1000, 3) - account_gradients(Algorithm::Scaffold2, 2, 128, 1000, 3),
            Rational(1000, 3));
  EXPECT_EQ(account_gradients(Algorithm::BnScaffold1, 2, 128, 1000, 10), Rational(356));
}

TEST(Accounting, ParamsPerGlobalStep) {
  const ModelCounts m{100, 10, 4, 2};
  EXPECT_EQ(comm_params_per_global_step(Algorithm::FedAvg, m), 110);
  EXPECT_EQ(comm_params_per_global_step(Algorithm::Scaffold2, m), 210);
  EXPECT_EQ(comm_params_per_global_step(Algorithm::BnScaffold2, m), 220);
  EXPECT_EQ(comm_params_per_global_step(Algorithm::FedTAN, m), 240);
  EXPECT_EQ(comm_params_per_global_step(Algorithm::BnScaffold2, m) - comm_params_per_global_step(Algorithm::Scaffold2, m),
            m.stats);
}

TEST(Accounting, ResNetSizedOverheadRatio) {
  const ModelCounts m{11'180'000, 9'600, 9'600, 20};
  const double scaffold = static_cast<double>(comm_params_per_global_step(Algorithm::Scaffold2, m));
  const double bn = static_cast<double>(comm_params_per_global_step(Algorithm::BnScaffold2, m));
  // |S| / (2|W| + |S|)
  EXPECT_NEAR((bn - scaffold) / scaffold, 9600.0 / 22'369'600.0, 1e-15);
}

TEST(Accounting, CumulativeCountsAreMonotone) {
  const ModelCounts m{100, 10, 4, 2};
  for (auto a : kAllAlgorithms) {
    CommAccount prev;
    for (std::int64_t t = 5; t <= 50; t += 5) {
      const auto acc = account_communication(a, 2, 5, m, t);
      EXPECT_GT(acc.rounds, prev.rounds);
      EXPECT_GT(acc.params, prev.params);
      prev = acc;
    }
  }
}

TEST(Accounting, RejectsNonPositiveCounts) {
  EXPECT_THROW(comm_rounds_per_local_step(Algorithm::FedAvg, 0, 1, 1), ConfigError);
  EXPECT_THROW(account_gradients(Algorithm::FedAvg, 2, 0, 10, 1), ConfigError);
}

TEST(Schedule, MultiStepMilestones) {
  Schedule s;
  s.kind = ScheduleKind::MultiStep;
  s.base_lr = 0.1;
  s.factor = 0.5;
  s.milestones = {100, 200};
  EXPECT_DOUBLE_EQ(lr_at(s, 50), 0.1);
  EXPECT_DOUBLE_EQ(lr_at(s, 150), 0.05);
  EXPECT_DOUBLE_EQ(lr_at(s, 250), 0.025);
}

TEST(Schedule, WarmupRamp) {
  Schedule s;
  s.base_lr = 0.05;
  s.warmup = 500;
  EXPECT_DOUBLE_EQ(lr_at(s, 0), 0.0);
  EXPECT_DOUBLE_EQ(lr_at(s, 250), 0.025);
  EXPECT_DOUBLE_EQ(lr_at(s, 500), 0.05);
  EXPECT_DOUBLE_EQ(round_lr(s, 249), 0.025);
}

TEST(Schedule, StepDecay) {
  Schedule s;
  s.kind = ScheduleKind::Step;
  s.base_lr = 1.0;
  s.factor = 0.1;
  s.step_size = 10;
  EXPECT_DOUBLE_EQ(lr_at(s, 9), 1.0);
  EXPECT_NEAR(lr_at(s, 25), 0.01, 1e-15);
}

TEST(Schedule, Validation) {
  Schedule s;
  s.kind = ScheduleKind::MultiStep;
  s.factor = 0.5;
  s.milestones = {200, 100};
  EXPECT_THROW(s.validate(), ConfigError);
  s.milestones = {100};
  s.factor = 1.5;
  EXPECT_THROW(s.validate(), ConfigError);
  EXPECT_THROW(parse_schedule_kind("cosine"), ConfigError);
}

TEST(Evaluate, ConstantLogitsGiveTheFavouredClassFrequency) {
  const auto arch = Architecture::mlp(5, 4, 3);
  auto w = arch.init_params<double>(1);
  auto& last_w = w[w.size() - 2].value;
  auto& last_b = w[w.size() - 1].value;
  last_w.fill(0.0);
  last_b.fill(0.0);
  last_b[2] = 1.0;
  const auto d = synthetic(2);
  const auto r = evaluate(arch, w, arch.init_running_stats<double>(), d, 1e-5, 7);
  EXPECT_DOUBLE_EQ(r.accuracy, 1.0 / 3.0);
}

TEST(Evaluate, MatchesPerSampleLoop) {
  const auto arch = Architecture::mlp(5, 4, 3);
  const auto w = arch.init_params<double>(9);
  auto running = arch.init_running_stats<double>();
  running[0].mean[1] = 0.4;
  running[1].var[2] = 2.5;
  const auto d = synthetic(3);
  const auto r = evaluate(arch, w, running, d, 1e-5, 5);
  std::size_t correct = 0;
  double loss = 0.0;
  for (std::size_t i = 0; i < d.size(); ++i) {
    const std::vector<std::size_t> idx{i};
    const auto logits = forward(arch, w, gather_batch<double>(d, idx, arch.input_shape()), BnPlan<double>::eval(running),
                                1e-5)
                            .logits;
    double mx = -1e300, z = 0.0;
    int best = 0;
    for (std::size_t k = 0; k < 3; ++k)
      if (logits[k] > mx) {
        mx = logits[k];
        best = static_cast<int>(k);
      }
    for (std::size_t k = 0; k < 3; ++k) z += std::exp(logits[k] - mx);
    loss += mx + std::log(z) - logits[static_cast<std::size_t>(d.labels[i])];
    if (best == d.labels[i]) ++correct;
  }
  EXPECT_DOUBLE_EQ(r.accuracy, static_cast<double>(correct) / static_cast<double>(d.size()));
  EXPECT_NEAR(r.loss, loss / static_cast<double>(d.size()), 1e-12);
}

TEST(Evaluate, RejectsNonFiniteRunningStats) {
  const auto arch = Architecture::mlp(5, 4, 3);
  auto running = arch.init_running_stats<double>();
  running[0].var[0] = std::nan("");
  EXPECT_THROW(evaluate(arch, arch.init_params<double>(1), running, synthetic(1), 1e-5), StructuralError);
}

namespace {

struct Federation {
  Architecture arch = Architecture::mlp(5, 4, 3);
  std::vector<Dataset> data;
  ServerState<double> server;
  std::vector<ClientState<double>> clients;

  Federation() {
    data = {synthetic(1), synthetic(2, 8)};
    server = init_server<double>(arch, 4);
    clients = init_clients(server, data, 6, 4);
  }

  RoundConfig<double> config(Algorithm a, std::size_t E) const {
    RoundConfig<double> c;
    c.arch = &arch;
    c.spec.algorithm = a;
    if (a == Algorithm::FixBN || a == Algorithm::FixBNScaffold) c.spec.t_star = 4;
    c.local_steps = E;
    c.lr = 0.05;
    c.weights = client_weights(data);
    return c;
  }
};

}  // namespace

TEST(RunRound, CountersFollowClosedForms) {
  for (auto a : kAllAlgorithms) {
    Federation f;
    const auto cfg = f.config(a, 3);
    for (int r = 0; r < 4; ++r) run_round(f.server, f.clients, cfg);
    const auto m = ModelCounts::of(f.arch);
    const auto acc = account_communication(a, 2, 3, m, 12);
    EXPECT_EQ(f.server.comm_rounds, acc.rounds) << algorithm_name(a);
    EXPECT_EQ(f.server.comm_params, acc.params) << algorithm_name(a);
    const auto g = account_gradients(a, 2, 6, static_cast<std::int64_t>(f.data[0].size() + f.data[1].size()), 3);
    EXPECT_EQ(Rational(f.server.gradients), g * 12) << algorithm_name(a);
    EXPECT_EQ(f.server.iteration, 12);
  }
}

TEST(RunRound, SiloBnKeepsRunningStatsLocal) {
  Federation f;
  auto cfg = f.config(Algorithm::SiloBN, 2);
  cfg.record = true;
  const auto out = run_round(f.server, f.clients, cfg);
  for (std::size_t i = 0; i < 2; ++i) EXPECT_EQ(f.clients[i].running, out.results[i].state.running);
  EXPECT_NE(f.clients[0].running, f.clients[1].running);
}

TEST(RunRound, FedAvgAggregatesRunningStats) {
  Federation f;
  auto cfg = f.config(Algorithm::FedAvg, 2);
  cfg.record = true;
  const auto out = run_round(f.server, f.clients, cfg);
  const auto P = weights_as<double>(cfg.weights);
  const auto want = aggregate<double>(std::vector<const BNStats<double>*>{&out.results[0].state.running, &out.results[1].state.running}, P);
  EXPECT_EQ(f.server.running, want);
}

TEST(RunRound, FedTanSharesFirstStepStats) {
  Federation f;
  auto cfg = f.config(Algorithm::FedTAN, 2);
  cfg.record = true;
  const auto out = run_round(f.server, f.clients, cfg);
  ASSERT_TRUE(out.shared_first_step.has_value());
  for (const auto& r : out.results) EXPECT_EQ(r.stats_trace[0], *out.shared_first_step);
}

TEST(Centralized, StepUsesScheduleRate) {
  const auto arch = Architecture::mlp(5, 4, 3);
  const auto d = synthetic(6);
  CentralizedTrainer<double> a{&arch, &d, arch.init_params<double>(1), arch.init_running_stats<double>(),
                               BatchSampler(d.size(), 6, 2)};
  auto b = a;
  Schedule s;
  s.base_lr = 0.2;
  s.warmup = 4;
  a.step(s);
  b.step_with(0.05);
  EXPECT_EQ(a.weights, b.weights);
  EXPECT_EQ(a.iteration, 1);
}
