#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "bnfl/algorithms.hpp"
#include "bnfl/data.hpp"
#include "bnfl/network.hpp"

namespace bnfl {

// ---------------------------------------------------------------------------
// Learning rate

enum class ScheduleKind { Constant, Step, MultiStep };

struct Schedule {
  ScheduleKind kind = ScheduleKind::Constant;
  double base_lr = 0.5;
  double factor = 1.0;
  /// MultiStep: iterations after which the rate is multiplied by `factor`.
  std::vector<std::int64_t> milestones;
  /// Step: decay period.
  std::int64_t step_size = 0;
  std::int64_t warmup = 0;

  void validate() const;
};

ScheduleKind parse_schedule_kind(const std::string& name);
std::string schedule_kind_name(ScheduleKind k);

/// Decayed rate times the linear warmup ramp min(1, iteration / warmup).
double lr_at(const Schedule& s, std::int64_t iteration);

/// Rate used for every local step of a round that starts after `completed`
/// iterations: the schedule at the round's first (1-based) iteration.
double round_lr(const Schedule& s, std::int64_t completed);

// ---------------------------------------------------------------------------
// Accounting

struct ModelCounts {
  std::int64_t weights = 0;     // |W|
  std::int64_t stats = 0;       // |S|
  std::int64_t bn_affine = 0;   // BN alpha and beta entries within |W|
  std::int64_t depth = 0;       // W_D

  static ModelCounts of(const Architecture& arch);
};

/// Communication rounds per local step.
Rational comm_rounds_per_local_step(Algorithm a, std::int64_t clients, std::int64_t local_steps, std::int64_t depth);
/// Parameters in one client's upload per global step.
std::int64_t comm_params_per_global_step(Algorithm a, const ModelCounts& counts);

struct CommAccount {
  Rational rounds;
  std::int64_t params = 0;
};

/// Cumulative communication after `local_steps_elapsed` local steps
/// (a multiple of E); params count one upload per global step.
CommAccount account_communication(Algorithm a, std::int64_t clients, std::int64_t local_steps,
                                  const ModelCounts& counts, std::int64_t local_steps_elapsed);

/// Gradients computed per local step: N|B|, plus |D|/E for option I.
Rational account_gradients(Algorithm a, std::int64_t clients, std::int64_t batch_size, std::int64_t dataset_size,
                           std::int64_t local_steps);

// ---------------------------------------------------------------------------
// Server

template <typename T>
struct ServerState {
  ModelParams<T> weights;
  BNStats<T> running;
  ControlVariates<T> cv;
  std::int64_t round = 0;
  /// Cumulative local iterations.
  std::int64_t iteration = 0;

  // Simulated counters.
  Rational comm_rounds;
  std::int64_t comm_params = 0;
  std::int64_t gradients = 0;

  GlobalBroadcast<T> broadcast() const { return {weights, running, cv}; }
};

template <typename T>
ServerState<T> init_server(const Architecture& arch, std::uint64_t seed);

template <typename T>
std::vector<ClientState<T>> init_clients(const ServerState<T>& server, const std::vector<Dataset>& data,
                                         std::size_t batch_size, std::uint64_t seed);

struct EvalResult {
  double accuracy = 0.0;
  double loss = 0.0;
};

struct RoundReport {
  std::int64_t round = 0;
  std::int64_t iteration = 0;
  double lr = 0.0;
  std::vector<double> client_loss;
  std::optional<EvalResult> eval;
  Rational comm_rounds;
  std::int64_t comm_params = 0;
  std::int64_t gradients = 0;
  std::size_t clipped = 0;
};

template <typename T>
struct RoundConfig {
  const Architecture* arch = nullptr;
  AlgorithmSpec spec;
  std::size_t local_steps = 1;
  T lr = T{0};
  T epsilon = T(1e-5);
  std::vector<Rational> weights;
  bool record = false;
  std::size_t chunk_size = 256;
};

template <typename T>
struct RoundOutcome {
  RoundReport report;
  /// Per-client results, kept only when recording.
  std::vector<ClientUpdateResult<T>> results;
  std::optional<BNStats<T>> shared_first_step;
};

/// x_0 + sum_{i>=1} P_i (x_i - x_0): equals the common value when all inputs agree.
template <typename T>
ParamSet<T> aggregate(const std::vector<const ParamSet<T>*>& xs, const std::vector<T>& weights);
template <typename T>
BNStats<T> aggregate(const std::vector<const BNStats<T>*>& xs, const std::vector<T>& weights);

/// Converts exact client weights, which must sum to 1 within 1e-9.
template <typename T>
std::vector<T> weights_as(const std::vector<Rational>& weights);

/// One global step: broadcast, sequential client updates in client order,
/// P-weighted aggregation of weights, running statistics and both control variates.
template <typename T>
RoundOutcome<T> run_round(ServerState<T>& server, std::vector<ClientState<T>>& clients, const RoundConfig<T>& cfg);

template <typename T>
EvalResult evaluate(const Architecture& arch, const ModelParams<T>& w, const BNStats<T>& running,
                    const Dataset& test, T epsilon, std::size_t chunk_size = 512);

// ---------------------------------------------------------------------------
// Centralized baseline

template <typename T>
struct CentralizedTrainer {
  const Architecture* arch = nullptr;
  const Dataset* data = nullptr;
  ModelParams<T> weights;
  BNStats<T> running;
  BatchSampler sampler;
  double rho = 0.9;
  T epsilon = T(1e-5);
  std::int64_t iteration = 0;

  /// One SGD step at the schedule's rate for the next (1-based) iteration; returns the loss.
  T step(const Schedule& schedule);
  /// Same as step but with an explicit rate.
  T step_with(T lr);
};

}  // namespace bnfl
