#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "bnfl/bn_stats.hpp"
#include "bnfl/data.hpp"
#include "bnfl/network.hpp"

namespace bnfl {

enum class Algorithm {
  FedAvg,
  Scaffold1,
  Scaffold2,
  BnScaffold1,
  BnScaffold2,
  FedTAN,
  FedBN,
  SiloBN,
  FixBN,
  FixBNScaffold,
  FedBNScaffold,
  SiloBNScaffold,
};

inline constexpr Algorithm kAllAlgorithms[] = {
    Algorithm::FedAvg, Algorithm::Scaffold1,     Algorithm::Scaffold2,     Algorithm::BnScaffold1,
    Algorithm::BnScaffold2, Algorithm::FedTAN,   Algorithm::FedBN,         Algorithm::SiloBN,
    Algorithm::FixBN,  Algorithm::FixBNScaffold, Algorithm::FedBNScaffold, Algorithm::SiloBNScaffold,
};

std::string algorithm_name(Algorithm a);
/// Case-insensitive; accepts the display names ("BN-SCAFFOLD-II", "FedBN+SCAFFOLD", ...).
Algorithm parse_algorithm(const std::string& name);

/// Which BN components a client keeps out of the broadcast.
enum class BnLocality {
  None,
  RunningStats,  // SiloBN
  AllBn,         // FedBN: running statistics and the affine parameters
};

enum class CvOption { None, I, II };

struct AlgorithmTraits {
  CvOption gradient_cv = CvOption::None;
  CvOption stats_cv = CvOption::None;
  BnLocality locality = BnLocality::None;
  bool fixbn = false;
  bool fedtan = false;

  bool option1() const noexcept { return gradient_cv == CvOption::I || stats_cv == CvOption::I; }
  bool uses_c() const noexcept { return gradient_cv != CvOption::None; }
  bool uses_k() const noexcept { return stats_cv != CvOption::None; }
};

AlgorithmTraits algorithm_traits(Algorithm a);

struct AlgorithmSpec {
  Algorithm algorithm = Algorithm::FedAvg;
  /// EMA momentum under kEmaConvention (weight of the old running value).
  double rho = 0.9;
  double var_threshold = 1e-2;
  /// FixBN only: cumulative local iterations before the running statistics freeze.
  std::optional<std::int64_t> t_star;

  AlgorithmTraits traits() const { return algorithm_traits(algorithm); }
  /// Throws ConfigError on inconsistent hyperparameters.
  void validate() const;
};

template <typename T>
struct ControlVariates {
  Gradient<T> c;
  BNStats<T> k;

  static ControlVariates zeros(const Architecture& arch, const ModelParams<T>& like) {
    return {Gradient<T>::zeros_like(like), arch.zero_stats<T>()};
  }
};

template <typename T>
struct ClientState {
  std::size_t id = 0;
  const Dataset* data = nullptr;
  ModelParams<T> weights;
  BNStats<T> running;
  ControlVariates<T> cv;
  BatchSampler sampler;
};

/// What the server sends every client at the start of a round.
template <typename T>
struct GlobalBroadcast {
  ModelParams<T> weights;
  BNStats<T> running;
  ControlVariates<T> cv;
};

template <typename T>
struct ClientUpdateContext {
  const Architecture* arch = nullptr;
  AlgorithmSpec spec;
  std::size_t local_steps = 1;
  T lr = T{0};
  T epsilon = T(1e-5);
  /// Cumulative local iterations completed before this round.
  std::int64_t iteration = 0;
  std::int64_t round = 0;
  /// FedTAN: statistics every client normalizes with at local step 0.
  std::optional<BNStats<T>> shared_first_step;
  /// Keep per-step weights, batches and plans for replay.
  bool record = false;
  std::size_t chunk_size = 256;
};

/// Everything needed to recompute one local gradient.
template <typename T>
struct StepRecord {
  ModelParams<T> weights;
  std::vector<std::size_t> batch;
  BnPlan<T> plan;
};

template <typename T>
struct ClientUpdateResult {
  explicit ClientUpdateResult(ClientState<T> s) : state(std::move(s)) {}

  ClientState<T> state;
  ModelParams<T> start_weights;
  ControlVariates<T> previous_cv;
  /// Statistics used for normalization at every local step.
  std::vector<BNStats<T>> stats_trace;
  /// Raw mini-batch statistics at every local step (empty when none were computed).
  std::vector<BNStats<T>> batch_trace;
  /// Running statistics before step 0 and after every step: E + 1 entries.
  std::vector<BNStats<T>> running_trace;
  std::vector<StepRecord<T>> steps;
  std::vector<T> losses;
  std::size_t clipped = 0;
  std::size_t gradients = 0;
};

/// Starting weights and running statistics of a client after applying its locality rule.
template <typename T>
std::pair<ModelParams<T>, BNStats<T>> localize(const ClientState<T>& state, const GlobalBroadcast<T>& global,
                                               BnLocality locality);

/// E local steps of the variance-reduction family followed by the
/// control-variate updates selected by the algorithm.
template <typename T>
ClientUpdateResult<T> client_update(const ClientState<T>& state, const GlobalBroadcast<T>& global,
                                    const ClientUpdateContext<T>& ctx);

/// c_prev_local - c_prev_global + (w_start - w_end) / (E * lr)
template <typename T>
Gradient<T> update_c_option2(const Gradient<T>& c_prev_local, const Gradient<T>& c_prev_global,
                             const ModelParams<T>& w_start, const ModelParams<T>& w_end, std::size_t local_steps,
                             T lr);

/// k_prev_local - k_prev_global + (running_end - rho^E running_start) / (1 - rho^E).
/// running_end is the value after all E updates.
template <typename T>
BNStats<T> update_k_option2(const BNStats<T>& k_prev_local, const BNStats<T>& k_prev_global,
                            const BNStats<T>& running_start, const BNStats<T>& running_end, std::size_t local_steps,
                            T rho);

/// Full-dataset BN statistics at `w`, layer by layer, each with a streamed two-pass mean/variance.
template <typename T>
BNStats<T> full_dataset_stats(const Architecture& arch, const ModelParams<T>& w, const Dataset& data, T epsilon,
                              std::size_t chunk_size = 256);

/// Full-dataset gradient with the statistics held fixed at `stats`.
template <typename T>
Gradient<T> full_gradient(const Architecture& arch, const ModelParams<T>& w, const Dataset& data,
                          const BNStats<T>& stats, T epsilon, std::size_t chunk_size = 256);

template <typename T>
BNStats<T> update_k_option1(const Architecture& arch, const ModelParams<T>& w, const Dataset& data, T epsilon,
                            std::size_t chunk_size = 256) {
  return full_dataset_stats(arch, w, data, epsilon, chunk_size);
}

template <typename T>
Gradient<T> update_c_option1(const Architecture& arch, const ModelParams<T>& w, const Dataset& data, T epsilon,
                             std::size_t chunk_size = 256) {
  return full_gradient(arch, w, data, full_dataset_stats(arch, w, data, epsilon, chunk_size), epsilon, chunk_size);
}

/// P-weighted combination of per-client statistics: weighted means, and the
/// pooled variance sum_i P_i (var_i + (mean_i - mean)^2). Weights must sum to 1.
template <typename T>
BNStats<T> fedtan_first_step_stats(const std::vector<BNStats<T>>& client_stats, const std::vector<T>& weights);

/// Layer-wise shared statistics of the clients' first batches: layer l is
/// computed with layers before it normalized by the already shared statistics.
template <typename T>
BNStats<T> fedtan_shared_stats(const Architecture& arch, const ModelParams<T>& w,
                               const std::vector<Tensor<T>>& first_batches, const std::vector<T>& weights,
                               T epsilon);

/// Definitional statistics control variate: (1 - rho)/(1 - rho^E) * sum_t rho^(E-1-t) s^t.
template <typename T>
BNStats<T> weighted_stats_sum(const std::vector<BNStats<T>>& trace, T rho);

}  // namespace bnfl
