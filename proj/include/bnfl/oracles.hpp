#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "bnfl/algorithms.hpp"
#include "bnfl/server.hpp"

namespace bnfl {

struct OracleReport {
  std::string name;
  double max_error = 0.0;
  double tolerance = 0.0;
  bool pass = false;
  nlohmann::json witness = nlohmann::json::object();

  /// pass is max_error <= tolerance (a NaN error fails).
  static OracleReport make(std::string name, double max_error, double tolerance,
                           nlohmann::json witness = nlohmann::json::object());
  nlohmann::json to_json() const;
  std::string to_json_line() const;
};

/// max |a - b| / max(1, max |b|) over all entries.
double relative_gap(const std::vector<double>& a, const std::vector<double>& b);

/// Gradients of every recorded local step, recomputed from the recorded
/// weights, batch and normalization plan.
std::vector<Gradient<double>> replay_gradients(const Architecture& arch, const Dataset& data,
                                               const std::vector<StepRecord<double>>& steps, double epsilon);

/// update_c_option2 against the mean of the E local gradients.
OracleReport check_c_recursion(const std::vector<Gradient<double>>& gradients, std::size_t local_steps, double lr,
                               const Gradient<double>& c_prev_local, const Gradient<double>& c_prev_global,
                               const ModelParams<double>& w_start, const ModelParams<double>& w_end,
                               double tolerance = 1e-10);

/// update_k_option2 against (k_prev_local - k_prev_global) plus the
/// geometric-weighted sum of the statistics fed to the running average.
/// `running_trace` holds the E + 1 running values. The witness names which
/// end index (E or E - 1) satisfies the identity.
OracleReport check_k_recursion(const std::vector<BNStats<double>>& stats_trace, double rho,
                               const BNStats<double>& k_prev_local, const BNStats<double>& k_prev_global,
                               const std::vector<BNStats<double>>& running_trace, double tolerance = 1e-10);

struct GradientCheckOptions {
  double h = 1e-5;
  double tolerance = 1e-5;
  /// Coordinates checked per parameter tensor of conv layers; 0 checks all.
  std::size_t conv_coords = 0;
  std::uint64_t seed = 0;
  /// When the central differences at h and h / 10 differ by more than this, a ReLU or
  /// max-pool switch lies within h; the step then shrinks (to h / 1000 at most) until
  /// two successive estimates agree.
  double kink_threshold = 1e-8;
};

/// Central finite differences of the mean cross-entropy under `plan` against
/// the analytic gradient. Error is |analytic - fd| / max(1, |analytic|) in the 2-norm.
OracleReport check_gradients(const Architecture& arch, const ModelParams<double>& w, const Tensor<double>& batch,
                             const std::vector<int>& labels, const BnPlan<double>& plan, double epsilon,
                             const GradientCheckOptions& opts = {});

struct CollapseConfig {
  std::size_t clients = 2;
  std::size_t local_steps = 3;
  std::size_t rounds = 4;
  std::size_t batch_size = 16;
  double lr = 0.05;
  double rho = 0.9;
  double var_threshold = 1e-2;
  std::uint64_t seed = 1;
  /// Gives this client its own batch order (sensitivity check).
  std::optional<std::size_t> permuted_client;
};

/// Identical clients: BN-SCAFFOLD-II must follow FedAvg bit for bit and its
/// control variates must agree across clients from round 2 on.
OracleReport check_homogeneous_collapse(const Architecture& arch, const Dataset& data, const CollapseConfig& cfg);

/// N clients holding the same data and batch order under FedAvg against a
/// single trainer fed the same batches.
OracleReport check_centralized_equality(const Architecture& arch, const Dataset& data, std::size_t clients,
                                        std::size_t local_steps, std::size_t iterations, std::size_t batch_size,
                                        double lr, std::uint64_t seed, double tolerance = 1e-10);

/// Server control variates against the plain weighted sums of the client ones.
OracleReport check_aggregation(const ServerState<double>& server, const std::vector<ClientState<double>>& clients,
                               const std::vector<Rational>& weights, double tolerance = 1e-12);

/// Simulated counters of a short run against the closed-form expressions.
OracleReport check_accounting(Algorithm a, const Architecture& arch, const std::vector<Dataset>& clients,
                              std::size_t local_steps, std::size_t rounds, std::size_t batch_size,
                              std::uint64_t seed);

enum class SuiteLevel { Quick, Full };

/// Every oracle on small seeded problems; used as the experiment gate.
std::vector<OracleReport> run_oracle_suite(SuiteLevel level);

}  // namespace bnfl
