#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "bnfl/algorithms.hpp"
#include "bnfl/data.hpp"
#include "bnfl/oracles.hpp"
#include "bnfl/server.hpp"

namespace bnfl {

enum class Precision { Wide, Standard };

Precision parse_precision(const std::string& name);
std::string precision_name(Precision p);

struct DatasetConfig {
  std::string kind = "synthetic";  // synthetic | idx
  SyntheticSpec synthetic;
  std::filesystem::path images, labels;
  std::filesystem::path test_images, test_labels;
  std::string normalization = "mnist";
  /// Seeded random subset of the training pool; 0 keeps everything.
  std::size_t subset = 0;
  /// Held-out share of the pool when there are no folds and no test files.
  double test_fraction = 0.2;
};

struct ModelConfig {
  std::string kind = "mlp";  // mlp | cnn
  std::size_t hidden = 64;
  std::size_t width1 = 4;
  std::size_t width2 = 8;
};

struct ExperimentConfig {
  AlgorithmSpec algorithm;
  /// Trains one model on the pooled client data with batch size batch_size * N.
  bool centralized = false;
  DatasetConfig dataset;
  ModelConfig model;
  PartitionPlan partition;
  bool partition_seed_set = false;
  std::size_t local_steps = 1;
  std::optional<std::size_t> rounds;
  std::optional<std::size_t> iterations;
  std::size_t batch_size = 128;
  Schedule schedule;
  double epsilon = 1e-5;
  Precision precision = Precision::Wide;
  std::size_t folds = 1;
  std::uint64_t seed = 0;
  std::filesystem::path output = "out";
  /// Raw key/value pairs as read, echoed into the metadata.
  std::map<std::string, std::string> echo;

  /// Number of global steps after reconciling rounds and iterations.
  std::size_t resolved_rounds() const;
  std::size_t resolved_iterations() const { return resolved_rounds() * local_steps; }
  std::string algorithm_label() const;
  void validate() const;
};

/// Sets one dotted key ("partition.p", "schedule.lr", ...). Throws ConfigError naming the key.
void apply_setting(ExperimentConfig& cfg, const std::string& key, const std::string& value,
                   std::optional<std::size_t> line = std::nullopt);

/// `key = value` lines, `[section]` headers prefixing later keys with "section.",
/// and `#` or `;` comments.
ExperimentConfig parse_config(const std::string& text);
ExperimentConfig load_config(const std::filesystem::path& path);

/// Named seeds derived from the master seed.
struct SeedTree {
  std::uint64_t master = 0;
  std::uint64_t data = 0;
  std::uint64_t subset = 0;
  std::uint64_t folds = 0;
  std::uint64_t partition = 0;
  std::uint64_t init = 0;
  std::uint64_t samplers = 0;

  static SeedTree from(const ExperimentConfig& cfg, std::size_t fold);
  nlohmann::json to_json() const;
};

Architecture build_architecture(const ModelConfig& m, const Dataset& data);

struct FoldData {
  std::vector<Dataset> clients;
  Dataset train;
  Dataset test;
};

/// Loads the pool, splits it into train/test per fold, then partitions the train part.
std::vector<FoldData> prepare_data(const ExperimentConfig& cfg);

struct FoldResult {
  std::size_t fold = 0;
  std::vector<RoundReport> rounds;
  double final_accuracy = 0.0;
  double best_accuracy = 0.0;
  double final_loss = 0.0;
  bool aborted = false;
  std::string error;
};

struct ExperimentResult {
  std::vector<FoldResult> folds;
  double mean_accuracy = 0.0;
  /// Two-sided 95% t-interval over folds; absent with a single fold.
  std::optional<std::pair<double, double>> ci95;
  std::vector<OracleReport> gates;
};

struct RunOptions {
  bool run_gates = true;
  bool override_gates = false;
  bool write_files = true;
  SuiteLevel gate_level = SuiteLevel::Quick;
};

/// Trains one fold, evaluating after every global step. Divergence marks the fold aborted.
FoldResult run_fold(const ExperimentConfig& cfg, const FoldData& data, std::size_t fold);

ExperimentResult run_experiment(const ExperimentConfig& cfg, const RunOptions& opts = {});

/// mean +- t_{0.975, n-1} * s / sqrt(n); nullopt for fewer than two values.
std::optional<std::pair<double, double>> t_interval95(const std::vector<double>& xs);

struct SweepRow {
  std::string value;
  std::string algorithm;
  std::size_t fold = 0;
  double final_accuracy = 0.0;
  double best_accuracy = 0.0;
  std::string status;
};

struct SweepResult {
  std::vector<SweepRow> rows;
  std::vector<std::string> warnings;
};

/// One experiment per (value, algorithm) under `base.output / <axis>=<value> / <algorithm>`.
/// With axis local_steps the iteration budget of `base` is kept fixed.
SweepResult run_sweep(const ExperimentConfig& base, const std::string& axis, const std::vector<std::string>& values,
                      const std::vector<std::string>& algorithms, const RunOptions& opts = {});

std::string format_rational(const Rational& r);
std::string rounds_csv(const FoldResult& fold, std::size_t clients);
std::string summary_csv(const ExperimentResult& r);
std::string sweep_csv(const std::string& axis, const SweepResult& r);

}  // namespace bnfl
