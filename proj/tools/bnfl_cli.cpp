// bnfl: oracle gates, single experiments and sweeps from a config file.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <fmt/format.h>

#include "bnfl/errors.hpp"
#include "bnfl/experiment.hpp"
#include "bnfl/oracles.hpp"

namespace {

void apply_common(bnfl::ExperimentConfig& cfg, const std::optional<std::string>& precision,
                  const std::optional<std::string>& out, const std::vector<std::string>& sets) {
  for (const auto& s : sets) {
    const auto eq = s.find('=');
    if (eq == std::string::npos) throw bnfl::ConfigError(s, "--set expects key=value");
    bnfl::apply_setting(cfg, s.substr(0, eq), s.substr(eq + 1));
  }
  if (precision) bnfl::apply_setting(cfg, "precision", *precision);
  if (out) cfg.output = *out;
  cfg.validate();
}

int verify(bool full, const std::optional<std::string>& out) {
  const auto reports = bnfl::run_oracle_suite(full ? bnfl::SuiteLevel::Full : bnfl::SuiteLevel::Quick);
  std::ofstream file;
  if (out) {
    std::filesystem::create_directories(*out);
    file.open(std::filesystem::path(*out) / "oracles.jsonl");
  }
  bool ok = true;
  for (const auto& r : reports) {
    std::cout << r.to_json_line() << "\n";
    if (file) file << r.to_json_line() << "\n";
    ok = ok && r.pass;
  }
  std::cerr << (ok ? "all oracle gates pass\n" : "oracle gates FAILED\n");
  return ok ? 0 : 3;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"BN-SCAFFOLD federated learning simulator"};
  app.require_subcommand(1);

  bool override_gates = false;
  std::optional<std::string> precision, out;
  std::vector<std::string> sets;
  app.add_flag("--override-gates", override_gates, "Run experiments even when an oracle gate fails");
  app.add_option("--precision", precision, "Floating-point width")->check(CLI::IsMember({"wide", "standard"}));
  app.add_option("--out", out, "Output directory");

  auto* verify_cmd = app.add_subcommand("verify", "Run the oracle suite and print one JSON record per check");
  bool full = false;
  verify_cmd->add_flag("--full", full, "Larger seeds and case counts");

  auto* run_cmd = app.add_subcommand("run", "Run one experiment");
  std::string config;
  run_cmd->add_option("config", config, "Experiment config file")->required()->check(CLI::ExistingFile);
  run_cmd->add_option("--set", sets, "Override a config key (key=value), repeatable");

  auto* sweep_cmd = app.add_subcommand("sweep", "Run one experiment per value of a config key");
  std::string axis;
  std::vector<std::string> values, algorithms;
  sweep_cmd->add_option("config", config, "Base config file")->required()->check(CLI::ExistingFile);
  sweep_cmd->add_option("--axis", axis, "Config key to vary")->required();
  sweep_cmd->add_option("--values", values, "Comma-separated values")->required()->delimiter(',');
  sweep_cmd->add_option("--algorithms", algorithms, "Comma-separated algorithms (default: the config's)")
      ->delimiter(',');
  sweep_cmd->add_option("--set", sets, "Override a config key (key=value), repeatable");

  for (auto* sub : {run_cmd, sweep_cmd, verify_cmd}) {
    sub->fallthrough();
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    // --help and --version come through here with code 0.
    return app.exit(e) == 0 ? 0 : 2;
  }

  try {
    if (*verify_cmd) return verify(full, out);

    auto cfg = bnfl::load_config(config);
    apply_common(cfg, precision, out, sets);
    bnfl::RunOptions opts;
    opts.override_gates = override_gates;

    if (*run_cmd) {
      const auto res = bnfl::run_experiment(cfg, opts);
      for (const auto& f : res.folds) {
        std::cout << fmt::format("fold {}: final accuracy {:.4f}, best {:.4f}{}\n", f.fold, f.final_accuracy,
                                 f.best_accuracy, f.aborted ? " (aborted: " + f.error + ")" : "");
      }
      if (res.ci95) std::cout << fmt::format("95% CI [{:.4f}, {:.4f}]\n", res.ci95->first, res.ci95->second);
      std::cout << "wrote " << cfg.output.string() << "\n";
      for (const auto& f : res.folds)
        if (f.aborted) return 4;
      return 0;
    }
    const auto res = bnfl::run_sweep(cfg, axis, values, algorithms, opts);
    for (const auto& r : res.rows) {
      std::cout << fmt::format("{}={} {:<16} fold {} final {:.4f} {}\n", axis, r.value, r.algorithm, r.fold,
                               r.final_accuracy, r.status);
    }
    std::cout << "wrote " << (cfg.output / "sweep.csv").string() << "\n";
    return 0;
  } catch (const bnfl::GateError& e) {
    std::cerr << e.what() << "\n(use --override-gates to run anyway)\n";
    return 3;
  } catch (const bnfl::ConfigError& e) {
    std::cerr << e.what() << "\n";
    return 2;
  } catch (const bnfl::Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
