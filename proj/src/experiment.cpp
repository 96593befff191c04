#include "bnfl/experiment.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <ctime>
#include <fstream>
#include <iostream>
#include <random>
#include <set>
#include <sstream>

#include <boost/math/distributions/students_t.hpp>
#include <fmt/format.h>

#include "bnfl/errors.hpp"

namespace bnfl {

Precision parse_precision(const std::string& name) {
  if (name == "wide" || name == "double") return Precision::Wide;
  if (name == "standard" || name == "float") return Precision::Standard;
  throw ConfigError("precision", "expected wide or standard, got '" + name + "'");
}

std::string precision_name(Precision p) { return p == Precision::Wide ? "wide" : "standard"; }

// ---------------------------------------------------------------------------
// Config

namespace {

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

std::string lower(std::string s) {
  std::transform(s.begin(), s.end(), s.begin(), [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  return s;
}

template <typename N>
N parse_number(const std::string& key, const std::string& v, std::optional<std::size_t> line) {
  N out{};
  const auto* end = v.data() + v.size();
  const auto [ptr, ec] = std::from_chars(v.data(), end, out);
  if (ec != std::errc() || ptr != end) throw ConfigError(key, "not a valid number: '" + v + "'", line);
  return out;
}

std::vector<std::string> split_list(const std::string& v) {
  std::vector<std::string> out;
  std::stringstream ss(v);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

bool parse_bool(const std::string& key, const std::string& v, std::optional<std::size_t> line) {
  const auto l = lower(v);
  if (l == "true" || l == "1" || l == "yes") return true;
  if (l == "false" || l == "0" || l == "no") return false;
  throw ConfigError(key, "expected true or false, got '" + v + "'", line);
}

const std::map<std::string, std::string>& aliases() {
  static const std::map<std::string, std::string> m = {
      {"E", "local_steps"},          {"R", "rounds"},
      {"N", "partition.clients"},    {"p", "partition.p"},
      {"schedule.lr", "schedule.base_lr"}, {"lr", "schedule.base_lr"},
      {"algorithm.name", "algorithm"},     {"algorithm.rho", "rho"},
      {"algorithm.var_threshold", "var_threshold"}, {"algorithm.t_star", "t_star"},
      {"dataset.cluster_spread", "dataset.spread"},
  };
  return m;
}

}  // namespace

void apply_setting(ExperimentConfig& cfg, const std::string& raw_key, const std::string& value,
                   std::optional<std::size_t> line) {
  std::string key = raw_key;
  if (auto it = aliases().find(key); it != aliases().end()) key = it->second;
  auto num = [&]<typename N>(N& slot) { slot = parse_number<N>(key, value, line); };
  auto& ds = cfg.dataset;
  auto& syn = ds.synthetic;

  try {
    if (key == "seed") num(cfg.seed);
    else if (key == "algorithm") {
      if (lower(value) == "centralized") {
        cfg.centralized = true;
      } else {
        cfg.centralized = false;
        cfg.algorithm.algorithm = parse_algorithm(value);
      }
    } else if (key == "rho") num(cfg.algorithm.rho);
    else if (key == "var_threshold") num(cfg.algorithm.var_threshold);
    else if (key == "t_star") {
      if (value.empty() || lower(value) == "none") cfg.algorithm.t_star.reset();
      else cfg.algorithm.t_star = parse_number<std::int64_t>(key, value, line);
    } else if (key == "epsilon") num(cfg.epsilon);
    else if (key == "local_steps") num(cfg.local_steps);
    else if (key == "rounds") cfg.rounds = parse_number<std::size_t>(key, value, line);
    else if (key == "iterations") cfg.iterations = parse_number<std::size_t>(key, value, line);
    else if (key == "batch_size") num(cfg.batch_size);
    else if (key == "precision") cfg.precision = parse_precision(value);
    else if (key == "folds") num(cfg.folds);
    else if (key == "output") cfg.output = value;
    else if (key == "dataset.kind") ds.kind = lower(value);
    else if (key == "dataset.classes") num(syn.classes);
    else if (key == "dataset.samples_per_class") num(syn.samples_per_class);
    else if (key == "dataset.dims") num(syn.dims);
    else if (key == "dataset.spread") num(syn.cluster_spread);
    else if (key == "dataset.scale") num(syn.scale);
    else if (key == "dataset.group_shift") num(syn.group_shift);
    else if (key == "dataset.images") ds.images = value;
    else if (key == "dataset.labels") ds.labels = value;
    else if (key == "dataset.test_images") ds.test_images = value;
    else if (key == "dataset.test_labels") ds.test_labels = value;
    else if (key == "dataset.normalization") {
      Normalization::preset(value);
      ds.normalization = value;
    } else if (key == "dataset.subset") num(ds.subset);
    else if (key == "dataset.test_fraction") num(ds.test_fraction);
    else if (key == "model.kind") cfg.model.kind = lower(value);
    else if (key == "model.hidden") num(cfg.model.hidden);
    else if (key == "model.width1") num(cfg.model.width1);
    else if (key == "model.width2") num(cfg.model.width2);
    else if (key == "partition.clients") num(cfg.partition.clients);
    else if (key == "partition.p") num(cfg.partition.p);
    else if (key == "partition.seed") {
      num(cfg.partition.seed);
      cfg.partition_seed_set = true;
    } else if (key == "schedule.kind") cfg.schedule.kind = parse_schedule_kind(lower(value));
    else if (key == "schedule.base_lr") num(cfg.schedule.base_lr);
    else if (key == "schedule.factor") num(cfg.schedule.factor);
    else if (key == "schedule.step_size") num(cfg.schedule.step_size);
    else if (key == "schedule.warmup") num(cfg.schedule.warmup);
    else if (key == "schedule.milestones") {
      cfg.schedule.milestones.clear();
      for (const auto& m : split_list(value)) cfg.schedule.milestones.push_back(parse_number<std::int64_t>(key, m, line));
    } else if (key == "centralized") cfg.centralized = parse_bool(key, value, line);
    else throw ConfigError(key, "unknown key", line);
  } catch (const ConfigError& e) {
    if (e.line() || !line) throw;
    throw ConfigError(key, e.what(), line);
  }
  cfg.echo[key] = value;
}

ExperimentConfig parse_config(const std::string& text) {
  ExperimentConfig cfg;
  std::istringstream in(text);
  std::string raw, section;
  std::size_t line = 0;
  while (std::getline(in, raw)) {
    ++line;
    const auto hash = raw.find_first_of("#;");
    auto s = trim(std::string_view(raw).substr(0, hash));
    if (s.empty()) continue;
    if (s.front() == '[') {
      if (s.back() != ']') throw ConfigError("", "unterminated section header", line);
      section = trim(std::string_view(s).substr(1, s.size() - 2));
      continue;
    }
    const auto eq = s.find('=');
    if (eq == std::string::npos) throw ConfigError("", "expected key = value", line);
    auto key = trim(std::string_view(s).substr(0, eq));
    const auto value = trim(std::string_view(s).substr(eq + 1));
    if (key.empty()) throw ConfigError("", "missing key", line);
    if (!section.empty()) key = section + "." + key;
    apply_setting(cfg, key, value, line);
  }
  cfg.validate();
  return cfg;
}

ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw ConfigError("", "cannot open " + path.string());
  std::stringstream ss;
  ss << f.rdbuf();
  auto cfg = parse_config(ss.str());
  const auto base = path.parent_path();
  for (auto* p : {&cfg.dataset.images, &cfg.dataset.labels, &cfg.dataset.test_images, &cfg.dataset.test_labels}) {
    if (!p->empty() && p->is_relative()) *p = base / *p;
  }
  return cfg;
}

std::size_t ExperimentConfig::resolved_rounds() const {
  if (local_steps == 0) throw ConfigError("local_steps", "must be positive");
  if (rounds && iterations) {
    if (*rounds * local_steps != *iterations) {
      throw ConfigError("iterations", fmt::format("{} iterations disagree with {} rounds of E = {}", *iterations,
                                                  *rounds, local_steps));
    }
    return *rounds;
  }
  if (rounds) return *rounds;
  const std::size_t it = iterations.value_or(3500);
  if (it % local_steps != 0) {
    throw ConfigError("iterations", fmt::format("{} is not a multiple of E = {}", it, local_steps));
  }
  return it / local_steps;
}

std::string ExperimentConfig::algorithm_label() const {
  return centralized ? "Centralized" : algorithm_name(algorithm.algorithm);
}

namespace {

/// FixBN variants default to freezing at half the iteration budget.
AlgorithmSpec effective_spec(const ExperimentConfig& cfg) {
  auto spec = cfg.algorithm;
  if (spec.traits().fixbn && !spec.t_star) spec.t_star = static_cast<std::int64_t>(cfg.resolved_iterations() / 2);
  return spec;
}

}  // namespace

void ExperimentConfig::validate() const {
  if (!centralized) effective_spec(*this).validate();
  if (!(partition.p >= 0.5 && partition.p <= 1.0)) throw ConfigError("partition.p", "must lie in [0.5, 1]");
  if (partition.clients == 0) throw ConfigError("partition.clients", "must be positive");
  if (local_steps == 0) throw ConfigError("local_steps", "must be positive");
  if (resolved_rounds() == 0) throw ConfigError("rounds", "must be positive");
  if (batch_size < 2) throw ConfigError("batch_size", "batch normalization needs at least 2 samples");
  if (folds == 0) throw ConfigError("folds", "must be positive");
  if (!(epsilon > 0.0)) throw ConfigError("epsilon", "must be positive");
  schedule.validate();
  if (dataset.kind == "idx") {
    if (dataset.images.empty()) throw ConfigError("dataset.images", "required for idx datasets");
    if (dataset.labels.empty()) throw ConfigError("dataset.labels", "required for idx datasets");
    if (dataset.test_images.empty() != dataset.test_labels.empty()) {
      throw ConfigError("dataset.test_labels", "test images and labels go together");
    }
  } else if (dataset.kind != "synthetic") {
    throw ConfigError("dataset.kind", "expected synthetic or idx, got '" + dataset.kind + "'");
  }
  if (dataset.kind == "synthetic") {
    const auto& s = dataset.synthetic;
    if (s.classes < 2) throw ConfigError("dataset.classes", "need at least 2 classes");
    if (s.samples_per_class == 0) throw ConfigError("dataset.samples_per_class", "must be positive");
    if (s.dims < s.classes) throw ConfigError("dataset.dims", "must be at least the class count");
    if (!(s.cluster_spread >= 0.0)) throw ConfigError("dataset.spread", "must be non-negative");
  }
  if (!(dataset.test_fraction > 0.0 && dataset.test_fraction < 1.0)) {
    throw ConfigError("dataset.test_fraction", "must lie in (0, 1)");
  }
  if (model.kind != "mlp" && model.kind != "cnn") throw ConfigError("model.kind", "expected mlp or cnn");
  if (model.hidden == 0 || model.width1 == 0 || model.width2 == 0) throw ConfigError("model", "widths must be positive");
}

SeedTree SeedTree::from(const ExperimentConfig& cfg, std::size_t fold) {
  SeedTree t;
  t.master = cfg.seed;
  t.data = derive_seed(cfg.seed, 1);
  t.subset = derive_seed(cfg.seed, 2);
  t.folds = derive_seed(cfg.seed, 3);
  t.partition = cfg.partition_seed_set ? cfg.partition.seed : derive_seed(cfg.seed, 4, fold);
  t.init = derive_seed(cfg.seed, 5, fold);
  t.samplers = derive_seed(cfg.seed, 6, fold);
  return t;
}

nlohmann::json SeedTree::to_json() const {
  return {{"master", master}, {"data", data},     {"subset", subset},    {"folds", folds},
          {"partition", partition}, {"init", init}, {"samplers", samplers}};
}

Architecture build_architecture(const ModelConfig& m, const Dataset& data) {
  if (m.kind == "mlp") return Architecture::mlp(data.sample_size(), m.hidden, data.class_count);
  const auto& s = data.sample_shape;
  if (s.size() != 3) {
    throw ConfigError("model.kind", "cnn needs [channels, height, width] samples, got " + shape_string(s));
  }
  return Architecture::small_cnn(s[0], s[1], s[2], data.class_count, m.width1, m.width2);
}

// ---------------------------------------------------------------------------
// Data

namespace {

std::vector<std::size_t> shuffled(std::size_t n, std::uint64_t seed) {
  auto idx = iota_indices(n);
  std::mt19937_64 rng(seed);
  std::shuffle(idx.begin(), idx.end(), rng);
  return idx;
}

}  // namespace

std::vector<FoldData> prepare_data(const ExperimentConfig& cfg) {
  const auto seeds = SeedTree::from(cfg, 0);
  Dataset pool;
  std::optional<Dataset> test;
  if (cfg.dataset.kind == "synthetic") {
    auto spec = cfg.dataset.synthetic;
    spec.seed = seeds.data;
    pool = gen_synthetic(spec);
  } else {
    const auto norm = Normalization::preset(cfg.dataset.normalization);
    pool = load_idx(cfg.dataset.images, cfg.dataset.labels, norm);
    if (!cfg.dataset.test_images.empty()) test = load_idx(cfg.dataset.test_images, cfg.dataset.test_labels, norm);
  }
  if (cfg.dataset.subset > 0 && cfg.dataset.subset < pool.size()) {
    auto idx = shuffled(pool.size(), seeds.subset);
    idx.resize(cfg.dataset.subset);
    std::sort(idx.begin(), idx.end());
    pool = pool.subset(idx);
  }

  std::vector<std::pair<Dataset, Dataset>> splits;
  if (cfg.folds >= 2) {
    for (const auto& f : make_folds(pool.size(), cfg.folds, seeds.folds)) {
      splits.emplace_back(pool.subset(f.train), pool.subset(f.test));
    }
  } else if (test) {
    splits.emplace_back(pool, *test);
  } else {
    auto idx = shuffled(pool.size(), seeds.folds);
    const auto n_test = std::max<std::size_t>(
        1, static_cast<std::size_t>(std::llround(cfg.dataset.test_fraction * static_cast<double>(pool.size()))));
    std::vector<std::size_t> te(idx.end() - static_cast<std::ptrdiff_t>(n_test), idx.end());
    idx.resize(idx.size() - n_test);
    std::sort(idx.begin(), idx.end());
    std::sort(te.begin(), te.end());
    splits.emplace_back(pool.subset(idx), pool.subset(te));
  }

  std::vector<FoldData> out;
  for (std::size_t k = 0; k < splits.size(); ++k) {
    auto plan = cfg.partition;
    plan.seed = SeedTree::from(cfg, k).partition;
    FoldData fd;
    fd.clients = partition_label_skew(splits[k].first, plan);
    fd.train = std::move(splits[k].first);
    fd.test = std::move(splits[k].second);
    out.push_back(std::move(fd));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Training

namespace {

double final_or(const std::vector<RoundReport>& rs, double fallback) {
  for (auto it = rs.rbegin(); it != rs.rend(); ++it)
    if (it->eval) return it->eval->accuracy;
  return fallback;
}

template <typename T>
void train_federated(const ExperimentConfig& cfg, const FoldData& data, const SeedTree& seeds, FoldResult& out) {
  const auto arch = build_architecture(cfg.model, data.train);
  auto server = init_server<T>(arch, seeds.init);
  auto clients = init_clients(server, data.clients, cfg.batch_size, seeds.samplers);
  RoundConfig<T> rc;
  rc.arch = &arch;
  rc.spec = effective_spec(cfg);
  rc.local_steps = cfg.local_steps;
  rc.epsilon = static_cast<T>(cfg.epsilon);
  rc.weights = client_weights(data.clients);
  const auto R = cfg.resolved_rounds();
  for (std::size_t r = 0; r < R; ++r) {
    rc.lr = static_cast<T>(round_lr(cfg.schedule, server.iteration));
    auto outcome = run_round(server, clients, rc);
    outcome.report.eval = evaluate(arch, server.weights, server.running, data.test, rc.epsilon);
    out.rounds.push_back(std::move(outcome.report));
  }
}

template <typename T>
void train_centralized(const ExperimentConfig& cfg, const FoldData& data, const SeedTree& seeds, FoldResult& out) {
  const auto arch = build_architecture(cfg.model, data.train);
  const auto init = init_server<T>(arch, seeds.init);
  const std::size_t batch = cfg.batch_size * cfg.partition.clients;
  CentralizedTrainer<T> trainer{&arch,
                                &data.train,
                                init.weights,
                                init.running,
                                BatchSampler(data.train.size(), std::min(batch, data.train.size()), seeds.samplers),
                                cfg.algorithm.rho,
                                static_cast<T>(cfg.epsilon),
                                0};
  std::int64_t gradients = 0;
  const auto R = cfg.resolved_rounds();
  for (std::size_t r = 0; r < R; ++r) {
    RoundReport rep;
    rep.lr = round_lr(cfg.schedule, trainer.iteration);
    double loss = 0.0;
    for (std::size_t t = 0; t < cfg.local_steps; ++t) {
      try {
        loss += static_cast<double>(trainer.step(cfg.schedule));
      } catch (const DivergenceError& e) {
        throw DivergenceError(e.step(), std::nullopt, static_cast<std::int64_t>(r + 1));
      }
    }
    gradients += static_cast<std::int64_t>(trainer.sampler.batch_size() * cfg.local_steps);
    rep.round = static_cast<std::int64_t>(r + 1);
    rep.iteration = trainer.iteration;
    rep.client_loss = {loss / static_cast<double>(cfg.local_steps)};
    rep.gradients = gradients;
    rep.eval = evaluate(arch, trainer.weights, trainer.running, data.test, static_cast<T>(cfg.epsilon));
    out.rounds.push_back(std::move(rep));
  }
}

}  // namespace

FoldResult run_fold(const ExperimentConfig& cfg, const FoldData& data, std::size_t fold) {
  FoldResult out;
  out.fold = fold;
  const auto seeds = SeedTree::from(cfg, fold);
  try {
    const bool wide = cfg.precision == Precision::Wide;
    if (cfg.centralized) {
      wide ? train_centralized<double>(cfg, data, seeds, out) : train_centralized<float>(cfg, data, seeds, out);
    } else {
      wide ? train_federated<double>(cfg, data, seeds, out) : train_federated<float>(cfg, data, seeds, out);
    }
  } catch (const DivergenceError& e) {
    out.aborted = true;
    out.error = e.what();
  }
  out.final_accuracy = final_or(out.rounds, 0.0);
  out.final_loss = out.rounds.empty() || !out.rounds.back().eval ? NAN : out.rounds.back().eval->loss;
  out.best_accuracy = 0.0;
  for (const auto& r : out.rounds)
    if (r.eval) out.best_accuracy = std::max(out.best_accuracy, r.eval->accuracy);
  return out;
}

std::optional<std::pair<double, double>> t_interval95(const std::vector<double>& xs) {
  if (xs.size() < 2) return std::nullopt;
  const auto n = static_cast<double>(xs.size());
  double mean = 0.0;
  for (double x : xs) mean += x;
  mean /= n;
  double ss = 0.0;
  for (double x : xs) ss += (x - mean) * (x - mean);
  const double sd = std::sqrt(ss / (n - 1));
  const boost::math::students_t dist(n - 1);
  const double half = boost::math::quantile(dist, 0.975) * sd / std::sqrt(n);
  return std::make_pair(mean - half, mean + half);
}

// ---------------------------------------------------------------------------
// Output

std::string format_rational(const Rational& r) {
  if (r.denominator() == 1) return std::to_string(r.numerator());
  return fmt::format("{}/{}", r.numerator(), r.denominator());
}

std::string rounds_csv(const FoldResult& fold, std::size_t clients) {
  std::string out = "round,iteration,lr";
  for (std::size_t i = 0; i < clients; ++i) out += fmt::format(",loss_client_{}", i);
  out += ",eval_accuracy,eval_loss,comm_rounds,comm_params,gradients\n";
  for (const auto& r : fold.rounds) {
    out += fmt::format("{},{},{}", r.round, r.iteration, r.lr);
    for (std::size_t i = 0; i < clients; ++i) {
      out += i < r.client_loss.size() ? fmt::format(",{}", r.client_loss[i]) : std::string(",");
    }
    if (r.eval) out += fmt::format(",{},{}", r.eval->accuracy, r.eval->loss);
    else out += ",,";
    out += fmt::format(",{},{},{}\n", format_rational(r.comm_rounds), r.comm_params, r.gradients);
  }
  if (fold.aborted) out += "# aborted: " + fold.error + "\n";
  return out;
}

std::string summary_csv(const ExperimentResult& r) {
  std::string out = "fold,final_accuracy,best_accuracy,final_loss,status\n";
  std::vector<double> fin, best, loss;
  for (const auto& f : r.folds) {
    out += fmt::format("{},{},{},{},{}\n", f.fold, f.final_accuracy, f.best_accuracy, f.final_loss,
                       f.aborted ? "aborted" : "ok");
    fin.push_back(f.final_accuracy);
    best.push_back(f.best_accuracy);
    loss.push_back(f.final_loss);
  }
  auto mean = [](const std::vector<double>& v) {
    double s = 0.0;
    for (double x : v) s += x;
    return v.empty() ? NAN : s / static_cast<double>(v.size());
  };
  out += fmt::format("mean,{},{},{},\n", mean(fin), mean(best), mean(loss));
  const auto cf = t_interval95(fin), cb = t_interval95(best), cl = t_interval95(loss);
  auto cell = [](const std::optional<std::pair<double, double>>& ci, bool low) {
    return ci ? fmt::format("{}", low ? ci->first : ci->second) : std::string();
  };
  out += fmt::format("ci95_low,{},{},{},\n", cell(cf, true), cell(cb, true), cell(cl, true));
  out += fmt::format("ci95_high,{},{},{},\n", cell(cf, false), cell(cb, false), cell(cl, false));
  return out;
}

std::string sweep_csv(const std::string& axis, const SweepResult& r) {
  std::string out = fmt::format("{},algorithm,fold,final_accuracy,best_accuracy,status\n", axis);
  for (const auto& row : r.rows) {
    auto status = row.status;
    std::replace(status.begin(), status.end(), ',', ';');
    std::replace(status.begin(), status.end(), '\n', ' ');
    out += fmt::format("{},{},{},{},{},{}\n", row.value, row.algorithm, row.fold, row.final_accuracy,
                       row.best_accuracy, status);
  }
  return out;
}

namespace {

void write_text(const std::filesystem::path& path, const std::string& text) {
  std::filesystem::create_directories(path.parent_path());
  std::ofstream f(path, std::ios::binary);
  if (!f) throw Error("cannot write " + path.string());
  f << text;
}

std::string utc_now() {
  const auto t = std::time(nullptr);
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

nlohmann::json metadata(const ExperimentConfig& cfg, const ExperimentResult& res, const RunOptions& opts,
                        const std::vector<FoldData>& data) {
  nlohmann::json j;
  j["algorithm"] = cfg.algorithm_label();
  j["config"] = cfg.echo;
  const auto spec = effective_spec(cfg);
  j["resolved"] = {{"rounds", cfg.resolved_rounds()},
                   {"iterations", cfg.resolved_iterations()},
                   {"local_steps", cfg.local_steps},
                   {"batch_size", cfg.batch_size},
                   {"clients", cfg.partition.clients},
                   {"p", cfg.partition.p},
                   {"rho", spec.rho},
                   {"var_threshold", spec.var_threshold},
                   {"epsilon", cfg.epsilon},
                   {"precision", precision_name(cfg.precision)},
                   {"schedule", schedule_kind_name(cfg.schedule.kind)},
                   {"base_lr", cfg.schedule.base_lr},
                   {"folds", cfg.folds}};
  if (spec.t_star) j["resolved"]["t_star"] = *spec.t_star;
  j["ema_convention"] = kEmaConvention == EmaConvention::RetainRho ? "running = rho * running + (1 - rho) * batch"
                                                                   : "running = (1 - rho) * running + rho * batch";
  j["fold_protocol"] = "fold first, then label-skew partition of each fold's training split";
  j["evaluation_cadence"] = "once per global step";
  if (cfg.centralized) j["centralized_batch_size"] = cfg.batch_size * cfg.partition.clients;
  nlohmann::json folds = nlohmann::json::array();
  for (std::size_t k = 0; k < data.size(); ++k) {
    nlohmann::json f = {{"fold", k}, {"seeds", SeedTree::from(cfg, k).to_json()}, {"test_samples", data[k].test.size()}};
    for (const auto& c : data[k].clients) f["client_samples"].push_back(c.size());
    folds.push_back(std::move(f));
  }
  j["folds"] = std::move(folds);
  j["gates"] = {{"ran", opts.run_gates}, {"override", opts.override_gates}};
  for (const auto& g : res.gates) j["gates"]["results"][g.name] = g.pass;
  j["timestamp"] = utc_now();
  return j;
}

std::string gates_jsonl(const std::vector<OracleReport>& gates) {
  std::string out;
  for (const auto& g : gates) out += g.to_json_line() + "\n";
  return out;
}

std::vector<OracleReport> run_gates(const RunOptions& opts) {
  auto gates = run_oracle_suite(opts.gate_level);
  std::vector<std::string> failed;
  for (const auto& g : gates)
    if (!g.pass) failed.push_back(g.name);
  if (!failed.empty() && !opts.override_gates) throw GateError(failed);
  return gates;
}

}  // namespace

ExperimentResult run_experiment(const ExperimentConfig& cfg, const RunOptions& opts) {
  cfg.validate();
  ExperimentResult res;
  if (opts.run_gates) {
    try {
      res.gates = run_gates(opts);
    } catch (const GateError&) {
      if (opts.write_files) write_text(cfg.output / "oracles.jsonl", gates_jsonl(run_oracle_suite(opts.gate_level)));
      throw;
    }
    if (opts.write_files) write_text(cfg.output / "oracles.jsonl", gates_jsonl(res.gates));
  }

  const auto data = prepare_data(cfg);
  const std::size_t clients = cfg.centralized ? 1 : cfg.partition.clients;
  std::vector<double> finals;
  for (std::size_t k = 0; k < data.size(); ++k) {
    auto fold = run_fold(cfg, data[k], k);
    if (opts.write_files) {
      const auto dir = data.size() == 1 ? cfg.output : cfg.output / fmt::format("fold_{}", k);
      write_text(dir / "rounds.csv", rounds_csv(fold, clients));
    }
    finals.push_back(fold.final_accuracy);
    res.folds.push_back(std::move(fold));
  }
  double s = 0.0;
  for (double x : finals) s += x;
  res.mean_accuracy = s / static_cast<double>(finals.size());
  res.ci95 = t_interval95(finals);
  if (opts.write_files) {
    write_text(cfg.output / "summary.csv", summary_csv(res));
    write_text(cfg.output / "metadata.json", metadata(cfg, res, opts, data).dump(2) + "\n");
  }
  return res;
}

// ---------------------------------------------------------------------------
// Sweeps

namespace {

std::string path_safe(std::string s) {
  for (auto& c : s)
    if (!std::isalnum(static_cast<unsigned char>(c)) && c != '-' && c != '.' && c != '_' && c != '=' && c != '+') c = '_';
  return s;
}

}  // namespace

SweepResult run_sweep(const ExperimentConfig& base, const std::string& axis, const std::vector<std::string>& values,
                      const std::vector<std::string>& algorithms, const RunOptions& opts) {
  SweepResult out;
  std::string key = axis;
  if (auto it = aliases().find(key); it != aliases().end()) key = it->second;
  {
    auto probe = base;
    if (values.empty()) throw ConfigError(axis, "no sweep values");
    apply_setting(probe, key, values.front());
  }
  std::vector<std::string> unique;
  std::set<std::string> seen;
  for (const auto& v : values) {
    if (seen.insert(v).second) unique.push_back(v);
    else out.warnings.push_back("duplicate sweep value '" + v + "' ignored");
  }
  std::vector<std::string> algs = algorithms;
  if (algs.empty()) algs.push_back(base.algorithm_label());
  for (const auto& w : out.warnings) std::cerr << "warning: " << w << "\n";

  auto sub_opts = opts;
  if (opts.run_gates) {
    const auto gates = run_gates(opts);
    if (opts.write_files) write_text(base.output / "oracles.jsonl", gates_jsonl(gates));
    sub_opts.run_gates = false;
  }
  const std::size_t budget = base.resolved_iterations();
  for (const auto& v : unique) {
    for (const auto& a : algs) {
      auto cfg = base;
      try {
        apply_setting(cfg, "algorithm", a);
        apply_setting(cfg, key, v);
        if (key == "local_steps") {
          cfg.rounds.reset();
          cfg.iterations = budget;
        }
        cfg.output = base.output / path_safe(key + "=" + v) / path_safe(cfg.algorithm_label());
        const auto res = run_experiment(cfg, sub_opts);
        for (const auto& f : res.folds) {
          out.rows.push_back({v, cfg.algorithm_label(), f.fold, f.final_accuracy, f.best_accuracy,
                              f.aborted ? "aborted: " + f.error : "ok"});
        }
      } catch (const Error& e) {
        out.rows.push_back({v, a, 0, NAN, NAN, std::string("error: ") + e.what()});
      }
    }
  }
  if (opts.write_files) write_text(base.output / "sweep.csv", sweep_csv(key, out));
  return out;
}

}  // namespace bnfl
