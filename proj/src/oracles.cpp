#include "bnfl/oracles.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <random>

#include "bnfl/errors.hpp"

namespace bnfl {

OracleReport OracleReport::make(std::string name, double max_error, double tolerance, nlohmann::json witness) {
  OracleReport r;
  r.name = std::move(name);
  r.max_error = max_error;
  r.tolerance = tolerance;
  r.pass = max_error <= tolerance;
  r.witness = std::move(witness);
  return r;
}

nlohmann::json OracleReport::to_json() const {
  nlohmann::json j;
  j["check"] = name;
  j["max_error"] = std::isfinite(max_error) ? nlohmann::json(max_error) : nlohmann::json(std::to_string(max_error));
  j["tolerance"] = tolerance;
  j["pass"] = pass;
  j["witness"] = witness;
  return j;
}

std::string OracleReport::to_json_line() const { return to_json().dump(); }

double relative_gap(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() != b.size()) throw StructuralError("relative_gap: length mismatch");
  double diff = 0.0, scale = 1.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = std::abs(a[i] - b[i]);
    if (!(d <= diff)) diff = d;  // propagates NaN
    scale = std::max(scale, std::abs(b[i]));
  }
  return diff / scale;
}

namespace {

std::size_t argmax_gap(const std::vector<double>& a, const std::vector<double>& b) {
  std::size_t at = 0;
  double worst = -1.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = std::abs(a[i] - b[i]);
    if (!(d <= worst)) {
      worst = d;
      at = i;
    }
  }
  return at;
}

nlohmann::json gap_witness(const std::vector<double>& got, const std::vector<double>& want) {
  if (got.empty()) return nlohmann::json::object();
  const auto i = argmax_gap(got, want);
  return {{"index", i}, {"recursion", got[i]}, {"definitional", want[i]}};
}

}  // namespace

std::vector<Gradient<double>> replay_gradients(const Architecture& arch, const Dataset& data,
                                               const std::vector<StepRecord<double>>& steps, double epsilon) {
  std::vector<Gradient<double>> out;
  out.reserve(steps.size());
  for (const auto& s : steps) {
    const auto fwd = forward(arch, s.weights, gather_batch<double>(data, s.batch, arch.input_shape()), s.plan, epsilon);
    out.push_back(backward(arch, s.weights, fwd.cache, gather_labels(data, s.batch)).grad);
  }
  return out;
}

OracleReport check_c_recursion(const std::vector<Gradient<double>>& gradients, std::size_t local_steps, double lr,
                               const Gradient<double>& c_prev_local, const Gradient<double>& c_prev_global,
                               const ModelParams<double>& w_start, const ModelParams<double>& w_end,
                               double tolerance) {
  if (gradients.size() != local_steps || local_steps == 0) {
    throw StructuralError("c recursion: trace holds " + std::to_string(gradients.size()) + " gradients for E = " +
                          std::to_string(local_steps));
  }
  Gradient<double> mean = Gradient<double>::zeros_like(w_start);
  for (const auto& g : gradients) mean.axpy(1.0 / static_cast<double>(local_steps), g);
  const auto rec = update_c_option2(c_prev_local, c_prev_global, w_start, w_end, local_steps, lr).flatten();
  const auto def = mean.flatten();
  auto w = gap_witness(rec, def);
  w["E"] = local_steps;
  w["lr"] = lr;
  return OracleReport::make("c_recursion", relative_gap(rec, def), tolerance, std::move(w));
}

OracleReport check_k_recursion(const std::vector<BNStats<double>>& stats_trace, double rho,
                               const BNStats<double>& k_prev_local, const BNStats<double>& k_prev_global,
                               const std::vector<BNStats<double>>& running_trace, double tolerance) {
  const std::size_t E = stats_trace.size();
  if (E == 0 || running_trace.size() != E + 1) {
    throw StructuralError("k recursion: need E statistics and E + 1 running values, got " + std::to_string(E) +
                          " and " + std::to_string(running_trace.size()));
  }
  const auto def = (weighted_stats_sum(stats_trace, rho) + k_prev_local - k_prev_global).flatten();
  const auto at_e = update_k_option2(k_prev_local, k_prev_global, running_trace.front(), running_trace[E], E, rho);
  const auto at_e1 =
      update_k_option2(k_prev_local, k_prev_global, running_trace.front(), running_trace[E - 1], E, rho);
  const double err_e = relative_gap(at_e.flatten(), def);
  const double err_e1 = relative_gap(at_e1.flatten(), def);
  auto w = gap_witness(at_e.flatten(), def);
  w["E"] = E;
  w["rho"] = rho;
  w["error_end_index_E"] = err_e;
  w["error_end_index_E_minus_1"] = err_e1;
  w["running_start"] = "running value before the first local step (the broadcast average)";
  w["indexing"] = err_e <= tolerance ? "E" : (err_e1 <= tolerance ? "E-1" : "none");
  return OracleReport::make("k_recursion", err_e, tolerance, std::move(w));
}

OracleReport check_gradients(const Architecture& arch, const ModelParams<double>& w, const Tensor<double>& batch,
                             const std::vector<int>& labels, const BnPlan<double>& plan, double epsilon,
                             const GradientCheckOptions& opts) {
  const auto fwd = forward(arch, w, batch, plan, epsilon);
  const auto analytic = backward(arch, w, fwd.cache, labels).grad;
  auto loss_at = [&](const ModelParams<double>& p) {
    return cross_entropy<double>(forward(arch, p, batch, plan, epsilon).logits, labels).value;
  };

  std::vector<bool> conv(w.size(), false);
  for (std::size_t i = 0; i < arch.layers().size(); ++i) {
    if (arch.layers()[i].kind == LayerKind::Conv2d) {
      conv[arch.param_offset(i)] = true;
      conv[arch.param_offset(i) + 1] = true;
    }
  }

  std::mt19937_64 rng(opts.seed);
  std::vector<double> a, fd;
  ModelParams<double> probe = w;
  std::size_t worst_tensor = 0, worst_index = 0, kinks = 0;
  double worst = -1.0;
  for (std::size_t t = 0; t < w.size(); ++t) {
    const std::size_t n = w[t].value.size();
    std::vector<std::size_t> coords = iota_indices(n);
    if (conv[t] && opts.conv_coords > 0 && opts.conv_coords < n) {
      std::shuffle(coords.begin(), coords.end(), rng);
      coords.resize(opts.conv_coords);
    }
    for (auto j : coords) {
      const double orig = w[t].value[j];
      auto central = [&](double h) {
        probe[t].value[j] = orig + h;
        const double up = loss_at(probe);
        probe[t].value[j] = orig - h;
        const double down = loss_at(probe);
        probe[t].value[j] = orig;
        return (up - down) / (2 * h);
      };
      double num = central(opts.h);
      double h = opts.h / 10;
      double finer = central(h);
      if (std::abs(num - finer) > opts.kink_threshold) {
        ++kinks;
        // Shrink until two successive estimates agree.
        for (int k = 0; k < 2; ++k) {
          h /= 10;
          const double next = central(h);
          const bool settled = std::abs(next - finer) <= opts.kink_threshold;
          finer = next;
          if (settled) break;
        }
        num = finer;
      }
      a.push_back(analytic[t].value[j]);
      fd.push_back(num);
      if (!(std::abs(num - analytic[t].value[j]) <= worst)) {
        worst = std::abs(num - analytic[t].value[j]);
        worst_tensor = t;
        worst_index = j;
      }
    }
  }
  double diff = 0.0, norm = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    diff += (a[i] - fd[i]) * (a[i] - fd[i]);
    norm += a[i] * a[i];
  }
  const double err = std::sqrt(diff) / std::max(1.0, std::sqrt(norm));
  nlohmann::json wit = {{"coordinates", a.size()},
                        {"h", opts.h},
                        {"kinks_reprobed", kinks},
                        {"seed", opts.seed},
                        {"worst_parameter", w[worst_tensor].name},
                        {"worst_index", worst_index},
                        {"worst_abs_error", worst}};
  return OracleReport::make("gradients", err, opts.tolerance, std::move(wit));
}

OracleReport check_homogeneous_collapse(const Architecture& arch, const Dataset& data, const CollapseConfig& cfg) {
  std::vector<Dataset> shards(cfg.clients, data);
  std::vector<Rational> P(cfg.clients, Rational(1, static_cast<std::int64_t>(cfg.clients)));

  auto setup = [&](ServerState<double>& server) {
    std::vector<ClientState<double>> clients;
    for (std::size_t i = 0; i < cfg.clients; ++i) {
      const std::uint64_t stream = cfg.permuted_client == i ? 99 : 0;
      clients.push_back({i, &shards[i], server.weights, server.running, server.cv,
                         BatchSampler(data.size(), cfg.batch_size, derive_seed(cfg.seed, 7, stream))});
    }
    return clients;
  };
  auto fed_server = init_server<double>(arch, cfg.seed);
  auto bn_server = init_server<double>(arch, cfg.seed);
  auto fed_clients = setup(fed_server);
  auto bn_clients = setup(bn_server);

  RoundConfig<double> rc;
  rc.arch = &arch;
  rc.local_steps = cfg.local_steps;
  rc.lr = cfg.lr;
  rc.weights = P;
  rc.spec.rho = cfg.rho;
  rc.spec.var_threshold = cfg.var_threshold;
  auto fed_rc = rc;
  fed_rc.spec.algorithm = Algorithm::FedAvg;
  auto bn_rc = rc;
  bn_rc.spec.algorithm = Algorithm::BnScaffold2;

  double cv_gap = 0.0, traj_gap = 0.0;
  std::size_t clipped = 0;
  std::optional<std::int64_t> first_mismatch;
  for (std::size_t r = 1; r <= cfg.rounds; ++r) {
    run_round(fed_server, fed_clients, fed_rc);
    clipped += run_round(bn_server, bn_clients, bn_rc).report.clipped;
    const bool same = fed_server.weights == bn_server.weights && fed_server.running == bn_server.running;
    if (!same && !first_mismatch) first_mismatch = static_cast<std::int64_t>(r);
    traj_gap = std::max({traj_gap, fed_server.weights.max_abs_diff(bn_server.weights),
                         fed_server.running.max_abs_diff(bn_server.running)});
    if (r >= 2) {
      for (const auto& c : bn_clients) {
        cv_gap = std::max({cv_gap, c.cv.c.max_abs_diff(bn_server.cv.c), c.cv.k.max_abs_diff(bn_server.cv.k)});
      }
    }
  }
  nlohmann::json w = {{"clients", cfg.clients},
                      {"E", cfg.local_steps},
                      {"rounds", cfg.rounds},
                      {"control_variate_gap", cv_gap},
                      {"trajectory_gap", traj_gap},
                      {"bit_identical", !first_mismatch.has_value()},
                      {"clipped_entries", clipped}};
  if (first_mismatch) w["first_mismatch_round"] = *first_mismatch;
  if (cfg.permuted_client) w["permuted_client"] = *cfg.permuted_client;
  double err = std::max(cv_gap, traj_gap);
  if (first_mismatch && err == 0.0) err = std::numeric_limits<double>::min();
  return OracleReport::make("homogeneous_collapse", err, 1e-12, std::move(w));
}

OracleReport check_centralized_equality(const Architecture& arch, const Dataset& data, std::size_t clients,
                                        std::size_t local_steps, std::size_t iterations, std::size_t batch_size,
                                        double lr, std::uint64_t seed, double tolerance) {
  if (local_steps == 0 || iterations % local_steps != 0) {
    throw ConfigError("iterations", "must be a multiple of E for the centralized comparison");
  }
  std::vector<Dataset> shards(clients, data);
  auto server = init_server<double>(arch, seed);
  std::vector<ClientState<double>> cs;
  for (std::size_t i = 0; i < clients; ++i) {
    cs.push_back({i, &shards[i], server.weights, server.running, server.cv,
                  BatchSampler(data.size(), batch_size, derive_seed(seed, 11))});
  }
  CentralizedTrainer<double> central{&arch, &data, server.weights, server.running,
                                     BatchSampler(data.size(), batch_size, derive_seed(seed, 11)), 0.9, 1e-5, 0};
  RoundConfig<double> rc;
  rc.arch = &arch;
  rc.local_steps = local_steps;
  rc.lr = lr;
  rc.weights.assign(clients, Rational(1, static_cast<std::int64_t>(clients)));
  rc.spec.algorithm = Algorithm::FedAvg;

  double err = 0.0;
  for (std::size_t r = 0; r < iterations / local_steps; ++r) {
    run_round(server, cs, rc);
    for (std::size_t t = 0; t < local_steps; ++t) central.step_with(lr);
    err = std::max({err, relative_gap(server.weights.flatten(), central.weights.flatten()),
                    relative_gap(server.running.flatten(), central.running.flatten())});
  }
  nlohmann::json w = {{"clients", clients}, {"E", local_steps}, {"iterations", iterations}, {"lr", lr}};
  return OracleReport::make("centralized_equality", err, tolerance, std::move(w));
}

OracleReport check_aggregation(const ServerState<double>& server, const std::vector<ClientState<double>>& clients,
                               const std::vector<Rational>& weights, double tolerance) {
  if (clients.size() != weights.size() || clients.empty()) throw StructuralError("one weight per client required");
  auto c = Gradient<double>::zeros_like(clients.front().cv.c);
  auto k = BNStats<double>::zeros_like(clients.front().cv.k);
  for (std::size_t i = 0; i < clients.size(); ++i) {
    const double p = boost::rational_cast<double>(weights[i]);
    c.axpy(p, clients[i].cv.c);
    k.axpy(p, clients[i].cv.k);
  }
  const double ec = relative_gap(server.cv.c.flatten(), c.flatten());
  const double ek = relative_gap(server.cv.k.flatten(), k.flatten());
  return OracleReport::make("aggregation", std::max(ec, ek), tolerance,
                            {{"round", server.round}, {"c_error", ec}, {"k_error", ek}});
}

OracleReport check_accounting(Algorithm a, const Architecture& arch, const std::vector<Dataset>& data,
                              std::size_t local_steps, std::size_t rounds, std::size_t batch_size,
                              std::uint64_t seed) {
  auto server = init_server<double>(arch, seed);
  auto clients = init_clients(server, data, batch_size, seed);
  RoundConfig<double> rc;
  rc.arch = &arch;
  rc.local_steps = local_steps;
  rc.lr = 0.01;
  rc.weights = client_weights(data);
  rc.spec.algorithm = a;
  if (algorithm_traits(a).fixbn) rc.spec.t_star = static_cast<std::int64_t>(rounds * local_steps / 2);
  for (std::size_t r = 0; r < rounds; ++r) run_round(server, clients, rc);

  const auto N = static_cast<std::int64_t>(data.size());
  const auto E = static_cast<std::int64_t>(local_steps);
  const auto steps = static_cast<std::int64_t>(rounds * local_steps);
  std::int64_t total = 0;
  for (const auto& d : data) total += static_cast<std::int64_t>(d.size());
  const auto counts = ModelCounts::of(arch);
  const auto comm = account_communication(a, N, E, counts, steps);
  const Rational grads = account_gradients(a, N, static_cast<std::int64_t>(batch_size), total, E) * steps;

  const bool ok = comm.rounds == server.comm_rounds && comm.params == server.comm_params &&
                  grads == Rational(server.gradients);
  auto str = [](const Rational& r) { return std::to_string(r.numerator()) + "/" + std::to_string(r.denominator()); };
  nlohmann::json w = {{"algorithm", algorithm_name(a)},
                      {"N", N},
                      {"E", E},
                      {"rounds", rounds},
                      {"comm_rounds", {{"simulated", str(server.comm_rounds)}, {"formula", str(comm.rounds)}}},
                      {"comm_params", {{"simulated", server.comm_params}, {"formula", comm.params}}},
                      {"gradients", {{"simulated", server.gradients}, {"formula", str(grads)}}}};
  return OracleReport::make("accounting", ok ? 0.0 : 1.0, 0.0, std::move(w));
}

// ---------------------------------------------------------------------------

namespace {

Dataset suite_data(std::size_t dims, std::uint64_t seed) {
  SyntheticSpec s;
  s.classes = 3;
  s.samples_per_class = 24;
  s.dims = dims;
  s.cluster_spread = 1.0;
  s.scale = 2.0;
  s.seed = seed;
  return gen_synthetic(s);
}

OracleReport worst_of(std::string name, const std::vector<OracleReport>& rs) {
  if (rs.empty()) return OracleReport::make(std::move(name), 0.0, 0.0);
  auto rank = [](const OracleReport& r) { return std::isnan(r.max_error) ? HUGE_VAL : r.max_error / std::max(r.tolerance, 1e-300); };
  const auto* worst = &rs.front();
  for (const auto& r : rs)
    if (rank(r) > rank(*worst)) worst = &r;
  auto out = *worst;
  out.name = std::move(name);
  out.pass = std::all_of(rs.begin(), rs.end(), [](const auto& r) { return r.pass; });
  out.witness["cases"] = rs.size();
  return out;
}

}  // namespace

std::vector<OracleReport> run_oracle_suite(SuiteLevel level) {
  const bool full = level == SuiteLevel::Full;
  std::vector<OracleReport> out;
  const double eps = 1e-5;

  const auto mlp = Architecture::mlp(8, 6, 3);
  const auto cnn = Architecture::small_cnn(1, 6, 6, 3, 2, 3);
  const auto mlp_data = suite_data(8, 3);
  const auto cnn_data = suite_data(36, 4);

  {
    std::vector<OracleReport> rs;
    const std::size_t seeds = full ? 20 : 4;
    for (const auto* arch : {&mlp, &cnn}) {
      const auto& data = arch == &mlp ? mlp_data : cnn_data;
      for (std::size_t s = 0; s < seeds; ++s) {
        const auto w = arch->init_params<double>(100 + s);
        BatchSampler sampler(data.size(), 8, 200 + s);
        const auto idx = sampler.next();
        GradientCheckOptions opt;
        opt.seed = s;
        opt.conv_coords = 200;
        rs.push_back(check_gradients(*arch, w, gather_batch<double>(data, idx, arch->input_shape()),
                                     gather_labels(data, idx), BnPlan<double>::train(arch->bn_count()), eps, opt));
      }
    }
    out.push_back(worst_of("gradients", rs));
  }

  PartitionPlan plan{2, 1.0, 5};
  const auto shards = partition_label_skew(mlp_data, plan);
  const std::size_t rounds = full ? 10 : 3;
  {
    std::vector<OracleReport> rs;
    for (std::size_t E : {1, 2, 5, 10}) {
      auto server = init_server<double>(mlp, 17);
      auto clients = init_clients(server, shards, 8, 17);
      RoundConfig<double> rc;
      rc.arch = &mlp;
      rc.local_steps = E;
      rc.lr = 0.05;
      rc.weights = client_weights(shards);
      rc.spec.algorithm = Algorithm::BnScaffold2;
      rc.record = true;
      for (std::size_t r = 0; r < rounds; ++r) {
        const auto c_global = server.cv.c;
        auto res = run_round(server, clients, rc);
        for (const auto& cr : res.results) {
          const auto g = replay_gradients(mlp, *cr.state.data, cr.steps, eps);
          rs.push_back(
              check_c_recursion(g, E, 0.05, cr.previous_cv.c, c_global, cr.start_weights, cr.state.weights));
        }
      }
    }
    out.push_back(worst_of("c_recursion", rs));
  }
  {
    std::vector<OracleReport> rs;
    for (std::size_t E : {1, 2, 5, 10}) {
      for (double rho : {0.5, 0.9, 0.99}) {
        auto server = init_server<double>(mlp, 23);
        auto clients = init_clients(server, shards, 8, 23);
        RoundConfig<double> rc;
        rc.arch = &mlp;
        rc.local_steps = E;
        rc.lr = 0.05;
        rc.weights = client_weights(shards);
        rc.spec.algorithm = Algorithm::BnScaffold2;
        rc.spec.rho = rho;
        rc.record = true;
        for (std::size_t r = 0; r < rounds; ++r) {
          const auto k_global = server.cv.k;
          auto res = run_round(server, clients, rc);
          for (const auto& cr : res.results) {
            rs.push_back(check_k_recursion(cr.stats_trace, rho, cr.previous_cv.k, k_global, cr.running_trace));
          }
        }
      }
    }
    out.push_back(worst_of("k_recursion", rs));
  }
  {
    CollapseConfig cfg;
    cfg.clients = 2;
    out.push_back(check_homogeneous_collapse(mlp, mlp_data, cfg));
    if (full) {
      cfg.clients = 3;
      cfg.local_steps = 7;
      auto r = check_homogeneous_collapse(mlp, mlp_data, cfg);
      r.name = "homogeneous_collapse_n3";
      out.push_back(r);
    }
  }
  out.push_back(check_centralized_equality(mlp, mlp_data, 2, 5, full ? 100 : 20, 8, 0.05, 29));
  {
    std::vector<OracleReport> rs;
    for (auto a : {Algorithm::Scaffold2, Algorithm::BnScaffold2, Algorithm::BnScaffold1}) {
      auto server = init_server<double>(mlp, 31);
      auto clients = init_clients(server, shards, 8, 31);
      RoundConfig<double> rc;
      rc.arch = &mlp;
      rc.local_steps = 3;
      rc.lr = 0.05;
      rc.weights = client_weights(shards);
      rc.spec.algorithm = a;
      for (std::size_t r = 0; r < rounds; ++r) {
        run_round(server, clients, rc);
        rs.push_back(check_aggregation(server, clients, rc.weights));
      }
    }
    out.push_back(worst_of("aggregation", rs));
  }
  {
    std::vector<OracleReport> rs;
    for (auto a : kAllAlgorithms) rs.push_back(check_accounting(a, mlp, shards, 2, 2, 8, 37));
    out.push_back(worst_of("accounting", rs));
  }
  return out;
}

}  // namespace bnfl
