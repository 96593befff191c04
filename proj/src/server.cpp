#include "bnfl/server.hpp"

#include <algorithm>
#include <cmath>

#include "bnfl/errors.hpp"

namespace bnfl {

void Schedule::validate() const {
  if (!(base_lr > 0.0)) throw ConfigError("schedule.base_lr", "must be positive");
  if (!(factor > 0.0 && factor <= 1.0)) throw ConfigError("schedule.factor", "must lie in (0, 1]");
  if (warmup < 0) throw ConfigError("schedule.warmup", "must be non-negative");
  for (std::size_t i = 0; i < milestones.size(); ++i) {
    if (milestones[i] <= 0 || (i > 0 && milestones[i] <= milestones[i - 1])) {
      throw ConfigError("schedule.milestones", "must be positive and strictly increasing");
    }
  }
  if (kind == ScheduleKind::Step && step_size <= 0) throw ConfigError("schedule.step_size", "must be positive");
}

ScheduleKind parse_schedule_kind(const std::string& name) {
  if (name == "constant") return ScheduleKind::Constant;
  if (name == "step") return ScheduleKind::Step;
  if (name == "multistep") return ScheduleKind::MultiStep;
  throw ConfigError("schedule.kind", "unknown schedule '" + name + "' (constant, step, multistep)");
}

std::string schedule_kind_name(ScheduleKind k) {
  switch (k) {
    case ScheduleKind::Constant:
      return "constant";
    case ScheduleKind::Step:
      return "step";
    case ScheduleKind::MultiStep:
      return "multistep";
  }
  return "constant";
}

double lr_at(const Schedule& s, std::int64_t iteration) {
  double lr = s.base_lr;
  switch (s.kind) {
    case ScheduleKind::Constant:
      break;
    case ScheduleKind::Step:
      lr *= std::pow(s.factor, static_cast<double>(iteration / s.step_size));
      break;
    case ScheduleKind::MultiStep: {
      const auto passed = std::count_if(s.milestones.begin(), s.milestones.end(),
                                        [iteration](std::int64_t m) { return m <= iteration; });
      lr *= std::pow(s.factor, static_cast<double>(passed));
      break;
    }
  }
  if (s.warmup > 0 && iteration < s.warmup) lr *= static_cast<double>(iteration) / static_cast<double>(s.warmup);
  return lr;
}

double round_lr(const Schedule& s, std::int64_t completed) { return lr_at(s, completed + 1); }

// ---------------------------------------------------------------------------

ModelCounts ModelCounts::of(const Architecture& arch) {
  ModelCounts c;
  c.weights = static_cast<std::int64_t>(arch.parameter_count());
  c.stats = static_cast<std::int64_t>(arch.stats_count());
  for (const auto& p : arch.param_layout())
    if (p.bn_affine) c.bn_affine += static_cast<std::int64_t>(shape_size(p.shape));
  c.depth = static_cast<std::int64_t>(arch.depth());
  return c;
}

Rational comm_rounds_per_local_step(Algorithm a, std::int64_t clients, std::int64_t local_steps, std::int64_t depth) {
  if (clients <= 0 || local_steps <= 0) throw ConfigError("accounting", "N and E must be positive");
  const std::int64_t per_client = a == Algorithm::FedTAN ? 2 + 6 * depth : 2;
  return Rational(per_client * clients, local_steps);
}

std::int64_t comm_params_per_global_step(Algorithm a, const ModelCounts& m) {
  const auto W = m.weights, S = m.stats;
  switch (a) {
    case Algorithm::FedAvg:
    case Algorithm::FixBN:
      return W + S;
    case Algorithm::Scaffold1:
    case Algorithm::Scaffold2:
    case Algorithm::FixBNScaffold:
      return 2 * W + S;
    case Algorithm::BnScaffold1:
    case Algorithm::BnScaffold2:
      return 2 * W + 2 * S;
    case Algorithm::FedTAN:
      return 2 * W + 4 * S;
    case Algorithm::FedBN:
      return W - m.bn_affine;
    case Algorithm::FedBNScaffold:
      return 2 * W - m.bn_affine;
    case Algorithm::SiloBN:
      return W;
    case Algorithm::SiloBNScaffold:
      return 2 * W;
  }
  throw ConfigError("algorithm", "no communication rule");
}

CommAccount account_communication(Algorithm a, std::int64_t clients, std::int64_t local_steps,
                                  const ModelCounts& counts, std::int64_t local_steps_elapsed) {
  if (local_steps_elapsed < 0 || local_steps_elapsed % std::max<std::int64_t>(local_steps, 1) != 0) {
    throw ConfigError("accounting", "elapsed local steps must be a non-negative multiple of E");
  }
  CommAccount out;
  out.rounds = comm_rounds_per_local_step(a, clients, local_steps, counts.depth) * local_steps_elapsed;
  out.params = comm_params_per_global_step(a, counts) * (local_steps_elapsed / local_steps);
  return out;
}

Rational account_gradients(Algorithm a, std::int64_t clients, std::int64_t batch_size, std::int64_t dataset_size,
                           std::int64_t local_steps) {
  if (clients <= 0 || batch_size <= 0 || local_steps <= 0 || dataset_size < 0) {
    throw ConfigError("accounting", "counts must be positive");
  }
  Rational g(clients * batch_size);
  if (algorithm_traits(a).gradient_cv == CvOption::I) g += Rational(dataset_size, local_steps);
  return g;
}

// ---------------------------------------------------------------------------

template <typename T>
ServerState<T> init_server(const Architecture& arch, std::uint64_t seed) {
  ServerState<T> s;
  s.weights = arch.init_params<T>(seed);
  s.running = arch.init_running_stats<T>();
  s.cv = ControlVariates<T>::zeros(arch, s.weights);
  return s;
}

template <typename T>
std::vector<ClientState<T>> init_clients(const ServerState<T>& server, const std::vector<Dataset>& data,
                                         std::size_t batch_size, std::uint64_t seed) {
  std::vector<ClientState<T>> out;
  out.reserve(data.size());
  for (std::size_t i = 0; i < data.size(); ++i) {
    if (data[i].size() == 0) throw ConfigError("partition", "client " + std::to_string(i) + " received no samples");
    out.push_back({i, &data[i], server.weights, server.running, server.cv,
                   BatchSampler(data[i].size(), batch_size, derive_seed(seed, 0x5a3e1e, i))});
  }
  return out;
}

template <typename T>
std::vector<T> weights_as(const std::vector<Rational>& weights) {
  if (weights.empty()) throw ConfigError("weights", "no clients");
  double sum = 0.0;
  std::vector<T> out;
  for (const auto& w : weights) {
    if (w < 0) throw ConfigError("weights", "client weights must be non-negative");
    const double v = boost::rational_cast<double>(w);
    sum += v;
    out.push_back(static_cast<T>(v));
  }
  if (std::abs(sum - 1.0) > 1e-9) throw ConfigError("weights", "client weights sum to " + std::to_string(sum));
  return out;
}

template <typename T>
ParamSet<T> aggregate(const std::vector<const ParamSet<T>*>& xs, const std::vector<T>& weights) {
  if (xs.empty() || xs.size() != weights.size()) throw StructuralError("aggregate: one weight per input required");
  ParamSet<T> out = *xs.front();
  for (std::size_t i = 1; i < xs.size(); ++i) {
    xs.front()->require_congruent(*xs[i], "aggregate");
    for (std::size_t p = 0; p < out.size(); ++p) {
      auto& o = out[p].value;
      const auto& base = (*xs.front())[p].value;
      const auto& v = (*xs[i])[p].value;
      for (std::size_t j = 0; j < o.size(); ++j) o[j] += weights[i] * (v[j] - base[j]);
    }
  }
  return out;
}

template <typename T>
BNStats<T> aggregate(const std::vector<const BNStats<T>*>& xs, const std::vector<T>& weights) {
  if (xs.empty() || xs.size() != weights.size()) throw StructuralError("aggregate: one weight per input required");
  BNStats<T> out = *xs.front();
  const auto& base = *xs.front();
  for (std::size_t i = 1; i < xs.size(); ++i) {
    base.require_congruent(*xs[i], "aggregate");
    for (std::size_t l = 0; l < out.layer_count(); ++l) {
      for (std::size_t c = 0; c < out[l].channels(); ++c) {
        out[l].mean[c] += weights[i] * ((*xs[i])[l].mean[c] - base[l].mean[c]);
        out[l].var[c] += weights[i] * ((*xs[i])[l].var[c] - base[l].var[c]);
      }
    }
  }
  return out;
}

template <typename T>
RoundOutcome<T> run_round(ServerState<T>& server, std::vector<ClientState<T>>& clients, const RoundConfig<T>& cfg) {
  if (!cfg.arch) throw StructuralError("run_round without an architecture");
  if (clients.size() != cfg.weights.size()) {
    throw ConfigError("weights", std::to_string(cfg.weights.size()) + " weights for " +
                                     std::to_string(clients.size()) + " clients");
  }
  const auto P = weights_as<T>(cfg.weights);
  const auto& arch = *cfg.arch;
  const auto traits = cfg.spec.traits();
  for (const auto& c : clients) arch.require_params(c.weights);

  RoundOutcome<T> outcome;
  const auto global = server.broadcast();

  if (traits.fedtan) {
    std::vector<Tensor<T>> first;
    for (const auto& c : clients) {
      BatchSampler peek = c.sampler;
      first.push_back(gather_batch<T>(*c.data, peek.next(), arch.input_shape()));
    }
    outcome.shared_first_step = fedtan_shared_stats(arch, server.weights, first, P, cfg.epsilon);
  }

  ClientUpdateContext<T> ctx;
  ctx.arch = cfg.arch;
  ctx.spec = cfg.spec;
  ctx.local_steps = cfg.local_steps;
  ctx.lr = cfg.lr;
  ctx.epsilon = cfg.epsilon;
  ctx.iteration = server.iteration;
  ctx.round = server.round + 1;
  ctx.shared_first_step = outcome.shared_first_step;
  ctx.record = cfg.record;
  ctx.chunk_size = cfg.chunk_size;

  std::vector<ClientUpdateResult<T>> results;
  results.reserve(clients.size());
  for (auto& c : clients) results.push_back(client_update(c, global, ctx));

  std::vector<const ParamSet<T>*> ws, cs;
  std::vector<const BNStats<T>*> ss, ks;
  for (const auto& r : results) {
    ws.push_back(&r.state.weights);
    ss.push_back(&r.state.running);
    cs.push_back(&r.state.cv.c);
    ks.push_back(&r.state.cv.k);
  }
  server.weights = aggregate(ws, P);
  server.running = aggregate(ss, P);
  if (traits.uses_c()) server.cv.c = aggregate(cs, P);
  if (traits.uses_k()) server.cv.k = aggregate(ks, P);

  auto& rep = outcome.report;
  const auto N = static_cast<std::int64_t>(clients.size());
  // One down-link and one up-link per client, plus the per-layer exchanges of FedTAN.
  const std::int64_t messages = traits.fedtan ? 2 + 6 * static_cast<std::int64_t>(arch.depth()) : 2;
  server.comm_rounds += Rational(messages * N);

  const auto& up = results.front().state;
  std::int64_t payload = static_cast<std::int64_t>(up.weights.element_count());
  if (traits.locality == BnLocality::AllBn) payload -= static_cast<std::int64_t>(up.weights.bn_affine_count());
  if (traits.locality == BnLocality::None) payload += static_cast<std::int64_t>(up.running.element_count());
  if (traits.uses_c()) payload += static_cast<std::int64_t>(up.cv.c.element_count());
  if (traits.uses_k()) payload += static_cast<std::int64_t>(up.cv.k.element_count());
  if (traits.fedtan) {
    // Weight gradients, then statistics up and down plus their gradients.
    payload += static_cast<std::int64_t>(up.weights.element_count() + 3 * up.running.element_count());
  }
  server.comm_params += payload;
  for (const auto& r : results) server.gradients += static_cast<std::int64_t>(r.gradients);

  server.round += 1;
  server.iteration += static_cast<std::int64_t>(cfg.local_steps);

  rep.round = server.round;
  rep.iteration = server.iteration;
  rep.lr = static_cast<double>(cfg.lr);
  for (const auto& r : results) {
    double s = 0.0;
    for (T l : r.losses) s += static_cast<double>(l);
    rep.client_loss.push_back(s / static_cast<double>(r.losses.size()));
    rep.clipped += r.clipped;
  }
  rep.comm_rounds = server.comm_rounds;
  rep.comm_params = server.comm_params;
  rep.gradients = server.gradients;

  for (std::size_t i = 0; i < clients.size(); ++i) clients[i] = results[i].state;
  if (cfg.record) outcome.results = std::move(results);
  return outcome;
}

template <typename T>
EvalResult evaluate(const Architecture& arch, const ModelParams<T>& w, const BNStats<T>& running,
                    const Dataset& test, T epsilon, std::size_t chunk_size) {
  if (test.size() == 0) throw ConfigError("data", "empty evaluation set");
  if (!running.all_finite()) throw StructuralError("running statistics are not finite");
  const auto plan = BnPlan<T>::eval(running);
  const std::size_t n = test.size();
  std::size_t correct = 0;
  double loss = 0.0;
  for (std::size_t lo = 0; lo < n; lo += chunk_size) {
    const std::size_t hi = std::min(n, lo + chunk_size);
    std::vector<std::size_t> idx(hi - lo);
    for (std::size_t i = lo; i < hi; ++i) idx[i - lo] = i;
    const auto labels = gather_labels(test, idx);
    const auto fwd = forward(arch, w, gather_batch<T>(test, idx, arch.input_shape()), plan, epsilon);
    const auto ce = cross_entropy<T>(fwd.logits, labels);
    loss += static_cast<double>(ce.value) * static_cast<double>(idx.size());
    const std::size_t k = fwd.logits.dim(1);
    for (std::size_t b = 0; b < idx.size(); ++b) {
      const auto row = fwd.logits.data().subspan(b * k, k);
      const auto best = static_cast<int>(std::max_element(row.begin(), row.end()) - row.begin());
      if (best == labels[b]) ++correct;
    }
  }
  return {static_cast<double>(correct) / static_cast<double>(n), loss / static_cast<double>(n)};
}

template <typename T>
T CentralizedTrainer<T>::step_with(T lr) {
  const auto idx = sampler.next();
  const auto fwd = forward(*arch, weights, gather_batch<T>(*data, idx, arch->input_shape()),
                           BnPlan<T>::train(arch->bn_count()), epsilon);
  const auto bwd = backward(*arch, weights, fwd.cache, gather_labels(*data, idx));
  weights = sgd_step(weights, bwd.grad, Gradient<T>::zeros_like(weights), lr);
  if (!weights.all_finite()) throw DivergenceError(iteration);
  running = ema_update(running, fwd.used_stats, static_cast<T>(rho));
  if (!running.all_finite()) throw DivergenceError(iteration);
  ++iteration;
  return bwd.loss;
}

template <typename T>
T CentralizedTrainer<T>::step(const Schedule& schedule) {
  return step_with(static_cast<T>(lr_at(schedule, iteration + 1)));
}

#define BNFL_INSTANTIATE(T)                                                                                        \
  template ServerState<T> init_server<T>(const Architecture&, std::uint64_t);                                    \
  template std::vector<ClientState<T>> init_clients(const ServerState<T>&, const std::vector<Dataset>&,           \
                                                    std::size_t, std::uint64_t);                                  \
  template std::vector<T> weights_as<T>(const std::vector<Rational>&);                                           \
  template ParamSet<T> aggregate(const std::vector<const ParamSet<T>*>&, const std::vector<T>&);                 \
  template BNStats<T> aggregate(const std::vector<const BNStats<T>*>&, const std::vector<T>&);                   \
  template RoundOutcome<T> run_round(ServerState<T>&, std::vector<ClientState<T>>&, const RoundConfig<T>&);      \
  template EvalResult evaluate(const Architecture&, const ModelParams<T>&, const BNStats<T>&, const Dataset&, T, \
                               std::size_t);                                                                     \
  template struct CentralizedTrainer<T>;

BNFL_INSTANTIATE(float)
BNFL_INSTANTIATE(double)

#undef BNFL_INSTANTIATE

}  // namespace bnfl
