#include "bnfl/algorithms.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>

#include "bnfl/errors.hpp"

namespace bnfl {

namespace {

struct NamedAlgorithm {
  Algorithm algorithm;
  const char* name;
};

constexpr NamedAlgorithm kNames[] = {
    {Algorithm::FedAvg, "FedAvg"},
    {Algorithm::Scaffold1, "SCAFFOLD-I"},
    {Algorithm::Scaffold2, "SCAFFOLD-II"},
    {Algorithm::BnScaffold1, "BN-SCAFFOLD-I"},
    {Algorithm::BnScaffold2, "BN-SCAFFOLD-II"},
    {Algorithm::FedTAN, "FedTAN"},
    {Algorithm::FedBN, "FedBN"},
    {Algorithm::SiloBN, "SiloBN"},
    {Algorithm::FixBN, "FixBN"},
    {Algorithm::FixBNScaffold, "FixBN+SCAFFOLD"},
    {Algorithm::FedBNScaffold, "FedBN+SCAFFOLD"},
    {Algorithm::SiloBNScaffold, "SiloBN+SCAFFOLD"},
};

std::string lower(std::string s) {
  std::transform(s.begin(), s.end(), s.begin(), [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  return s;
}

}  // namespace

std::string algorithm_name(Algorithm a) {
  for (const auto& n : kNames)
    if (n.algorithm == a) return n.name;
  return "unknown";
}

Algorithm parse_algorithm(const std::string& name) {
  const auto key = lower(name);
  for (const auto& n : kNames)
    if (lower(n.name) == key) return n.algorithm;
  throw ConfigError("algorithm", "unknown algorithm '" + name + "'");
}

AlgorithmTraits algorithm_traits(Algorithm a) {
  AlgorithmTraits t;
  switch (a) {
    case Algorithm::FedAvg:
      break;
    case Algorithm::Scaffold1:
      t.gradient_cv = CvOption::I;
      break;
    case Algorithm::Scaffold2:
      t.gradient_cv = CvOption::II;
      break;
    case Algorithm::BnScaffold1:
      t.gradient_cv = t.stats_cv = CvOption::I;
      break;
    case Algorithm::BnScaffold2:
      t.gradient_cv = t.stats_cv = CvOption::II;
      break;
    case Algorithm::FedTAN:
      t.fedtan = true;
      break;
    case Algorithm::FedBN:
      t.locality = BnLocality::AllBn;
      break;
    case Algorithm::SiloBN:
      t.locality = BnLocality::RunningStats;
      break;
    case Algorithm::FixBN:
      t.fixbn = true;
      break;
    case Algorithm::FixBNScaffold:
      t.fixbn = true;
      t.gradient_cv = CvOption::II;
      break;
    case Algorithm::FedBNScaffold:
      t.locality = BnLocality::AllBn;
      t.gradient_cv = CvOption::II;
      break;
    case Algorithm::SiloBNScaffold:
      t.locality = BnLocality::RunningStats;
      t.gradient_cv = CvOption::II;
      break;
  }
  return t;
}

void AlgorithmSpec::validate() const {
  const auto t = traits();
  if (!(rho >= 0.0 && rho <= 1.0)) throw ConfigError("rho", "must lie in [0, 1]");
  if (t.stats_cv == CvOption::II && !(rho > 0.0 && rho < 1.0)) {
    throw ConfigError("rho", algorithm_name(algorithm) + " needs 0 < rho < 1");
  }
  if (!(var_threshold >= 0.0)) throw ConfigError("var_threshold", "must be non-negative");
  if (t.fixbn && !t_star) throw ConfigError("t_star", algorithm_name(algorithm) + " requires t_star");
  if (!t.fixbn && t_star) throw ConfigError("t_star", "t_star only applies to FixBN variants");
  if (t_star && *t_star < 0) throw ConfigError("t_star", "must be non-negative");
}

// ---------------------------------------------------------------------------

template <typename T>
std::pair<ModelParams<T>, BNStats<T>> localize(const ClientState<T>& state, const GlobalBroadcast<T>& global,
                                               BnLocality locality) {
  ModelParams<T> w = global.weights;
  BNStats<T> running = global.running;
  if (locality == BnLocality::AllBn) {
    state.weights.require_congruent(w, "localize");
    for (std::size_t i = 0; i < w.size(); ++i)
      if (w[i].bn_affine) w[i].value = state.weights[i].value;
  }
  if (locality != BnLocality::None) running = state.running;
  return {std::move(w), std::move(running)};
}

template <typename T>
ClientUpdateResult<T> client_update(const ClientState<T>& state, const GlobalBroadcast<T>& global,
                                    const ClientUpdateContext<T>& ctx) {
  if (!ctx.arch) throw StructuralError("client_update without an architecture");
  if (!state.data || state.data->size() == 0) throw ConfigError("data", "client has no data");
  if (ctx.local_steps == 0) throw ConfigError("local_steps", "E must be at least 1");
  if (!(ctx.lr > T{0})) throw ConfigError("lr", "learning rate must be positive");
  const Architecture& arch = *ctx.arch;
  const auto traits = ctx.spec.traits();
  const T rho = static_cast<T>(ctx.spec.rho);
  const T floor = static_cast<T>(ctx.spec.var_threshold);
  const std::size_t E = ctx.local_steps;

  ClientUpdateResult<T> out(state);
  out.previous_cv = state.cv;
  auto [w, running] = localize(state, global, traits.locality);
  arch.require_params(w);
  out.start_weights = w;
  out.running_trace.push_back(running);

  // Option I control variates are evaluated at the round-start weights.
  std::optional<BNStats<T>> full_stats;
  std::optional<Gradient<T>> full_grad;
  if (traits.option1()) {
    full_stats = full_dataset_stats(arch, w, *state.data, ctx.epsilon, ctx.chunk_size);
    if (traits.gradient_cv == CvOption::I) {
      full_grad = full_gradient(arch, w, *state.data, *full_stats, ctx.epsilon, ctx.chunk_size);
      out.gradients += state.data->size();
    }
  }

  // Fixed for the whole round.
  Gradient<T> correction = Gradient<T>::zeros_like(w);
  if (traits.uses_c()) correction = global.cv.c - state.cv.c;
  BNStats<T> shift;
  if (traits.uses_k()) shift = global.cv.k - state.cv.k;

  const Shape& input = arch.input_shape();
  BatchSampler sampler = state.sampler;
  for (std::size_t t = 0; t < E; ++t) {
    const std::int64_t iteration = ctx.iteration + static_cast<std::int64_t>(t);
    BnPlan<T> plan;
    bool update_running = true;
    if (traits.fixbn && iteration >= *ctx.spec.t_star) {
      plan = BnPlan<T>::injected(running);
      update_running = false;
    } else if (traits.fedtan && t == 0) {
      if (!ctx.shared_first_step) throw StructuralError("FedTAN round without shared first-step statistics");
      plan = BnPlan<T>::shared(*ctx.shared_first_step);
    } else if (traits.uses_k()) {
      plan = BnPlan<T>::corrected(shift, floor);
    } else {
      plan = BnPlan<T>::train(arch.bn_count());
    }

    const auto idx = sampler.next();
    const auto x = gather_batch<T>(*state.data, idx, input);
    const auto labels = gather_labels(*state.data, idx);
    auto fwd = forward(arch, w, x, plan, ctx.epsilon);
    auto bwd = backward(arch, w, fwd.cache, labels);
    out.gradients += idx.size();
    out.clipped += fwd.clipped;

    if (ctx.record) out.steps.push_back({w, idx, plan});
    w = sgd_step(w, bwd.grad, correction, ctx.lr);
    if (!w.all_finite() || !std::isfinite(bwd.loss)) {
      throw DivergenceError(iteration, state.id, ctx.round);
    }
    if (update_running) {
      running = ema_update(running, fwd.used_stats, rho);
      if (!running.all_finite()) throw DivergenceError(iteration, state.id, ctx.round);
    }

    out.losses.push_back(bwd.loss);
    out.stats_trace.push_back(std::move(fwd.used_stats));
    out.batch_trace.push_back(std::move(fwd.batch_stats));
    out.running_trace.push_back(running);
  }

  auto& ns = out.state;
  ns.sampler = sampler;
  ns.weights = w;
  ns.running = running;
  switch (traits.gradient_cv) {
    case CvOption::None:
      break;
    case CvOption::I:
      ns.cv.c = *full_grad;
      break;
    case CvOption::II:
      ns.cv.c = update_c_option2(state.cv.c, global.cv.c, out.start_weights, w, E, ctx.lr);
      break;
  }
  switch (traits.stats_cv) {
    case CvOption::None:
      break;
    case CvOption::I:
      ns.cv.k = *full_stats;
      break;
    case CvOption::II:
      ns.cv.k = update_k_option2(state.cv.k, global.cv.k, out.running_trace.front(), running, E, rho);
      break;
  }
  return out;
}

template <typename T>
Gradient<T> update_c_option2(const Gradient<T>& c_prev_local, const Gradient<T>& c_prev_global,
                             const ModelParams<T>& w_start, const ModelParams<T>& w_end, std::size_t local_steps,
                             T lr) {
  if (local_steps == 0 || !(lr > T{0})) throw ConfigError("lr", "option II needs E >= 1 and lr > 0");
  c_prev_local.require_congruent(c_prev_global, "update_c_option2");
  c_prev_local.require_congruent(w_start, "update_c_option2");
  w_start.require_congruent(w_end, "update_c_option2");
  const T scale = T{1} / (static_cast<T>(local_steps) * lr);
  Gradient<T> out = c_prev_local;
  for (std::size_t i = 0; i < out.size(); ++i) {
    auto& o = out[i].value;
    const auto& cg = c_prev_global[i].value;
    const auto& a = w_start[i].value;
    const auto& b = w_end[i].value;
    for (std::size_t j = 0; j < o.size(); ++j) o[j] = o[j] - cg[j] + (a[j] - b[j]) * scale;
  }
  return out;
}

template <typename T>
BNStats<T> update_k_option2(const BNStats<T>& k_prev_local, const BNStats<T>& k_prev_global,
                            const BNStats<T>& running_start, const BNStats<T>& running_end, std::size_t local_steps,
                            T rho) {
  if (!(rho > T{0} && rho < T{1})) throw ConfigError("rho", "option II statistics control variate needs 0 < rho < 1");
  if (local_steps == 0) throw ConfigError("local_steps", "E must be at least 1");
  k_prev_local.require_congruent(k_prev_global, "update_k_option2");
  k_prev_local.require_congruent(running_start, "update_k_option2");
  running_start.require_congruent(running_end, "update_k_option2");
  const T rho_e = std::pow(rho, static_cast<T>(local_steps));
  const T inv = T{1} / (T{1} - rho_e);
  BNStats<T> out = k_prev_local;
  for (std::size_t l = 0; l < out.layer_count(); ++l) {
    auto step = [&](std::vector<T>& o, const std::vector<T>& kg, const std::vector<T>& s0, const std::vector<T>& se) {
      for (std::size_t c = 0; c < o.size(); ++c) o[c] = o[c] - kg[c] + (se[c] - rho_e * s0[c]) * inv;
    };
    step(out[l].mean, k_prev_global[l].mean, running_start[l].mean, running_end[l].mean);
    step(out[l].var, k_prev_global[l].var, running_start[l].var, running_end[l].var);
  }
  return out;
}

template <typename T>
BNStats<T> full_dataset_stats(const Architecture& arch, const ModelParams<T>& w, const Dataset& data, T epsilon,
                              std::size_t chunk_size) {
  if (data.size() == 0) throw ConfigError("data", "full-dataset statistics of an empty dataset");
  if (chunk_size == 0) throw ConfigError("chunk_size", "must be positive");
  const std::size_t n = data.size();
  std::vector<MeanVar<T>> done;
  for (std::size_t l = 0; l < arch.bn_count(); ++l) {
    // Layers before l use the full statistics already found; later directives are never reached.
    BnPlan<T> plan;
    for (std::size_t j = 0; j < arch.bn_count(); ++j) {
      plan.layers.push_back(j < l ? BnDirective<T>::fixed(done[j]) : BnDirective<T>::batch());
    }
    const std::size_t channels = arch.bn_channels()[l];
    auto each_chunk = [&](auto&& fn) {
      for (std::size_t lo = 0; lo < n; lo += chunk_size) {
        const std::size_t hi = std::min(n, lo + chunk_size);
        std::vector<std::size_t> idx(hi - lo);
        for (std::size_t i = lo; i < hi; ++i) idx[i - lo] = i;
        const auto y = pre_bn_activations(arch, w, gather_batch<T>(data, idx, arch.input_shape()), plan, l, epsilon);
        const std::size_t inner = y.size() / (y.dim(0) * channels);
        for (std::size_t b = 0; b < y.dim(0); ++b)
          for (std::size_t c = 0; c < channels; ++c)
            for (std::size_t i = 0; i < inner; ++i) fn(c, y[(b * channels + c) * inner + i]);
      }
    };
    // Accumulate in double regardless of T.
    std::vector<double> sum(channels, 0.0), sq(channels, 0.0);
    std::size_t count = 0;
    each_chunk([&](std::size_t c, T v) {
      sum[c] += v;
      if (c == 0) ++count;
    });
    MeanVar<T> mv{std::vector<T>(channels), std::vector<T>(channels)};
    for (std::size_t c = 0; c < channels; ++c) mv.mean[c] = static_cast<T>(sum[c] / static_cast<double>(count));
    each_chunk([&](std::size_t c, T v) {
      const double d = static_cast<double>(v) - static_cast<double>(mv.mean[c]);
      sq[c] += d * d;
    });
    for (std::size_t c = 0; c < channels; ++c) mv.var[c] = static_cast<T>(sq[c] / static_cast<double>(count));
    done.push_back(std::move(mv));
  }
  return BNStats<T>(std::move(done));
}

template <typename T>
Gradient<T> full_gradient(const Architecture& arch, const ModelParams<T>& w, const Dataset& data,
                          const BNStats<T>& stats, T epsilon, std::size_t chunk_size) {
  if (data.size() == 0) throw ConfigError("data", "full gradient of an empty dataset");
  if (chunk_size == 0) throw ConfigError("chunk_size", "must be positive");
  const auto plan = BnPlan<T>::injected(stats);
  const std::size_t n = data.size();
  Gradient<T> total = Gradient<T>::zeros_like(w);
  for (std::size_t lo = 0; lo < n; lo += chunk_size) {
    const std::size_t hi = std::min(n, lo + chunk_size);
    std::vector<std::size_t> idx(hi - lo);
    for (std::size_t i = lo; i < hi; ++i) idx[i - lo] = i;
    const auto fwd = forward(arch, w, gather_batch<T>(data, idx, arch.input_shape()), plan, epsilon);
    const auto bwd = backward(arch, w, fwd.cache, gather_labels(data, idx));
    total.axpy(static_cast<T>(hi - lo) / static_cast<T>(n), bwd.grad);
  }
  return total;
}

namespace {

template <typename T>
void require_unit_weights(const std::vector<T>& weights, std::size_t clients) {
  if (weights.size() != clients || clients == 0) throw ConfigError("weights", "one weight per client required");
  long double s = 0;
  for (T v : weights) s += v;
  if (std::abs(static_cast<double>(s) - 1.0) > 1e-9) {
    throw ConfigError("weights", "client weights sum to " + std::to_string(static_cast<double>(s)) + ", not 1");
  }
}

template <typename T>
MeanVar<T> pool(const std::vector<const MeanVar<T>*>& stats, const std::vector<T>& weights) {
  const std::size_t channels = stats.front()->channels();
  MeanVar<T> out{std::vector<T>(channels, T{0}), std::vector<T>(channels, T{0})};
  for (std::size_t i = 0; i < stats.size(); ++i) {
    if (stats[i]->channels() != channels) throw StructuralError("pooled statistics differ in channel count");
    for (std::size_t c = 0; c < channels; ++c) out.mean[c] += weights[i] * stats[i]->mean[c];
  }
  for (std::size_t i = 0; i < stats.size(); ++i) {
    for (std::size_t c = 0; c < channels; ++c) {
      const T d = stats[i]->mean[c] - out.mean[c];
      out.var[c] += weights[i] * (stats[i]->var[c] + d * d);
    }
  }
  return out;
}

}  // namespace

template <typename T>
BNStats<T> fedtan_first_step_stats(const std::vector<BNStats<T>>& client_stats, const std::vector<T>& weights) {
  require_unit_weights(weights, client_stats.size());
  for (const auto& s : client_stats) client_stats.front().require_congruent(s, "fedtan_first_step_stats");
  std::vector<MeanVar<T>> out;
  for (std::size_t l = 0; l < client_stats.front().layer_count(); ++l) {
    std::vector<const MeanVar<T>*> layer;
    for (const auto& s : client_stats) layer.push_back(&s[l]);
    out.push_back(pool(layer, weights));
  }
  return BNStats<T>(std::move(out));
}

template <typename T>
BNStats<T> fedtan_shared_stats(const Architecture& arch, const ModelParams<T>& w,
                               const std::vector<Tensor<T>>& first_batches, const std::vector<T>& weights,
                               T epsilon) {
  require_unit_weights(weights, first_batches.size());
  std::vector<MeanVar<T>> shared;
  for (std::size_t l = 0; l < arch.bn_count(); ++l) {
    BnPlan<T> plan;
    for (std::size_t j = 0; j < arch.bn_count(); ++j) {
      plan.layers.push_back(j < l ? BnDirective<T>::fixed(shared[j]) : BnDirective<T>::batch());
    }
    std::vector<MeanVar<T>> local;
    for (const auto& b : first_batches) local.push_back(batch_stats(pre_bn_activations(arch, w, b, plan, l, epsilon)));
    std::vector<const MeanVar<T>*> ptrs;
    for (const auto& s : local) ptrs.push_back(&s);
    shared.push_back(pool(ptrs, weights));
  }
  return BNStats<T>(std::move(shared));
}

template <typename T>
BNStats<T> weighted_stats_sum(const std::vector<BNStats<T>>& trace, T rho) {
  if (trace.empty()) throw StructuralError("empty statistics trace");
  const std::size_t E = trace.size();
  const T norm = (T{1} - rho) / (T{1} - std::pow(rho, static_cast<T>(E)));
  BNStats<T> out = BNStats<T>::zeros_like(trace.front());
  for (std::size_t t = 0; t < E; ++t) out.axpy(norm * std::pow(rho, static_cast<T>(E - 1 - t)), trace[t]);
  return out;
}

#define BNFL_INSTANTIATE(T)                                                                                          \
  template std::pair<ModelParams<T>, BNStats<T>> localize(const ClientState<T>&, const GlobalBroadcast<T>&,        \
                                                          BnLocality);                                             \
  template ClientUpdateResult<T> client_update(const ClientState<T>&, const GlobalBroadcast<T>&,                   \
                                               const ClientUpdateContext<T>&);                                     \
  template Gradient<T> update_c_option2(const Gradient<T>&, const Gradient<T>&, const ModelParams<T>&,             \
                                        const ModelParams<T>&, std::size_t, T);                                    \
  template BNStats<T> update_k_option2(const BNStats<T>&, const BNStats<T>&, const BNStats<T>&, const BNStats<T>&, \
                                       std::size_t, T);                                                            \
  template BNStats<T> full_dataset_stats(const Architecture&, const ModelParams<T>&, const Dataset&, T,            \
                                         std::size_t);                                                             \
  template Gradient<T> full_gradient(const Architecture&, const ModelParams<T>&, const Dataset&, const BNStats<T>&, \
                                     T, std::size_t);                                                              \
  template BNStats<T> fedtan_first_step_stats(const std::vector<BNStats<T>>&, const std::vector<T>&);              \
  template BNStats<T> fedtan_shared_stats(const Architecture&, const ModelParams<T>&, const std::vector<Tensor<T>>&, \
                                          const std::vector<T>&, T);                                               \
  template BNStats<T> weighted_stats_sum(const std::vector<BNStats<T>>&, T);

BNFL_INSTANTIATE(float)
BNFL_INSTANTIATE(double)

#undef BNFL_INSTANTIATE

}  // namespace bnfl
