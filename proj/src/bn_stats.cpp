#include "bnfl/bn_stats.hpp"

#include <algorithm>
#include <cmath>
#include <string>

namespace bnfl {

namespace {

struct ChannelLayout {
  std::size_t batch;
  std::size_t channels;
  std::size_t inner;  // spatial positions per channel per sample

  std::size_t count() const { return batch * inner; }
  std::size_t offset(std::size_t b, std::size_t c) const { return (b * channels + c) * inner; }
};

template <typename T>
ChannelLayout layout_of(const Tensor<T>& y) {
  if (y.rank() != 2 && y.rank() != 4) {
    throw StructuralError("batch normalization expects [B,C] or [B,C,H,W], got " + shape_string(y.shape()));
  }
  ChannelLayout l{y.dim(0), y.dim(1), 1};
  if (y.rank() == 4) l.inner = y.dim(2) * y.dim(3);
  return l;
}

void require_same_length(std::size_t a, std::size_t b, const char* what) {
  if (a != b) {
    throw StructuralError(std::string(what) + ": expected " + std::to_string(a) + " channels, got " +
                          std::to_string(b));
  }
}

template <typename T, typename Fn>
void for_each_pair(BNStats<T>& a, const BNStats<T>& b, Fn&& fn) {
  for (std::size_t l = 0; l < a.layer_count(); ++l) {
    auto& x = a[l];
    const auto& y = b[l];
    for (std::size_t c = 0; c < x.mean.size(); ++c) {
      fn(x.mean[c], y.mean[c]);
      fn(x.var[c], y.var[c]);
    }
  }
}

template <typename T>
MeanVar<T> two_pass_stats(const Tensor<T>& y, const ChannelLayout& l) {
  MeanVar<T> s{std::vector<T>(l.channels, T{0}), std::vector<T>(l.channels, T{0})};
  const T m = static_cast<T>(l.count());
  for (std::size_t c = 0; c < l.channels; ++c) {
    T sum{0};
    for (std::size_t b = 0; b < l.batch; ++b) {
      const T* p = y.data().data() + l.offset(b, c);
      for (std::size_t i = 0; i < l.inner; ++i) sum += p[i];
    }
    const T mean = sum / m;
    T sq{0};
    for (std::size_t b = 0; b < l.batch; ++b) {
      const T* p = y.data().data() + l.offset(b, c);
      for (std::size_t i = 0; i < l.inner; ++i) {
        const T d = p[i] - mean;
        sq += d * d;
      }
    }
    s.mean[c] = mean;
    s.var[c] = sq / m;
  }
  return s;
}

}  // namespace

template <typename T>
BNStats<T>::BNStats(std::vector<MeanVar<T>> layers) : layers_(std::move(layers)) {
  for (const auto& l : layers_) require_same_length(l.mean.size(), l.var.size(), "statistics mean/variance");
}

template <typename T>
BNStats<T> BNStats<T>::zeros(std::span<const std::size_t> channels) {
  std::vector<MeanVar<T>> layers;
  for (auto c : channels) layers.push_back({std::vector<T>(c, T{0}), std::vector<T>(c, T{0})});
  return BNStats(std::move(layers));
}

template <typename T>
BNStats<T> BNStats<T>::unit(std::span<const std::size_t> channels) {
  std::vector<MeanVar<T>> layers;
  for (auto c : channels) layers.push_back({std::vector<T>(c, T{0}), std::vector<T>(c, T{1})});
  return BNStats(std::move(layers));
}

template <typename T>
BNStats<T> BNStats<T>::zeros_like(const BNStats& other) {
  std::vector<std::size_t> channels;
  for (const auto& l : other.layers_) channels.push_back(l.channels());
  return zeros(channels);
}

template <typename T>
std::size_t BNStats<T>::element_count() const noexcept {
  std::size_t n = 0;
  for (const auto& l : layers_) n += l.mean.size() + l.var.size();
  return n;
}

template <typename T>
bool BNStats<T>::congruent(const BNStats& other) const noexcept {
  if (layers_.size() != other.layers_.size()) return false;
  for (std::size_t l = 0; l < layers_.size(); ++l) {
    if (layers_[l].mean.size() != other.layers_[l].mean.size() ||
        layers_[l].var.size() != other.layers_[l].var.size()) {
      return false;
    }
  }
  return true;
}

template <typename T>
void BNStats<T>::require_congruent(const BNStats& other, const char* context) const {
  if (!congruent(other)) throw StructuralError(std::string(context) + ": incongruent BN statistics");
}

template <typename T>
BNStats<T>& BNStats<T>::operator+=(const BNStats& other) {
  require_congruent(other, "statistics addition");
  for_each_pair(*this, other, [](T& x, T y) { x += y; });
  return *this;
}

template <typename T>
BNStats<T>& BNStats<T>::operator-=(const BNStats& other) {
  require_congruent(other, "statistics subtraction");
  for_each_pair(*this, other, [](T& x, T y) { x -= y; });
  return *this;
}

template <typename T>
BNStats<T>& BNStats<T>::operator*=(T scale) {
  for (auto& l : layers_) {
    for (auto& v : l.mean) v *= scale;
    for (auto& v : l.var) v *= scale;
  }
  return *this;
}

template <typename T>
void BNStats<T>::axpy(T a, const BNStats& x) {
  require_congruent(x, "statistics axpy");
  for_each_pair(*this, x, [a](T& y, T v) { y += a * v; });
}

template <typename T>
bool BNStats<T>::all_finite() const noexcept {
  for (const auto& l : layers_) {
    for (auto v : l.mean)
      if (!std::isfinite(v)) return false;
    for (auto v : l.var)
      if (!std::isfinite(v)) return false;
  }
  return true;
}

template <typename T>
T BNStats<T>::max_abs_diff(const BNStats& other) const {
  require_congruent(other, "statistics comparison");
  T worst{0};
  for (std::size_t l = 0; l < layers_.size(); ++l) {
    for (std::size_t c = 0; c < layers_[l].mean.size(); ++c) {
      worst = std::max(worst, std::abs(layers_[l].mean[c] - other.layers_[l].mean[c]));
      worst = std::max(worst, std::abs(layers_[l].var[c] - other.layers_[l].var[c]));
    }
  }
  return worst;
}

template <typename T>
std::vector<T> BNStats<T>::flatten() const {
  std::vector<T> out;
  out.reserve(element_count());
  for (const auto& l : layers_) {
    out.insert(out.end(), l.mean.begin(), l.mean.end());
    out.insert(out.end(), l.var.begin(), l.var.end());
  }
  return out;
}

template <typename T>
std::size_t bn_channel_count(const Tensor<T>& y) {
  return layout_of(y).channels;
}

template <typename T>
MeanVar<T> batch_stats(const Tensor<T>& pre_bn) {
  const auto l = layout_of(pre_bn);
  if (l.batch < 2) {
    throw DegenerateBatchError("batch statistics need at least 2 samples, got " + std::to_string(l.batch));
  }
  return two_pass_stats(pre_bn, l);
}

template <typename T>
BNStats<T> ema_update(const BNStats<T>& running, const BNStats<T>& incoming, T rho) {
  if (!(rho >= T{0} && rho <= T{1})) {
    throw ConfigError("rho", "EMA momentum must lie in [0, 1], got " + std::to_string(rho));
  }
  running.require_congruent(incoming, "ema_update");
  const T keep = kEmaConvention == EmaConvention::RetainRho ? rho : T{1} - rho;
  const T take = kEmaConvention == EmaConvention::RetainRho ? T{1} - rho : rho;
  BNStats<T> out = running;
  for_each_pair(out, incoming, [keep, take](T& r, T s) { r = keep * r + take * s; });
  return out;
}

template <typename T>
BNStats<T> correct_stats(const BNStats<T>& batch, const BNStats<T>& k_local, const BNStats<T>& k_global,
                         T var_threshold) {
  batch.require_congruent(k_local, "correct_stats");
  batch.require_congruent(k_global, "correct_stats");
  // batch + (k_global - k_local): exact when the two control variates coincide.
  BNStats<T> out = batch;
  for (std::size_t l = 0; l < out.layer_count(); ++l) {
    auto& o = out[l];
    for (std::size_t c = 0; c < o.channels(); ++c) {
      o.mean[c] += k_global[l].mean[c] - k_local[l].mean[c];
      o.var[c] = std::max(var_threshold, o.var[c] + (k_global[l].var[c] - k_local[l].var[c]));
    }
  }
  return out;
}

template <typename T>
Tensor<T> bn_forward(const Tensor<T>& y, const MeanVar<T>& stats, std::span<const T> alpha, std::span<const T> beta,
                     T epsilon) {
  const auto l = layout_of(y);
  require_same_length(l.channels, stats.mean.size(), "bn_forward statistics");
  require_same_length(l.channels, alpha.size(), "bn_forward alpha");
  require_same_length(l.channels, beta.size(), "bn_forward beta");
  Tensor<T> x(y.shape());
  for (std::size_t c = 0; c < l.channels; ++c) {
    const T r = T{1} / std::sqrt(stats.var[c] + epsilon);
    for (std::size_t b = 0; b < l.batch; ++b) {
      const std::size_t o = l.offset(b, c);
      for (std::size_t i = 0; i < l.inner; ++i) x[o + i] = alpha[c] * ((y[o + i] - stats.mean[c]) * r) + beta[c];
    }
  }
  return x;
}

template <typename T>
BnLayerOutput<T> bn_layer_forward(const Tensor<T>& y, const BnDirective<T>& directive, std::span<const T> alpha,
                                  std::span<const T> beta, T epsilon) {
  const auto l = layout_of(y);
  require_same_length(l.channels, alpha.size(), "bn alpha");
  require_same_length(l.channels, beta.size(), "bn beta");

  BnLayerOutput<T> out;
  out.cache.source = directive.source;
  out.cache.var_passes.assign(l.channels, 1);

  switch (directive.source) {
    case BnStatsSource::Fixed:
      require_same_length(l.channels, directive.stats.mean.size(), "fixed statistics");
      out.used = directive.stats;
      out.cache.var_passes.assign(l.channels, 0);
      break;
    case BnStatsSource::Shared:
      require_same_length(l.channels, directive.stats.mean.size(), "shared statistics");
      out.batch = batch_stats(y);
      out.used = directive.stats;
      out.cache.batch_mean = out.batch.mean;
      break;
    case BnStatsSource::Batch: {
      out.batch = batch_stats(y);
      out.used = out.batch;
      if (!directive.shift.mean.empty()) {
        require_same_length(l.channels, directive.shift.mean.size(), "statistics shift");
        for (std::size_t c = 0; c < l.channels; ++c) {
          out.used.mean[c] = out.batch.mean[c] + directive.shift.mean[c];
          out.used.var[c] = out.batch.var[c] + directive.shift.var[c];
        }
      }
      if (directive.clip_variance) {
        for (std::size_t c = 0; c < l.channels; ++c) {
          if (!(out.used.var[c] >= directive.var_floor)) {
            out.used.var[c] = directive.var_floor;
            out.cache.var_passes[c] = 0;
            ++out.clipped;
          }
        }
      }
      out.cache.batch_mean = out.batch.mean;
      break;
    }
  }

  out.cache.input = y;
  out.cache.normalized = Tensor<T>(y.shape());
  out.cache.inv_std.resize(l.channels);
  out.output = Tensor<T>(y.shape());
  for (std::size_t c = 0; c < l.channels; ++c) {
    const T mean = out.used.mean[c];
    const T r = T{1} / std::sqrt(out.used.var[c] + epsilon);
    out.cache.inv_std[c] = r;
    for (std::size_t b = 0; b < l.batch; ++b) {
      const std::size_t o = l.offset(b, c);
      for (std::size_t i = 0; i < l.inner; ++i) {
        const T xhat = (y[o + i] - mean) * r;
        out.cache.normalized[o + i] = xhat;
        out.output[o + i] = alpha[c] * xhat + beta[c];
      }
    }
  }
  return out;
}

template <typename T>
BnGradients<T> bn_backward(const Tensor<T>& upstream, const BnCache<T>& cache, std::span<const T> alpha,
                           BnGradMode mode) {
  if (!upstream.same_shape(cache.input)) {
    throw StructuralError("bn_backward: upstream " + shape_string(upstream.shape()) + " does not match cache " +
                          shape_string(cache.input.shape()));
  }
  if (mode == BnGradMode::ThroughBatch && cache.source == BnStatsSource::Fixed) {
    throw StructuralError("bn_backward: cache holds fixed statistics, cannot differentiate through the batch");
  }
  const auto l = layout_of(upstream);
  require_same_length(l.channels, alpha.size(), "bn_backward alpha");

  BnGradients<T> g{Tensor<T>(upstream.shape()), std::vector<T>(l.channels, T{0}), std::vector<T>(l.channels, T{0})};
  const T m = static_cast<T>(l.count());

  for (std::size_t c = 0; c < l.channels; ++c) {
    const T r = cache.inv_std[c];
    T sum_dx{0}, sum_dx_xhat{0};
    for (std::size_t b = 0; b < l.batch; ++b) {
      const std::size_t o = l.offset(b, c);
      for (std::size_t i = 0; i < l.inner; ++i) {
        sum_dx += upstream[o + i];
        sum_dx_xhat += upstream[o + i] * cache.normalized[o + i];
      }
    }
    g.alpha[c] = sum_dx_xhat;
    g.beta[c] = sum_dx;

    const T a = alpha[c];
    if (mode == BnGradMode::Frozen) {
      for (std::size_t b = 0; b < l.batch; ++b) {
        const std::size_t o = l.offset(b, c);
        for (std::size_t i = 0; i < l.inner; ++i) g.input[o + i] = upstream[o + i] * a * r;
      }
      continue;
    }

    // Normalization used mean' and var' that differ from the batch values by
    // constants (shift or shared statistics), so d mean'/dy = 1/m and, unless
    // the variance was floored, d var'/dy_j = 2 (y_j - batch_mean) / m.
    const T d_mean = -r * a * sum_dx;
    const T d_var = cache.var_passes[c] ? T{-0.5} * r * r * a * sum_dx_xhat : T{0};
    const T mu = cache.batch_mean[c];
    for (std::size_t b = 0; b < l.batch; ++b) {
      const std::size_t o = l.offset(b, c);
      for (std::size_t i = 0; i < l.inner; ++i) {
        g.input[o + i] = upstream[o + i] * a * r + d_mean / m + d_var * T{2} * (cache.input[o + i] - mu) / m;
      }
    }
  }
  return g;
}

#define BNFL_INSTANTIATE(T)                                                                                       \
  template class BNStats<T>;                                                                                      \
  template std::size_t bn_channel_count(const Tensor<T>&);                                                        \
  template MeanVar<T> batch_stats(const Tensor<T>&);                                                              \
  template BNStats<T> ema_update(const BNStats<T>&, const BNStats<T>&, T);                                        \
  template BNStats<T> correct_stats(const BNStats<T>&, const BNStats<T>&, const BNStats<T>&, T);                  \
  template Tensor<T> bn_forward(const Tensor<T>&, const MeanVar<T>&, std::span<const T>, std::span<const T>, T); \
  template BnLayerOutput<T> bn_layer_forward(const Tensor<T>&, const BnDirective<T>&, std::span<const T>,         \
                                             std::span<const T>, T);                                              \
  template BnGradients<T> bn_backward(const Tensor<T>&, const BnCache<T>&, std::span<const T>, BnGradMode);

BNFL_INSTANTIATE(float)
BNFL_INSTANTIATE(double)

#undef BNFL_INSTANTIATE

}  // namespace bnfl
