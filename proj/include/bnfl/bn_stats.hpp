#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "bnfl/tensor.hpp"

namespace bnfl {

/// Which side of the EMA the momentum weighs.
enum class EmaConvention {
  RetainRho,  // running <- rho * running + (1 - rho) * incoming
  BlendRho,   // running <- (1 - rho) * running + rho * incoming
};

/// Every running-statistics update in the library goes through this constant.
inline constexpr EmaConvention kEmaConvention = EmaConvention::RetainRho;

/// Per-channel mean and (biased) variance of one BN layer.
template <typename T>
struct MeanVar {
  std::vector<T> mean;
  std::vector<T> var;

  std::size_t channels() const noexcept { return mean.size(); }
  bool operator==(const MeanVar&) const = default;
};

/// Per-BN-layer statistics in architecture order. The same shape carries
/// mini-batch, running, full-dataset and corrected statistics as well as the
/// statistics control variates.
template <typename T>
class BNStats {
 public:
  BNStats() = default;
  explicit BNStats(std::vector<MeanVar<T>> layers);

  static BNStats zeros(std::span<const std::size_t> channels);
  /// Mean 0, variance 1: the conventional initial running statistics.
  static BNStats unit(std::span<const std::size_t> channels);
  static BNStats zeros_like(const BNStats& other);

  std::size_t layer_count() const noexcept { return layers_.size(); }
  bool empty() const noexcept { return layers_.empty(); }
  MeanVar<T>& operator[](std::size_t l) { return layers_.at(l); }
  const MeanVar<T>& operator[](std::size_t l) const { return layers_.at(l); }
  const std::vector<MeanVar<T>>& layers() const noexcept { return layers_; }
  std::vector<MeanVar<T>>& layers() noexcept { return layers_; }

  /// Number of scalars (means plus variances), i.e. |S|.
  std::size_t element_count() const noexcept;

  bool congruent(const BNStats& other) const noexcept;
  void require_congruent(const BNStats& other, const char* context) const;

  BNStats& operator+=(const BNStats& other);
  BNStats& operator-=(const BNStats& other);
  BNStats& operator*=(T scale);
  /// this += a * x
  void axpy(T a, const BNStats& x);

  bool all_finite() const noexcept;
  /// Largest absolute element-wise difference; congruence required.
  T max_abs_diff(const BNStats& other) const;
  std::vector<T> flatten() const;

  template <typename U>
  BNStats<U> cast() const {
    std::vector<MeanVar<U>> out;
    out.reserve(layers_.size());
    for (const auto& l : layers_) {
      out.push_back({std::vector<U>(l.mean.begin(), l.mean.end()), std::vector<U>(l.var.begin(), l.var.end())});
    }
    return BNStats<U>(std::move(out));
  }

  bool operator==(const BNStats&) const = default;

 private:
  std::vector<MeanVar<T>> layers_;
};

template <typename T>
BNStats<T> operator+(BNStats<T> a, const BNStats<T>& b) {
  return a += b;
}
template <typename T>
BNStats<T> operator-(BNStats<T> a, const BNStats<T>& b) {
  return a -= b;
}
template <typename T>
BNStats<T> operator*(T s, BNStats<T> a) {
  return a *= s;
}

/// Number of normalized channels of a BN input: dim 1 of [B, C] or [B, C, H, W].
template <typename T>
std::size_t bn_channel_count(const Tensor<T>& y);

/// Empirical per-channel mean and biased (1/m) variance over the batch and
/// spatial positions, computed in two passes. Requires batch size >= 2.
template <typename T>
MeanVar<T> batch_stats(const Tensor<T>& pre_bn);

/// EMA of running statistics under kEmaConvention. rho must lie in [0, 1].
template <typename T>
BNStats<T> ema_update(const BNStats<T>& running, const BNStats<T>& incoming, T rho);

/// Linear statistics correction: batch - k_local + k_global, with every
/// variance entry raised to at least var_threshold. Means are never clipped.
template <typename T>
BNStats<T> correct_stats(const BNStats<T>& batch, const BNStats<T>& k_local, const BNStats<T>& k_global,
                         T var_threshold);

/// x = alpha * (y - mean) / sqrt(var + epsilon) + beta, broadcast per channel.
template <typename T>
Tensor<T> bn_forward(const Tensor<T>& y, const MeanVar<T>& stats, std::span<const T> alpha, std::span<const T> beta,
                     T epsilon);

/// Where a BN layer's normalization statistics come from.
enum class BnStatsSource {
  Batch,   // mini-batch statistics (optionally shifted and variance-floored); differentiated through
  Fixed,   // supplied statistics, treated as constants
  Shared,  // supplied statistics in the forward pass; gradient flows through the local batch statistics
};

template <typename T>
struct BnDirective {
  BnStatsSource source = BnStatsSource::Batch;
  /// Fixed / Shared: the statistics to normalize with.
  MeanVar<T> stats;
  /// Batch: added to the batch statistics before normalization. Empty means no shift.
  MeanVar<T> shift;
  /// Batch: lower bound applied to the (shifted) variance when set.
  bool clip_variance = false;
  T var_floor = T{0};

  static BnDirective batch() { return {}; }
  static BnDirective fixed(MeanVar<T> s) { return {BnStatsSource::Fixed, std::move(s), {}, false, T{0}}; }
  static BnDirective shared(MeanVar<T> s) { return {BnStatsSource::Shared, std::move(s), {}, false, T{0}}; }
  static BnDirective corrected(MeanVar<T> shift, T floor) {
    return {BnStatsSource::Batch, {}, std::move(shift), true, floor};
  }
};

template <typename T>
struct BnCache {
  BnStatsSource source = BnStatsSource::Batch;
  Tensor<T> input;
  Tensor<T> normalized;
  std::vector<T> inv_std;
  /// Raw mini-batch mean; empty for Fixed.
  std::vector<T> batch_mean;
  /// 1 where the variance path carries gradient (0 where the variance was floored).
  std::vector<unsigned char> var_passes;
};

template <typename T>
struct BnLayerOutput {
  Tensor<T> output;
  BnCache<T> cache;
  /// Raw mini-batch statistics (empty for Fixed).
  MeanVar<T> batch;
  /// Statistics actually used for normalization.
  MeanVar<T> used;
  std::size_t clipped = 0;
};

template <typename T>
BnLayerOutput<T> bn_layer_forward(const Tensor<T>& y, const BnDirective<T>& directive, std::span<const T> alpha,
                                  std::span<const T> beta, T epsilon);

enum class BnGradMode {
  ThroughBatch,  // full backward through mean and variance as functions of the batch
  Frozen,        // statistics treated as constants
};

template <typename T>
struct BnGradients {
  Tensor<T> input;
  std::vector<T> alpha;
  std::vector<T> beta;
};

/// ThroughBatch requires a cache produced from batch statistics (Batch or Shared).
template <typename T>
BnGradients<T> bn_backward(const Tensor<T>& upstream, const BnCache<T>& cache, std::span<const T> alpha,
                           BnGradMode mode);

/// The gradient mode a cache was produced for during training.
template <typename T>
BnGradMode natural_grad_mode(const BnCache<T>& cache) {
  return cache.source == BnStatsSource::Fixed ? BnGradMode::Frozen : BnGradMode::ThroughBatch;
}

}  // namespace bnfl
