#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "bnfl/bn_stats.hpp"
#include "bnfl/tensor.hpp"

namespace bnfl {

enum class LayerKind { Linear, Conv2d, BatchNorm, ReLU, MaxPool2d, Flatten };

struct LayerSpec {
  LayerKind kind;
  std::string name;
  std::size_t in = 0;   // Linear: input features; Conv2d: input channels
  std::size_t out = 0;  // Linear: output features; Conv2d: output channels
  std::size_t kernel = 0;
  std::size_t stride = 1;
  std::size_t padding = 0;

  static LayerSpec linear(std::string name, std::size_t in, std::size_t out);
  static LayerSpec conv2d(std::string name, std::size_t in, std::size_t out, std::size_t kernel,
                          std::size_t stride = 1, std::size_t padding = 0);
  static LayerSpec batch_norm(std::string name);
  static LayerSpec relu();
  static LayerSpec max_pool(std::size_t kernel);
  static LayerSpec flatten();
};

struct ParamInfo {
  std::string name;
  Shape shape;
  bool bn_affine = false;
};

template <typename T>
struct NamedTensor {
  std::string name;
  Tensor<T> value;
  bool bn_affine = false;

  bool operator==(const NamedTensor&) const = default;
};

/// Ordered parameter tensors of one architecture. ModelParams, Gradient and
/// the gradient control variates all share this layout.
template <typename T>
class ParamSet {
 public:
  ParamSet() = default;
  explicit ParamSet(std::vector<NamedTensor<T>> entries) : entries_(std::move(entries)) {}

  static ParamSet zeros_like(const ParamSet& other);

  std::size_t size() const noexcept { return entries_.size(); }
  NamedTensor<T>& operator[](std::size_t i) { return entries_.at(i); }
  const NamedTensor<T>& operator[](std::size_t i) const { return entries_.at(i); }
  const std::vector<NamedTensor<T>>& entries() const noexcept { return entries_; }
  const NamedTensor<T>* find(const std::string& name) const;

  /// Total number of scalars.
  std::size_t element_count() const noexcept;
  std::size_t bn_affine_count() const noexcept;

  bool congruent(const ParamSet& other) const noexcept;
  void require_congruent(const ParamSet& other, const char* context) const;

  ParamSet& operator+=(const ParamSet& other);
  ParamSet& operator-=(const ParamSet& other);
  ParamSet& operator*=(T scale);
  void axpy(T a, const ParamSet& x);

  bool all_finite() const noexcept;
  T max_abs_diff(const ParamSet& other) const;
  T squared_norm() const noexcept;
  std::vector<T> flatten() const;

  template <typename U>
  ParamSet<U> cast() const {
    std::vector<NamedTensor<U>> out;
    out.reserve(entries_.size());
    for (const auto& e : entries_) out.push_back({e.name, e.value.template cast<U>(), e.bn_affine});
    return ParamSet<U>(std::move(out));
  }

  bool operator==(const ParamSet&) const = default;

 private:
  std::vector<NamedTensor<T>> entries_;
};

template <typename T>
using ModelParams = ParamSet<T>;
template <typename T>
using Gradient = ParamSet<T>;

template <typename T>
ParamSet<T> operator+(ParamSet<T> a, const ParamSet<T>& b) {
  return a += b;
}
template <typename T>
ParamSet<T> operator-(ParamSet<T> a, const ParamSet<T>& b) {
  return a -= b;
}
template <typename T>
ParamSet<T> operator*(T s, ParamSet<T> a) {
  return a *= s;
}

/// A validated layer stack with its per-sample input shape.
class Architecture {
 public:
  Architecture(Shape input_shape, std::vector<LayerSpec> layers);

  /// in -> hidden -> BN -> ReLU -> hidden -> BN -> ReLU -> classes
  static Architecture mlp(std::size_t input_dim, std::size_t hidden, std::size_t classes);
  /// Two conv(3x3, pad 1) + BN + ReLU + maxpool(2) blocks followed by a linear head.
  static Architecture small_cnn(std::size_t channels, std::size_t height, std::size_t width, std::size_t classes,
                                std::size_t width1 = 4, std::size_t width2 = 8);

  const Shape& input_shape() const noexcept { return input_shape_; }
  std::size_t input_size() const noexcept { return shape_size(input_shape_); }
  const std::vector<LayerSpec>& layers() const noexcept { return layers_; }
  const std::vector<ParamInfo>& param_layout() const noexcept { return params_; }
  /// Per-sample output shape of every layer.
  const std::vector<Shape>& output_shapes() const noexcept { return output_shapes_; }
  std::size_t class_count() const noexcept { return classes_; }

  std::size_t bn_count() const noexcept { return bn_channels_.size(); }
  const std::vector<std::size_t>& bn_channels() const noexcept { return bn_channels_; }
  /// Index of the BN layer that layer `i` is, if any.
  std::optional<std::size_t> bn_index(std::size_t layer) const;
  /// Layer index of the `l`-th BN layer.
  std::size_t bn_layer(std::size_t l) const { return bn_layers_.at(l); }

  /// |W|: number of trainable scalars.
  std::size_t parameter_count() const noexcept;
  /// |S|: number of BN statistics scalars (means plus variances).
  std::size_t stats_count() const noexcept;
  /// Depth used for per-layer synchronization protocols: the number of BN layers.
  std::size_t depth() const noexcept { return bn_count(); }

  /// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights and biases, alpha = 1, beta = 0.
  template <typename T>
  ModelParams<T> init_params(std::uint64_t seed) const;
  template <typename T>
  BNStats<T> init_running_stats() const {
    return BNStats<T>::unit(bn_channels_);
  }
  template <typename T>
  BNStats<T> zero_stats() const {
    return BNStats<T>::zeros(bn_channels_);
  }

  /// Throws StructuralError unless `params` follows this architecture's layout.
  template <typename T>
  void require_params(const ModelParams<T>& params) const {
    if (params.size() != params_.size()) {
      throw StructuralError("parameter set has " + std::to_string(params.size()) + " tensors, architecture expects " +
                            std::to_string(params_.size()));
    }
    for (std::size_t i = 0; i < params_.size(); ++i) {
      if (params[i].name != params_[i].name || params[i].value.shape() != params_[i].shape) {
        throw StructuralError("parameter " + params[i].name + " " + shape_string(params[i].value.shape()) +
                              " does not match " + params_[i].name + " " + shape_string(params_[i].shape));
      }
    }
  }

  /// Index of the first parameter tensor owned by layer `i`.
  std::size_t param_offset(std::size_t layer) const { return param_offset_.at(layer); }

 private:
  Shape input_shape_;
  std::vector<LayerSpec> layers_;
  std::vector<ParamInfo> params_;
  std::vector<std::size_t> param_offset_;  // first param index of each layer
  std::vector<Shape> output_shapes_;
  std::vector<std::size_t> bn_channels_;
  std::vector<std::size_t> bn_layers_;
  std::size_t classes_ = 0;
};

/// Per-BN-layer statistics directives for one forward pass.
template <typename T>
struct BnPlan {
  std::vector<BnDirective<T>> layers;

  /// Mini-batch statistics everywhere.
  static BnPlan train(std::size_t bn_count);
  /// Running statistics everywhere, treated as constants.
  static BnPlan eval(const BNStats<T>& running);
  /// Supplied statistics used verbatim and treated as constants.
  static BnPlan injected(const BNStats<T>& stats);
  /// Batch statistics plus `shift`, variance floored at `var_floor`.
  static BnPlan corrected(const BNStats<T>& shift, T var_floor);
  /// Supplied statistics in the forward pass, gradient through the local batch statistics.
  static BnPlan shared(const BNStats<T>& stats);
};

template <typename T>
struct LayerCache {
  Tensor<T> input;
  std::vector<std::uint32_t> index;  // ReLU mask / max-pool argmax
  BnCache<T> bn;
};

template <typename T>
struct ActivationCache {
  const Architecture* arch = nullptr;
  std::vector<LayerCache<T>> layers;
  Tensor<T> logits;
};

template <typename T>
struct ForwardResult {
  Tensor<T> logits;
  ActivationCache<T> cache;
  /// Raw mini-batch statistics for every layer normalized from the batch; empty in eval mode.
  BNStats<T> batch_stats;
  /// Statistics actually used for normalization, per BN layer.
  BNStats<T> used_stats;
  std::size_t clipped = 0;
};

template <typename T>
ForwardResult<T> forward(const Architecture& arch, const ModelParams<T>& params, const Tensor<T>& batch,
                         const BnPlan<T>& plan, T epsilon);

/// Input of the `bn`-th BN layer, running the network only up to that point.
/// Layers before it follow `plan`.
template <typename T>
Tensor<T> pre_bn_activations(const Architecture& arch, const ModelParams<T>& params, const Tensor<T>& batch,
                             const BnPlan<T>& plan, std::size_t bn, T epsilon);

template <typename T>
struct LossResult {
  T value;
  Tensor<T> grad_logits;
};

/// Mean cross-entropy over the batch, with the log-sum-exp shift.
template <typename T>
LossResult<T> cross_entropy(const Tensor<T>& logits, std::span<const int> labels);

template <typename T>
struct BackwardResult {
  Gradient<T> grad;
  T loss;
};

template <typename T>
BackwardResult<T> backward(const Architecture& arch, const ModelParams<T>& params, const ActivationCache<T>& cache,
                           std::span<const int> labels);

/// w - lr * (grad + correction).
template <typename T>
ModelParams<T> sgd_step(const ModelParams<T>& w, const Gradient<T>& grad, const Gradient<T>& correction, T lr);

}  // namespace bnfl
