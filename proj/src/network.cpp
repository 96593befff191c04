#include "bnfl/network.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <random>

namespace bnfl {

// ---------------------------------------------------------------------------
// Layer specs

LayerSpec LayerSpec::linear(std::string name, std::size_t in, std::size_t out) {
  return {LayerKind::Linear, std::move(name), in, out, 0, 1, 0};
}

LayerSpec LayerSpec::conv2d(std::string name, std::size_t in, std::size_t out, std::size_t kernel, std::size_t stride,
                            std::size_t padding) {
  return {LayerKind::Conv2d, std::move(name), in, out, kernel, stride, padding};
}

LayerSpec LayerSpec::batch_norm(std::string name) { return {LayerKind::BatchNorm, std::move(name)}; }
LayerSpec LayerSpec::relu() { return {LayerKind::ReLU, "relu"}; }
LayerSpec LayerSpec::max_pool(std::size_t kernel) { return {LayerKind::MaxPool2d, "pool", 0, 0, kernel, kernel, 0}; }
LayerSpec LayerSpec::flatten() { return {LayerKind::Flatten, "flatten"}; }

// ---------------------------------------------------------------------------
// ParamSet

template <typename T>
ParamSet<T> ParamSet<T>::zeros_like(const ParamSet& other) {
  std::vector<NamedTensor<T>> out;
  out.reserve(other.entries_.size());
  for (const auto& e : other.entries_) out.push_back({e.name, Tensor<T>(e.value.shape()), e.bn_affine});
  return ParamSet(std::move(out));
}

template <typename T>
const NamedTensor<T>* ParamSet<T>::find(const std::string& name) const {
  auto it = std::find_if(entries_.begin(), entries_.end(), [&](const auto& e) { return e.name == name; });
  return it == entries_.end() ? nullptr : &*it;
}

template <typename T>
std::size_t ParamSet<T>::element_count() const noexcept {
  std::size_t n = 0;
  for (const auto& e : entries_) n += e.value.size();
  return n;
}

template <typename T>
std::size_t ParamSet<T>::bn_affine_count() const noexcept {
  std::size_t n = 0;
  for (const auto& e : entries_)
    if (e.bn_affine) n += e.value.size();
  return n;
}

template <typename T>
bool ParamSet<T>::congruent(const ParamSet& other) const noexcept {
  if (entries_.size() != other.entries_.size()) return false;
  for (std::size_t i = 0; i < entries_.size(); ++i) {
    if (entries_[i].name != other.entries_[i].name || !entries_[i].value.same_shape(other.entries_[i].value)) {
      return false;
    }
  }
  return true;
}

template <typename T>
void ParamSet<T>::require_congruent(const ParamSet& other, const char* context) const {
  if (!congruent(other)) throw StructuralError(std::string(context) + ": structurally incongruent parameter sets");
}

template <typename T>
ParamSet<T>& ParamSet<T>::operator+=(const ParamSet& other) {
  require_congruent(other, "parameter addition");
  for (std::size_t i = 0; i < entries_.size(); ++i) {
    auto& a = entries_[i].value;
    const auto& b = other.entries_[i].value;
    for (std::size_t j = 0; j < a.size(); ++j) a[j] += b[j];
  }
  return *this;
}

template <typename T>
ParamSet<T>& ParamSet<T>::operator-=(const ParamSet& other) {
  require_congruent(other, "parameter subtraction");
  for (std::size_t i = 0; i < entries_.size(); ++i) {
    auto& a = entries_[i].value;
    const auto& b = other.entries_[i].value;
    for (std::size_t j = 0; j < a.size(); ++j) a[j] -= b[j];
  }
  return *this;
}

template <typename T>
ParamSet<T>& ParamSet<T>::operator*=(T scale) {
  for (auto& e : entries_)
    for (auto& v : e.value) v *= scale;
  return *this;
}

template <typename T>
void ParamSet<T>::axpy(T a, const ParamSet& x) {
  require_congruent(x, "parameter axpy");
  for (std::size_t i = 0; i < entries_.size(); ++i) {
    auto& y = entries_[i].value;
    const auto& v = x.entries_[i].value;
    for (std::size_t j = 0; j < y.size(); ++j) y[j] += a * v[j];
  }
}

template <typename T>
bool ParamSet<T>::all_finite() const noexcept {
  return std::all_of(entries_.begin(), entries_.end(), [](const auto& e) { return e.value.all_finite(); });
}

template <typename T>
T ParamSet<T>::max_abs_diff(const ParamSet& other) const {
  require_congruent(other, "parameter comparison");
  T worst{0};
  for (std::size_t i = 0; i < entries_.size(); ++i) {
    const auto& a = entries_[i].value;
    const auto& b = other.entries_[i].value;
    for (std::size_t j = 0; j < a.size(); ++j) worst = std::max(worst, std::abs(a[j] - b[j]));
  }
  return worst;
}

template <typename T>
T ParamSet<T>::squared_norm() const noexcept {
  T s{0};
  for (const auto& e : entries_)
    for (auto v : e.value) s += v * v;
  return s;
}

template <typename T>
std::vector<T> ParamSet<T>::flatten() const {
  std::vector<T> out;
  out.reserve(element_count());
  for (const auto& e : entries_) out.insert(out.end(), e.value.begin(), e.value.end());
  return out;
}

// ---------------------------------------------------------------------------
// Architecture

Architecture::Architecture(Shape input_shape, std::vector<LayerSpec> layers)
    : input_shape_(std::move(input_shape)), layers_(std::move(layers)) {
  if (input_shape_.empty() || shape_size(input_shape_) == 0) throw StructuralError("empty input shape");
  Shape cur = input_shape_;
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    const auto& l = layers_[i];
    param_offset_.push_back(params_.size());
    auto fail = [&](const std::string& why) {
      throw StructuralError("layer " + std::to_string(i) + " (" + l.name + "): " + why + ", input " +
                            shape_string(cur));
    };
    switch (l.kind) {
      case LayerKind::Linear:
        if (cur.size() != 1 || cur[0] != l.in || l.out == 0) fail("linear expects [" + std::to_string(l.in) + "]");
        params_.push_back({l.name + ".weight", {l.out, l.in}, false});
        params_.push_back({l.name + ".bias", {l.out}, false});
        cur = {l.out};
        break;
      case LayerKind::Conv2d: {
        if (cur.size() != 3 || cur[0] != l.in || l.out == 0 || l.kernel == 0 || l.stride == 0) fail("bad conv2d");
        if (cur[1] + 2 * l.padding < l.kernel || cur[2] + 2 * l.padding < l.kernel) fail("kernel larger than input");
        const std::size_t h = (cur[1] + 2 * l.padding - l.kernel) / l.stride + 1;
        const std::size_t w = (cur[2] + 2 * l.padding - l.kernel) / l.stride + 1;
        params_.push_back({l.name + ".weight", {l.out, l.in, l.kernel, l.kernel}, false});
        params_.push_back({l.name + ".bias", {l.out}, false});
        cur = {l.out, h, w};
        break;
      }
      case LayerKind::BatchNorm:
        if (cur.size() != 1 && cur.size() != 3) fail("batch norm expects features or channels x H x W");
        params_.push_back({l.name + ".alpha", {cur[0]}, true});
        params_.push_back({l.name + ".beta", {cur[0]}, true});
        bn_channels_.push_back(cur[0]);
        bn_layers_.push_back(i);
        break;
      case LayerKind::ReLU:
        break;
      case LayerKind::MaxPool2d:
        if (cur.size() != 3 || l.kernel == 0 || cur[1] < l.kernel || cur[2] < l.kernel) fail("bad max pool");
        cur = {cur[0], cur[1] / l.kernel, cur[2] / l.kernel};
        break;
      case LayerKind::Flatten:
        cur = {shape_size(cur)};
        break;
    }
    output_shapes_.push_back(cur);
  }
  if (cur.size() != 1) throw StructuralError("network output must be a class-score vector, got " + shape_string(cur));
  classes_ = cur[0];
}

Architecture Architecture::mlp(std::size_t input_dim, std::size_t hidden, std::size_t classes) {
  return Architecture({input_dim}, {LayerSpec::linear("fc1", input_dim, hidden), LayerSpec::batch_norm("bn1"),
                                    LayerSpec::relu(), LayerSpec::linear("fc2", hidden, hidden),
                                    LayerSpec::batch_norm("bn2"), LayerSpec::relu(),
                                    LayerSpec::linear("fc3", hidden, classes)});
}

Architecture Architecture::small_cnn(std::size_t channels, std::size_t height, std::size_t width, std::size_t classes,
                                     std::size_t width1, std::size_t width2) {
  const std::size_t h = height / 2 / 2;
  const std::size_t w = width / 2 / 2;
  return Architecture({channels, height, width},
                      {LayerSpec::conv2d("conv1", channels, width1, 3, 1, 1), LayerSpec::batch_norm("bn1"),
                       LayerSpec::relu(), LayerSpec::max_pool(2), LayerSpec::conv2d("conv2", width1, width2, 3, 1, 1),
                       LayerSpec::batch_norm("bn2"), LayerSpec::relu(), LayerSpec::max_pool(2), LayerSpec::flatten(),
                       LayerSpec::linear("fc", width2 * h * w, classes)});
}

std::optional<std::size_t> Architecture::bn_index(std::size_t layer) const {
  auto it = std::find(bn_layers_.begin(), bn_layers_.end(), layer);
  if (it == bn_layers_.end()) return std::nullopt;
  return static_cast<std::size_t>(it - bn_layers_.begin());
}

std::size_t Architecture::parameter_count() const noexcept {
  std::size_t n = 0;
  for (const auto& p : params_) n += shape_size(p.shape);
  return n;
}

std::size_t Architecture::stats_count() const noexcept {
  std::size_t n = 0;
  for (auto c : bn_channels_) n += 2 * c;
  return n;
}

template <typename T>
ModelParams<T> Architecture::init_params(std::uint64_t seed) const {
  std::mt19937_64 rng(seed);
  std::vector<NamedTensor<T>> entries;
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    const auto& l = layers_[i];
    const std::size_t first = param_offset_[i];
    if (l.kind == LayerKind::Linear || l.kind == LayerKind::Conv2d) {
      const std::size_t fan_in = l.kind == LayerKind::Linear ? l.in : l.in * l.kernel * l.kernel;
      const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
      std::uniform_real_distribution<double> dist(-bound, bound);
      for (std::size_t k = 0; k < 2; ++k) {
        const auto& info = params_[first + k];
        Tensor<T> t(info.shape);
        for (auto& v : t) v = static_cast<T>(dist(rng));
        entries.push_back({info.name, std::move(t), false});
      }
    } else if (l.kind == LayerKind::BatchNorm) {
      entries.push_back({params_[first].name, Tensor<T>(params_[first].shape, T{1}), true});
      entries.push_back({params_[first + 1].name, Tensor<T>(params_[first + 1].shape, T{0}), true});
    }
  }
  return ModelParams<T>(std::move(entries));
}

// ---------------------------------------------------------------------------
// Plans

template <typename T>
BnPlan<T> BnPlan<T>::train(std::size_t bn_count) {
  return {std::vector<BnDirective<T>>(bn_count, BnDirective<T>::batch())};
}

template <typename T>
BnPlan<T> BnPlan<T>::eval(const BNStats<T>& running) {
  return injected(running);
}

template <typename T>
BnPlan<T> BnPlan<T>::injected(const BNStats<T>& stats) {
  BnPlan plan;
  for (const auto& l : stats.layers()) plan.layers.push_back(BnDirective<T>::fixed(l));
  return plan;
}

template <typename T>
BnPlan<T> BnPlan<T>::corrected(const BNStats<T>& shift, T var_floor) {
  BnPlan plan;
  for (const auto& l : shift.layers()) plan.layers.push_back(BnDirective<T>::corrected(l, var_floor));
  return plan;
}

template <typename T>
BnPlan<T> BnPlan<T>::shared(const BNStats<T>& stats) {
  BnPlan plan;
  for (const auto& l : stats.layers()) plan.layers.push_back(BnDirective<T>::shared(l));
  return plan;
}

// ---------------------------------------------------------------------------
// Kernels

namespace {

template <typename T>
Tensor<T> linear_forward(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias) {
  const std::size_t batch = x.dim(0), in = w.dim(1), out = w.dim(0);
  Tensor<T> y({batch, out});
  for (std::size_t b = 0; b < batch; ++b) {
    const T* xr = x.data().data() + b * in;
    for (std::size_t o = 0; o < out; ++o) {
      const T* wr = w.data().data() + o * in;
      T acc = bias[o];
      for (std::size_t i = 0; i < in; ++i) acc += xr[i] * wr[i];
      y[b * out + o] = acc;
    }
  }
  return y;
}

template <typename T>
void linear_backward(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& dy, Tensor<T>& dw, Tensor<T>& db,
                     Tensor<T>& dx) {
  const std::size_t batch = x.dim(0), in = w.dim(1), out = w.dim(0);
  dx = Tensor<T>(x.shape());
  for (std::size_t b = 0; b < batch; ++b) {
    const T* xr = x.data().data() + b * in;
    T* dxr = dx.data().data() + b * in;
    for (std::size_t o = 0; o < out; ++o) {
      const T g = dy[b * out + o];
      db[o] += g;
      T* dwr = dw.data().data() + o * in;
      const T* wr = w.data().data() + o * in;
      for (std::size_t i = 0; i < in; ++i) {
        dwr[i] += g * xr[i];
        dxr[i] += g * wr[i];
      }
    }
  }
}

struct ConvGeometry {
  std::size_t batch, cin, h, w, cout, k, stride, pad, ho, wo;
};

template <typename T>
ConvGeometry conv_geometry(const Tensor<T>& x, const Tensor<T>& weight, const LayerSpec& spec) {
  ConvGeometry g{x.dim(0), x.dim(1), x.dim(2), x.dim(3), weight.dim(0), spec.kernel, spec.stride, spec.padding, 0, 0};
  g.ho = (g.h + 2 * g.pad - g.k) / g.stride + 1;
  g.wo = (g.w + 2 * g.pad - g.k) / g.stride + 1;
  return g;
}

template <typename T>
Tensor<T> conv_forward(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias, const LayerSpec& spec) {
  const auto g = conv_geometry(x, weight, spec);
  Tensor<T> y({g.batch, g.cout, g.ho, g.wo});
  for (std::size_t b = 0; b < g.batch; ++b) {
    for (std::size_t co = 0; co < g.cout; ++co) {
      for (std::size_t oy = 0; oy < g.ho; ++oy) {
        for (std::size_t ox = 0; ox < g.wo; ++ox) {
          T acc = bias[co];
          for (std::size_t ci = 0; ci < g.cin; ++ci) {
            for (std::size_t ky = 0; ky < g.k; ++ky) {
              const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * g.stride + ky) - static_cast<std::ptrdiff_t>(g.pad);
              if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.h)) continue;
              for (std::size_t kx = 0; kx < g.k; ++kx) {
                const std::ptrdiff_t ix =
                    static_cast<std::ptrdiff_t>(ox * g.stride + kx) - static_cast<std::ptrdiff_t>(g.pad);
                if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(g.w)) continue;
                acc += x[((b * g.cin + ci) * g.h + iy) * g.w + ix] * weight[((co * g.cin + ci) * g.k + ky) * g.k + kx];
              }
            }
          }
          y[((b * g.cout + co) * g.ho + oy) * g.wo + ox] = acc;
        }
      }
    }
  }
  return y;
}

template <typename T>
void conv_backward(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& dy, const LayerSpec& spec,
                   Tensor<T>& dw, Tensor<T>& db, Tensor<T>& dx) {
  const auto g = conv_geometry(x, weight, spec);
  dx = Tensor<T>(x.shape());
  for (std::size_t b = 0; b < g.batch; ++b) {
    for (std::size_t co = 0; co < g.cout; ++co) {
      for (std::size_t oy = 0; oy < g.ho; ++oy) {
        for (std::size_t ox = 0; ox < g.wo; ++ox) {
          const T d = dy[((b * g.cout + co) * g.ho + oy) * g.wo + ox];
          db[co] += d;
          for (std::size_t ci = 0; ci < g.cin; ++ci) {
            for (std::size_t ky = 0; ky < g.k; ++ky) {
              const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * g.stride + ky) - static_cast<std::ptrdiff_t>(g.pad);
              if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.h)) continue;
              for (std::size_t kx = 0; kx < g.k; ++kx) {
                const std::ptrdiff_t ix =
                    static_cast<std::ptrdiff_t>(ox * g.stride + kx) - static_cast<std::ptrdiff_t>(g.pad);
                if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(g.w)) continue;
                const std::size_t xi = ((b * g.cin + ci) * g.h + iy) * g.w + ix;
                const std::size_t wi = ((co * g.cin + ci) * g.k + ky) * g.k + kx;
                dw[wi] += d * x[xi];
                dx[xi] += d * weight[wi];
              }
            }
          }
        }
      }
    }
  }
}

template <typename T>
Tensor<T> max_pool_forward(const Tensor<T>& x, std::size_t k, std::vector<std::uint32_t>& argmax) {
  const std::size_t batch = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  const std::size_t ho = h / k, wo = w / k;
  Tensor<T> y({batch, c, ho, wo});
  argmax.resize(y.size());
  for (std::size_t bc = 0; bc < batch * c; ++bc) {
    for (std::size_t oy = 0; oy < ho; ++oy) {
      for (std::size_t ox = 0; ox < wo; ++ox) {
        std::size_t best = (bc * h + oy * k) * w + ox * k;
        for (std::size_t ky = 0; ky < k; ++ky) {
          for (std::size_t kx = 0; kx < k; ++kx) {
            const std::size_t idx = (bc * h + oy * k + ky) * w + ox * k + kx;
            if (x[idx] > x[best]) best = idx;
          }
        }
        const std::size_t o = (bc * ho + oy) * wo + ox;
        y[o] = x[best];
        argmax[o] = static_cast<std::uint32_t>(best);
      }
    }
  }
  return y;
}

template <typename T>
std::span<const T> param_span(const ModelParams<T>& p, std::size_t i) {
  return p[i].value.data();
}

// Runs layers [0, stop) and returns the activation entering layer `stop`.
template <typename T>
Tensor<T> run_layers(const Architecture& arch, const ModelParams<T>& params, const Tensor<T>& batch,
                     const BnPlan<T>& plan, T epsilon, std::size_t stop, ForwardResult<T>* record) {
  arch.require_params(params);
  if (batch.rank() < 2 || Shape(batch.shape().begin() + 1, batch.shape().end()) != arch.input_shape()) {
    throw StructuralError("batch shape " + shape_string(batch.shape()) + " does not match architecture input " +
                          shape_string(arch.input_shape()));
  }
  if (plan.layers.size() != arch.bn_count()) {
    throw StructuralError("BN plan has " + std::to_string(plan.layers.size()) + " directives, architecture has " +
                          std::to_string(arch.bn_count()) + " BN layers");
  }
  const std::size_t n = batch.dim(0);
  std::vector<MeanVar<T>> batch_stats, used_stats;
  bool any_batch = false;

  Tensor<T> cur = batch;
  for (std::size_t i = 0; i < stop; ++i) {
    const auto& spec = arch.layers()[i];
    const std::size_t p = arch.param_offset(i);
    LayerCache<T> lc;
    Tensor<T> next;
    switch (spec.kind) {
      case LayerKind::Linear:
        next = linear_forward(cur, params[p].value, params[p + 1].value);
        if (record) lc.input = std::move(cur);
        break;
      case LayerKind::Conv2d:
        next = conv_forward(cur, params[p].value, params[p + 1].value, spec);
        if (record) lc.input = std::move(cur);
        break;
      case LayerKind::BatchNorm: {
        const std::size_t bn = *arch.bn_index(i);
        auto out = bn_layer_forward(cur, plan.layers[bn], param_span(params, p), param_span(params, p + 1), epsilon);
        next = std::move(out.output);
        if (!out.batch.mean.empty()) any_batch = true;
        batch_stats.push_back(std::move(out.batch));
        used_stats.push_back(std::move(out.used));
        if (record) {
          record->clipped += out.clipped;
          lc.bn = std::move(out.cache);
        }
        break;
      }
      case LayerKind::ReLU:
        next = cur;
        if (record) lc.index.resize(cur.size());
        for (std::size_t j = 0; j < next.size(); ++j) {
          const bool on = next[j] > T{0};
          if (!on) next[j] = T{0};
          if (record) lc.index[j] = on ? 1u : 0u;
        }
        break;
      case LayerKind::MaxPool2d:
        next = max_pool_forward(cur, spec.kernel, lc.index);
        if (record) lc.input = Tensor<T>(cur.shape());  // shape only
        break;
      case LayerKind::Flatten:
        next = cur.reshaped({n, cur.size() / n});
        if (record) lc.input = Tensor<T>(cur.shape());
        break;
    }
    if (record) record->cache.layers.push_back(std::move(lc));
    cur = std::move(next);
  }
  if (record) {
    record->used_stats = BNStats<T>(std::move(used_stats));
    if (any_batch) {
      // Layers normalized with fixed statistics contribute empty entries; keep
      // the layer structure only when every layer saw batch statistics.
      bool complete = std::all_of(batch_stats.begin(), batch_stats.end(), [](const auto& s) { return !s.mean.empty(); });
      if (complete) record->batch_stats = BNStats<T>(std::move(batch_stats));
    }
  }
  return cur;
}

}  // namespace

template <typename T>
ForwardResult<T> forward(const Architecture& arch, const ModelParams<T>& params, const Tensor<T>& batch,
                         const BnPlan<T>& plan, T epsilon) {
  ForwardResult<T> r;
  r.cache.arch = &arch;
  r.logits = run_layers(arch, params, batch, plan, epsilon, arch.layers().size(), &r);
  r.cache.logits = r.logits;
  return r;
}

template <typename T>
Tensor<T> pre_bn_activations(const Architecture& arch, const ModelParams<T>& params, const Tensor<T>& batch,
                             const BnPlan<T>& plan, std::size_t bn, T epsilon) {
  if (bn >= arch.bn_count()) throw StructuralError("BN layer index out of range");
  return run_layers<T>(arch, params, batch, plan, epsilon, arch.bn_layer(bn), nullptr);
}

template <typename T>
LossResult<T> cross_entropy(const Tensor<T>& logits, std::span<const int> labels) {
  if (logits.rank() != 2 || logits.dim(0) != labels.size()) {
    throw StructuralError("cross_entropy: logits " + shape_string(logits.shape()) + " vs " +
                          std::to_string(labels.size()) + " labels");
  }
  const std::size_t batch = logits.dim(0), k = logits.dim(1);
  LossResult<T> r{T{0}, Tensor<T>(logits.shape())};
  const T inv_b = T{1} / static_cast<T>(batch);
  for (std::size_t b = 0; b < batch; ++b) {
    const int y = labels[b];
    if (y < 0 || static_cast<std::size_t>(y) >= k) throw StructuralError("label out of range");
    const T* z = logits.data().data() + b * k;
    const T m = *std::max_element(z, z + k);
    T sum{0};
    for (std::size_t j = 0; j < k; ++j) sum += std::exp(z[j] - m);
    const T lse = m + std::log(sum);
    r.value += (lse - z[y]) * inv_b;
    for (std::size_t j = 0; j < k; ++j) {
      const T p = std::exp(z[j] - lse);
      r.grad_logits[b * k + j] = (p - (static_cast<int>(j) == y ? T{1} : T{0})) * inv_b;
    }
  }
  return r;
}

template <typename T>
BackwardResult<T> backward(const Architecture& arch, const ModelParams<T>& params, const ActivationCache<T>& cache,
                           std::span<const int> labels) {
  if (cache.arch != &arch || cache.layers.size() != arch.layers().size()) {
    throw StructuralError("activation cache was not produced by this architecture");
  }
  arch.require_params(params);
  auto loss = cross_entropy(cache.logits, labels);
  BackwardResult<T> r{Gradient<T>::zeros_like(params), loss.value};
  Tensor<T> grad = std::move(loss.grad_logits);

  for (std::size_t ii = arch.layers().size(); ii-- > 0;) {
    const auto& spec = arch.layers()[ii];
    const auto& lc = cache.layers[ii];
    const std::size_t p = arch.param_offset(ii);
    switch (spec.kind) {
      case LayerKind::Linear: {
        Tensor<T> dx;
        linear_backward(lc.input, params[p].value, grad, r.grad[p].value, r.grad[p + 1].value, dx);
        grad = std::move(dx);
        break;
      }
      case LayerKind::Conv2d: {
        Tensor<T> dx;
        conv_backward(lc.input, params[p].value, grad, spec, r.grad[p].value, r.grad[p + 1].value, dx);
        grad = std::move(dx);
        break;
      }
      case LayerKind::BatchNorm: {
        auto g = bn_backward(grad, lc.bn, param_span(params, p), natural_grad_mode(lc.bn));
        std::copy(g.alpha.begin(), g.alpha.end(), r.grad[p].value.begin());
        std::copy(g.beta.begin(), g.beta.end(), r.grad[p + 1].value.begin());
        grad = std::move(g.input);
        break;
      }
      case LayerKind::ReLU:
        for (std::size_t j = 0; j < grad.size(); ++j)
          if (!lc.index[j]) grad[j] = T{0};
        break;
      case LayerKind::MaxPool2d: {
        Tensor<T> dx(lc.input.shape());
        for (std::size_t j = 0; j < grad.size(); ++j) dx[lc.index[j]] += grad[j];
        grad = std::move(dx);
        break;
      }
      case LayerKind::Flatten:
        grad = grad.reshaped(lc.input.shape());
        break;
    }
  }
  return r;
}

template <typename T>
ModelParams<T> sgd_step(const ModelParams<T>& w, const Gradient<T>& grad, const Gradient<T>& correction, T lr) {
  w.require_congruent(grad, "sgd_step gradient");
  w.require_congruent(correction, "sgd_step correction");
  ModelParams<T> out = w;
  for (std::size_t i = 0; i < out.size(); ++i) {
    auto& v = out[i].value;
    const auto& g = grad[i].value;
    const auto& c = correction[i].value;
    for (std::size_t j = 0; j < v.size(); ++j) v[j] = v[j] - lr * (g[j] + c[j]);
  }
  return out;
}

#define BNFL_INSTANTIATE(T)                                                                                        \
  template class ParamSet<T>;                                                                                      \
  template struct BnPlan<T>;                                                                                       \
  template ModelParams<T> Architecture::init_params<T>(std::uint64_t) const;                                       \
  template ForwardResult<T> forward(const Architecture&, const ModelParams<T>&, const Tensor<T>&, const BnPlan<T>&, \
                                    T);                                                                            \
  template Tensor<T> pre_bn_activations(const Architecture&, const ModelParams<T>&, const Tensor<T>&,              \
                                        const BnPlan<T>&, std::size_t, T);                                         \
  template LossResult<T> cross_entropy(const Tensor<T>&, std::span<const int>);                                    \
  template BackwardResult<T> backward(const Architecture&, const ModelParams<T>&, const ActivationCache<T>&,       \
                                      std::span<const int>);                                                       \
  template ModelParams<T> sgd_step(const ModelParams<T>&, const Gradient<T>&, const Gradient<T>&, T);

BNFL_INSTANTIATE(float)
BNFL_INSTANTIATE(double)

#undef BNFL_INSTANTIATE

}  // namespace bnfl
