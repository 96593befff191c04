#include "bnfl/data.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>
#include <random>

#include "bnfl/errors.hpp"

namespace bnfl {

void Dataset::validate() const {
  if (sample_shape.empty() || sample_size() == 0) throw StructuralError("dataset has an empty sample shape");
  if (features.size() != labels.size() * sample_size()) {
    throw StructuralError("dataset holds " + std::to_string(features.size()) + " feature values for " +
                          std::to_string(labels.size()) + " samples of shape " + shape_string(sample_shape));
  }
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= class_count) {
      throw StructuralError("label " + std::to_string(labels[i]) + " of sample " + std::to_string(i) +
                            " outside [0, " + std::to_string(class_count) + ")");
    }
  }
  if (!std::all_of(features.begin(), features.end(), [](double v) { return std::isfinite(v); })) {
    throw StructuralError("dataset features contain non-finite values");
  }
}

Dataset Dataset::subset(std::span<const std::size_t> indices) const {
  Dataset out{sample_shape, {}, {}, class_count};
  const std::size_t d = sample_size();
  out.features.reserve(indices.size() * d);
  out.labels.reserve(indices.size());
  for (auto i : indices) {
    if (i >= size()) throw StructuralError("subset index " + std::to_string(i) + " out of range");
    auto s = sample(i);
    out.features.insert(out.features.end(), s.begin(), s.end());
    out.labels.push_back(labels[i]);
  }
  return out;
}

std::vector<std::size_t> Dataset::class_histogram() const {
  std::vector<std::size_t> h(class_count, 0);
  for (int y : labels) ++h.at(static_cast<std::size_t>(y));
  return h;
}

std::uint64_t splitmix64(std::uint64_t x) noexcept {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

std::uint64_t derive_seed(std::uint64_t master, std::uint64_t stream, std::uint64_t index) noexcept {
  return splitmix64(splitmix64(splitmix64(master) ^ stream) ^ index);
}

// ---------------------------------------------------------------------------

Dataset gaussian_clusters(const std::vector<std::vector<double>>& means, std::size_t samples_per_class,
                          double spread, std::uint64_t seed) {
  if (means.empty() || means.front().empty() || samples_per_class == 0) {
    throw ConfigError("data", "synthetic data needs at least one class, one dimension and one sample per class");
  }
  if (!(spread >= 0.0)) throw ConfigError("data.spread", "cluster spread must be non-negative");
  const std::size_t dims = means.front().size();
  Dataset out{{dims}, {}, {}, means.size()};
  out.features.reserve(means.size() * samples_per_class * dims);
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> noise(0.0, 1.0);
  for (std::size_t c = 0; c < means.size(); ++c) {
    if (means[c].size() != dims) throw StructuralError("class means differ in dimension");
    for (std::size_t s = 0; s < samples_per_class; ++s) {
      for (std::size_t j = 0; j < dims; ++j) out.features.push_back(means[c][j] + spread * noise(rng));
      out.labels.push_back(static_cast<int>(c));
    }
  }
  return out;
}

Dataset gen_synthetic(const SyntheticSpec& spec) {
  if (spec.classes < 2) throw ConfigError("data.classes", "need at least two classes");
  if (spec.dims < spec.classes) throw ConfigError("data.dims", "dims must be at least the class count");
  const double k = static_cast<double>(spec.classes);
  const double norm = spec.scale * std::sqrt(k / (k - 1.0));
  std::vector<std::vector<double>> means(spec.classes, std::vector<double>(spec.dims, 0.0));
  for (std::size_t c = 0; c < spec.classes; ++c) {
    for (std::size_t j = 0; j < spec.classes; ++j) means[c][j] = norm * ((c == j ? 1.0 : 0.0) - 1.0 / k);
    if (c >= spec.classes / 2 && spec.group_shift != 0.0) {
      for (auto& v : means[c]) v += spec.group_shift;
    }
  }
  return gaussian_clusters(means, spec.samples_per_class, spec.cluster_spread, spec.seed);
}

namespace {

constexpr std::array<char, 8> kSynMagic = {'B', 'N', 'F', 'L', 'S', 'Y', 'N', '1'};

template <typename U>
void put(std::vector<std::uint8_t>& out, U v) {
  std::uint8_t buf[sizeof(U)];
  std::memcpy(buf, &v, sizeof(U));
  out.insert(out.end(), buf, buf + sizeof(U));
}

class Reader {
 public:
  Reader(std::span<const std::uint8_t> bytes, std::string what) : bytes_(bytes), what_(std::move(what)) {}

  template <typename U>
  U native(const char* field) {
    need(sizeof(U), field);
    U v;
    std::memcpy(&v, bytes_.data() + pos_, sizeof(U));
    pos_ += sizeof(U);
    return v;
  }

  std::uint32_t be32(const char* field) {
    need(4, field);
    const auto* p = bytes_.data() + pos_;
    pos_ += 4;
    return (std::uint32_t{p[0]} << 24) | (std::uint32_t{p[1]} << 16) | (std::uint32_t{p[2]} << 8) | p[3];
  }

  std::span<const std::uint8_t> take(std::size_t n, const char* field) {
    need(n, field);
    auto s = bytes_.subspan(pos_, n);
    pos_ += n;
    return s;
  }

  void finish() const {
    if (pos_ != bytes_.size()) {
      throw FormatError(what_ + ": " + std::to_string(bytes_.size() - pos_) + " trailing bytes", pos_);
    }
  }

  std::size_t pos() const noexcept { return pos_; }

 private:
  void need(std::size_t n, const char* field) const {
    if (bytes_.size() - pos_ < n) {
      throw FormatError(what_ + ": truncated while reading " + field, bytes_.size());
    }
  }

  std::span<const std::uint8_t> bytes_;
  std::string what_;
  std::size_t pos_ = 0;
};

}  // namespace

void write_synthetic(const std::filesystem::path& path, const Dataset& data) {
  data.validate();
  if (data.class_count > 256) throw ConfigError("data", "synthetic format stores labels in one byte");
  std::vector<std::uint8_t> out(kSynMagic.begin(), kSynMagic.end());
  put<std::uint64_t>(out, data.size());
  put<std::uint32_t>(out, static_cast<std::uint32_t>(data.class_count));
  put<std::uint32_t>(out, static_cast<std::uint32_t>(data.sample_shape.size()));
  for (auto d : data.sample_shape) put<std::uint64_t>(out, d);
  for (double v : data.features) put<double>(out, v);
  for (int y : data.labels) out.push_back(static_cast<std::uint8_t>(y));
  write_bytes(path, out);
}

Dataset read_synthetic(const std::filesystem::path& path) {
  const auto bytes = read_bytes(path);
  Reader r(bytes, path.string());
  auto magic = r.take(kSynMagic.size(), "magic");
  if (!std::equal(magic.begin(), magic.end(), kSynMagic.begin())) throw FormatError("bad synthetic magic", 0);
  Dataset data;
  const auto n = r.native<std::uint64_t>("sample count");
  data.class_count = r.native<std::uint32_t>("class count");
  const auto rank = r.native<std::uint32_t>("rank");
  for (std::uint32_t i = 0; i < rank; ++i) data.sample_shape.push_back(r.native<std::uint64_t>("dimension"));
  const std::size_t d = shape_size(data.sample_shape);
  if (rank == 0 || d == 0) throw FormatError("empty sample shape", r.pos());
  if (n > bytes.size() || d > bytes.size()) throw FormatError("sample count exceeds file size", r.pos());
  data.features.resize(n * d);
  for (auto& v : data.features) v = r.native<double>("features");
  auto labels = r.take(n, "labels");
  data.labels.assign(labels.begin(), labels.end());
  r.finish();
  data.validate();
  return data;
}

// ---------------------------------------------------------------------------

Normalization Normalization::preset(const std::string& name) {
  if (name == "none") return none();
  if (name == "mnist") return mnist();
  if (name == "cifar") return cifar();
  throw ConfigError("data.normalization", "unknown preset '" + name + "' (none, mnist, cifar)");
}

Dataset parse_idx(std::span<const std::uint8_t> images, std::span<const std::uint8_t> labels,
                  const Normalization& norm, std::size_t class_count) {
  Reader ri(images, "IDX images");
  if (const auto m = ri.be32("magic"); m != kIdxImageMagic) {
    throw FormatError("IDX images: bad magic " + std::to_string(m), 0);
  }
  const std::size_t count = ri.be32("image count");
  const std::size_t rows = ri.be32("row count");
  const std::size_t cols = ri.be32("column count");
  if (rows == 0 || cols == 0) throw FormatError("IDX images: zero image dimension", 8);

  Reader rl(labels, "IDX labels");
  if (const auto m = rl.be32("magic"); m != kIdxLabelMagic) {
    throw FormatError("IDX labels: bad magic " + std::to_string(m), 0);
  }
  const std::size_t lcount = rl.be32("label count");
  if (lcount != count) {
    throw FormatError("IDX count mismatch: " + std::to_string(count) + " images vs " + std::to_string(lcount) +
                          " labels",
                      4);
  }

  const std::size_t channels = norm.mean.size();
  if (channels == 0 || norm.std.size() != channels) throw ConfigError("data.normalization", "mean/std size mismatch");
  if (channels != 1) throw ConfigError("data.normalization", "IDX images are single-channel");
  if (!(norm.std[0] > 0)) throw ConfigError("data.normalization", "std must be positive");

  Dataset out{{1, rows, cols}, {}, {}, class_count};
  const std::size_t pixels = rows * cols;
  if (count != 0 && pixels > images.size()) throw FormatError("IDX images: truncated pixel data", images.size());
  auto px = ri.take(count * pixels, "pixel data");
  ri.finish();
  auto lb = rl.take(count, "label data");
  rl.finish();

  out.features.resize(count * pixels);
  for (std::size_t i = 0; i < px.size(); ++i) out.features[i] = (px[i] / 255.0 - norm.mean[0]) / norm.std[0];
  out.labels.resize(count);
  for (std::size_t i = 0; i < count; ++i) {
    if (lb[i] >= class_count) throw FormatError("IDX labels: label out of range", 8 + i);
    out.labels[i] = lb[i];
  }
  return out;
}

Dataset load_idx(const std::filesystem::path& images, const std::filesystem::path& labels,
                 const Normalization& norm, std::size_t class_count) {
  return parse_idx(read_bytes(images), read_bytes(labels), norm, class_count);
}

namespace {
void put_be32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  out.push_back(static_cast<std::uint8_t>(v >> 24));
  out.push_back(static_cast<std::uint8_t>(v >> 16));
  out.push_back(static_cast<std::uint8_t>(v >> 8));
  out.push_back(static_cast<std::uint8_t>(v));
}
}  // namespace

std::vector<std::uint8_t> encode_idx_images(std::size_t count, std::size_t rows, std::size_t cols,
                                            std::span<const std::uint8_t> pixels) {
  if (pixels.size() != count * rows * cols) throw StructuralError("pixel count does not match IDX header");
  std::vector<std::uint8_t> out;
  put_be32(out, kIdxImageMagic);
  put_be32(out, static_cast<std::uint32_t>(count));
  put_be32(out, static_cast<std::uint32_t>(rows));
  put_be32(out, static_cast<std::uint32_t>(cols));
  out.insert(out.end(), pixels.begin(), pixels.end());
  return out;
}

std::vector<std::uint8_t> encode_idx_labels(std::span<const std::uint8_t> labels) {
  std::vector<std::uint8_t> out;
  put_be32(out, kIdxLabelMagic);
  put_be32(out, static_cast<std::uint32_t>(labels.size()));
  out.insert(out.end(), labels.begin(), labels.end());
  return out;
}

void write_bytes(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw Error("cannot open " + path.string() + " for writing");
  f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw Error("write failed: " + path.string());
}

std::vector<std::uint8_t> read_bytes(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw Error("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

// ---------------------------------------------------------------------------

std::size_t preferred_client(int label, std::size_t class_count, std::size_t clients) {
  const auto y = static_cast<std::size_t>(label);
  if (clients == 2) return y * 2 / class_count;
  return y % clients;
}

std::vector<std::size_t> label_skew_assignment(const Dataset& data, const PartitionPlan& plan) {
  if (plan.clients == 0) throw ConfigError("partition.clients", "need at least one client");
  if (!(plan.p >= 0.5 && plan.p <= 1.0)) {
    throw ConfigError("partition.p", "assignment probability must lie in [0.5, 1], got " + std::to_string(plan.p));
  }
  std::mt19937_64 rng(plan.seed);
  std::uniform_real_distribution<double> coin(0.0, 1.0);
  std::vector<std::size_t> out(data.size());
  for (std::size_t i = 0; i < data.size(); ++i) {
    const std::size_t pref = preferred_client(data.labels[i], data.class_count, plan.clients);
    const double u = coin(rng);
    if (plan.clients == 1 || u < plan.p) {
      out[i] = pref;
    } else {
      std::uniform_int_distribution<std::size_t> other(0, plan.clients - 2);
      const std::size_t j = other(rng);
      out[i] = j >= pref ? j + 1 : j;
    }
  }
  return out;
}

std::vector<Dataset> partition_label_skew(const Dataset& data, const PartitionPlan& plan) {
  const auto assign = label_skew_assignment(data, plan);
  std::vector<std::vector<std::size_t>> idx(plan.clients);
  for (std::size_t i = 0; i < assign.size(); ++i) idx[assign[i]].push_back(i);
  std::vector<Dataset> out;
  out.reserve(plan.clients);
  for (const auto& v : idx) out.push_back(data.subset(v));
  return out;
}

std::vector<Rational> client_weights(const std::vector<Dataset>& clients) {
  std::int64_t total = 0;
  for (const auto& c : clients) total += static_cast<std::int64_t>(c.size());
  if (total == 0) throw ConfigError("partition", "all client datasets are empty");
  std::vector<Rational> out;
  for (const auto& c : clients) out.emplace_back(static_cast<std::int64_t>(c.size()), total);
  return out;
}

std::vector<FoldSplit> make_folds(std::size_t samples, std::size_t folds, std::uint64_t seed) {
  if (folds < 2) throw ConfigError("folds", "cross validation needs at least two folds");
  if (samples < folds) throw ConfigError("folds", "more folds than samples");
  auto order = iota_indices(samples);
  std::mt19937_64 rng(seed);
  std::shuffle(order.begin(), order.end(), rng);
  std::vector<FoldSplit> out(folds);
  for (std::size_t f = 0; f < folds; ++f) {
    const std::size_t lo = samples * f / folds, hi = samples * (f + 1) / folds;
    for (std::size_t i = 0; i < samples; ++i) {
      (i >= lo && i < hi ? out[f].test : out[f].train).push_back(order[i]);
    }
  }
  return out;
}

// ---------------------------------------------------------------------------

BatchSampler::BatchSampler(std::size_t samples, std::size_t batch_size, std::uint64_t seed)
    : order_(iota_indices(samples)), batch_(batch_size), seed_(seed) {
  if (samples == 0) throw ConfigError("data", "cannot sample batches from an empty dataset");
  if (batch_size == 0) throw ConfigError("batch_size", "batch size must be positive");
  reshuffle();
}

void BatchSampler::reshuffle() {
  std::iota(order_.begin(), order_.end(), std::size_t{0});
  std::mt19937_64 rng(derive_seed(seed_, 0xba7c4, epoch_));
  std::shuffle(order_.begin(), order_.end(), rng);
  pos_ = 0;
}

std::vector<std::size_t> BatchSampler::next() {
  std::vector<std::size_t> out;
  out.reserve(batch_);
  while (out.size() < batch_) {
    if (pos_ == order_.size()) {
      ++epoch_;
      reshuffle();
    }
    out.push_back(order_[pos_++]);
  }
  return out;
}

template <typename T>
Tensor<T> gather_batch(const Dataset& data, std::span<const std::size_t> indices, const Shape& shape) {
  if (shape_size(shape) != data.sample_size()) {
    throw StructuralError("dataset samples of shape " + shape_string(data.sample_shape) + " cannot feed input " +
                          shape_string(shape));
  }
  Shape full{indices.size()};
  full.insert(full.end(), shape.begin(), shape.end());
  std::vector<T> buf;
  buf.reserve(indices.size() * data.sample_size());
  for (auto i : indices) {
    if (i >= data.size()) throw StructuralError("batch index out of range");
    for (double v : data.sample(i)) buf.push_back(static_cast<T>(v));
  }
  return Tensor<T>(std::move(full), std::move(buf));
}

std::vector<int> gather_labels(const Dataset& data, std::span<const std::size_t> indices) {
  std::vector<int> out;
  out.reserve(indices.size());
  for (auto i : indices) out.push_back(data.labels.at(i));
  return out;
}

std::vector<std::size_t> iota_indices(std::size_t n) {
  std::vector<std::size_t> v(n);
  std::iota(v.begin(), v.end(), std::size_t{0});
  return v;
}

template Tensor<float> gather_batch<float>(const Dataset&, std::span<const std::size_t>, const Shape&);
template Tensor<double> gather_batch<double>(const Dataset&, std::span<const std::size_t>, const Shape&);

}  // namespace bnfl
