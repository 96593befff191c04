#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include <boost/rational.hpp>

#include "bnfl/tensor.hpp"

namespace bnfl {

using Rational = boost::rational<std::int64_t>;

/// Samples stored as doubles in row-major order, one `sample_shape` block each.
struct Dataset {
  Shape sample_shape;
  std::vector<double> features;
  std::vector<int> labels;
  std::size_t class_count = 0;

  std::size_t size() const noexcept { return labels.size(); }
  std::size_t sample_size() const noexcept { return shape_size(sample_shape); }
  std::span<const double> sample(std::size_t i) const {
    return {features.data() + i * sample_size(), sample_size()};
  }

  /// Throws StructuralError if labels are out of range, features are
  /// non-finite, or the feature count disagrees with the sample count.
  void validate() const;
  Dataset subset(std::span<const std::size_t> indices) const;
  std::vector<std::size_t> class_histogram() const;
};

/// splitmix64 step; derives independent stream seeds from one master seed.
std::uint64_t splitmix64(std::uint64_t x) noexcept;
std::uint64_t derive_seed(std::uint64_t master, std::uint64_t stream, std::uint64_t index = 0) noexcept;

// ---------------------------------------------------------------------------
// Synthetic data

struct SyntheticSpec {
  std::size_t classes = 10;
  std::size_t samples_per_class = 400;
  std::size_t dims = 32;
  double cluster_spread = 1.0;
  /// Distance of each class mean from the centroid of the simplex.
  double scale = 1.0;
  /// Added to every coordinate of the upper half of the classes.
  double group_shift = 0.0;
  std::uint64_t seed = 0;
};

/// Isotropic Gaussian clusters around the given means, samples ordered by class.
Dataset gaussian_clusters(const std::vector<std::vector<double>>& means, std::size_t samples_per_class,
                          double spread, std::uint64_t seed);

/// Gaussian clusters centred on the vertices of a scaled simplex (requires dims >= classes).
Dataset gen_synthetic(const SyntheticSpec& spec);

void write_synthetic(const std::filesystem::path& path, const Dataset& data);
Dataset read_synthetic(const std::filesystem::path& path);

// ---------------------------------------------------------------------------
// IDX

struct Normalization {
  std::vector<double> mean;  // one entry, or one per channel
  std::vector<double> std;

  static Normalization none() { return {{0.0}, {1.0}}; }
  static Normalization mnist() { return {{0.1307}, {0.3081}}; }
  /// 0-255 channel constants rescaled to [0, 1].
  static Normalization cifar() {
    return {{125.3 / 255, 123.0 / 255, 113.9 / 255}, {63.0 / 255, 62.1 / 255, 66.7 / 255}};
  }
  static Normalization preset(const std::string& name);
};

inline constexpr std::uint32_t kIdxImageMagic = 0x00000803;
inline constexpr std::uint32_t kIdxLabelMagic = 0x00000801;

/// Parses an IDX image/label pair held in memory. Samples get shape [1, rows, cols].
Dataset parse_idx(std::span<const std::uint8_t> images, std::span<const std::uint8_t> labels,
                  const Normalization& norm, std::size_t class_count = 10);
Dataset load_idx(const std::filesystem::path& images, const std::filesystem::path& labels,
                 const Normalization& norm, std::size_t class_count = 10);

std::vector<std::uint8_t> encode_idx_images(std::size_t count, std::size_t rows, std::size_t cols,
                                            std::span<const std::uint8_t> pixels);
std::vector<std::uint8_t> encode_idx_labels(std::span<const std::uint8_t> labels);
void write_bytes(const std::filesystem::path& path, std::span<const std::uint8_t> bytes);
std::vector<std::uint8_t> read_bytes(const std::filesystem::path& path);

// ---------------------------------------------------------------------------
// Partitioning

struct PartitionPlan {
  std::size_t clients = 2;
  double p = 0.5;
  std::uint64_t seed = 0;
};

/// Client each class prefers: halves of the label range for two clients,
/// round-robin otherwise.
std::size_t preferred_client(int label, std::size_t class_count, std::size_t clients);

/// Client index for every sample.
std::vector<std::size_t> label_skew_assignment(const Dataset& data, const PartitionPlan& plan);
std::vector<Dataset> partition_label_skew(const Dataset& data, const PartitionPlan& plan);

/// |D_i| / sum_j |D_j|, exactly.
std::vector<Rational> client_weights(const std::vector<Dataset>& clients);

struct FoldSplit {
  std::vector<std::size_t> train;
  std::vector<std::size_t> test;
};

/// Contiguous blocks after one seeded shuffle. folds >= 2.
std::vector<FoldSplit> make_folds(std::size_t samples, std::size_t folds, std::uint64_t seed);

// ---------------------------------------------------------------------------
// Batching

/// Shuffled epochs without replacement; a batch that crosses an epoch boundary
/// continues into the next shuffle. Copyable so a caller can look ahead.
class BatchSampler {
 public:
  BatchSampler(std::size_t samples, std::size_t batch_size, std::uint64_t seed);

  std::vector<std::size_t> next();
  std::size_t batch_size() const noexcept { return batch_; }
  std::size_t samples() const noexcept { return order_.size(); }
  std::size_t epoch() const noexcept { return epoch_; }

 private:
  void reshuffle();

  std::vector<std::size_t> order_;
  std::size_t batch_;
  std::size_t pos_ = 0;
  std::size_t epoch_ = 0;
  std::uint64_t seed_;
};

/// Copies the selected samples into a [n, ...shape] tensor; `shape` must hold
/// the same number of elements as the dataset's sample shape.
template <typename T>
Tensor<T> gather_batch(const Dataset& data, std::span<const std::size_t> indices, const Shape& shape);

std::vector<int> gather_labels(const Dataset& data, std::span<const std::size_t> indices);

std::vector<std::size_t> iota_indices(std::size_t n);

}  // namespace bnfl
