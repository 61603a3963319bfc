#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "statdistill/tensor.hpp"

namespace sdt {

enum class Split { train, test };
std::string to_string(Split s);

struct AugmentSpec {
  int pad = 4;
  bool random_crop = true;
  bool horizontal_flip = true;
  std::uint64_t seed = 0;

  bool operator==(const AugmentSpec&) const = default;
};

/// Crop offsets (each in [0, 2*pad]) and flip bit for one sample.
struct AugmentDraw {
  int dy = 0;
  int dx = 0;
  bool flip = false;
};

/// Pure function of (spec, epoch, sample index).
AugmentDraw augment_draw(const AugmentSpec& spec, int epoch, std::size_t index);

/// Images are stored as float in [0,1], layout [N,3,H,W].
struct DatasetHandle {
  Split split = Split::train;
  int num_classes = 0;
  std::size_t channels = 3;
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<float> images;
  std::vector<int> labels;
  /// Ignored for the test split.
  std::optional<AugmentSpec> augment;

  std::size_t size() const { return labels.size(); }
  std::size_t sample_size() const { return channels * height * width; }
  std::span<const float> sample(std::size_t i) const {
    return std::span<const float>(images).subspan(i * sample_size(), sample_size());
  }
  /// Throws InputError when labels or sizes are inconsistent.
  void validate() const;
};

struct SyntheticSpec {
  int num_classes = 4;
  int n_per_class = 150;
  int size = 16;
  double noise = 0.15;  // per-pixel noise standard deviation
  std::uint64_t seed = 0;

  bool operator==(const SyntheticSpec&) const = default;
};

/// Class templates are sums of a few random low-frequency cosines per
/// channel; samples add Gaussian noise and a random contrast jitter. The
/// first 80% of each class goes to train, the rest to test.
std::pair<DatasetHandle, DatasetHandle> make_synthetic(const SyntheticSpec& spec);
std::pair<DatasetHandle, DatasetHandle> make_synthetic(int num_classes, int n_per_class, int size,
                                                        std::uint64_t seed);

/// Noise-free class templates, [num_classes, 3, size, size].
std::vector<float> synthetic_templates(const SyntheticSpec& spec);

enum class CifarVariant { cifar10, cifar100 };

/// Parses one CIFAR binary file (1 label byte + 3072 pixels per record for
/// cifar10; coarse + fine label bytes for cifar100, fine label used).
/// Truncation throws FormatError naming the record index.
DatasetHandle read_cifar_file(const std::filesystem::path& path, CifarVariant variant, Split split);

/// Loads a CIFAR binary directory. The variant is detected from the file
/// names (data_batch_*.bin / test_batch.bin or train.bin / test.bin).
/// classes_subset remaps the listed labels to 0..n-1 and drops the rest;
/// downscale average-pools by an integer factor.
DatasetHandle load_cifar_binary(const std::filesystem::path& dir, Split split,
                                const std::optional<std::vector<int>>& classes_subset = std::nullopt,
                                int downscale = 1);

/// Keeps only the listed classes, relabelled by their position in the list.
DatasetHandle subset_classes(const DatasetHandle& data, std::span<const int> classes);
/// Integer-factor average pooling of every image.
DatasetHandle downscale(const DatasetHandle& data, int factor);

/// Sample order for an epoch: identity for epoch < 0, otherwise a shuffle
/// determined by (seed, epoch).
std::vector<std::size_t> epoch_order(std::size_t n, std::uint64_t seed, int epoch);

/// Gathers the given samples into a [B,3,H,W] tensor; train-split datasets
/// with an AugmentSpec are augmented (zero padding, crop, flip).
template <typename T>
Tensor<T> gather_images(const DatasetHandle& data, std::span<const std::size_t> indices, int epoch);

std::vector<int> gather_labels(const DatasetHandle& data, std::span<const std::size_t> indices);

/// Splits [0, n) into consecutive batches of at most batch_size (the last
/// may be shorter).
std::vector<std::pair<std::size_t, std::size_t>> batch_ranges(std::size_t n, std::size_t batch_size);

}  // namespace sdt
