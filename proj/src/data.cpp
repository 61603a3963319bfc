#include "statdistill/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iterator>
#include <numbers>
#include <random>

#include "statdistill/errors.hpp"

namespace sdt {

namespace {

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ull;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
  return x ^ (x >> 31);
}

std::uint64_t mix(std::uint64_t a, std::uint64_t b) { return splitmix64(a ^ splitmix64(b)); }

// Uniform double in [0,1) from the top 53 bits; avoids the
// implementation-defined std distributions so datasets match across
// standard libraries.
double unit(std::mt19937_64& rng) { return static_cast<double>(rng() >> 11) * 0x1.0p-53; }

double gaussian(std::mt19937_64& rng) {
  const double u1 = 1.0 - unit(rng);
  const double u2 = unit(rng);
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

}  // namespace

std::string to_string(Split s) { return s == Split::train ? "train" : "test"; }

AugmentDraw augment_draw(const AugmentSpec& spec, int epoch, std::size_t index) {
  const std::uint64_t h = mix(mix(spec.seed, static_cast<std::uint64_t>(static_cast<std::int64_t>(epoch))), index);
  AugmentDraw d;
  if (spec.random_crop && spec.pad > 0) {
    const auto span = static_cast<std::uint64_t>(2 * spec.pad + 1);
    d.dy = static_cast<int>((h & 0xFFFF) % span);
    d.dx = static_cast<int>(((h >> 16) & 0xFFFF) % span);
  } else {
    d.dy = d.dx = std::max(spec.pad, 0);
  }
  d.flip = spec.horizontal_flip && ((h >> 63) & 1u);
  return d;
}

void DatasetHandle::validate() const {
  if (num_classes < 1) throw InputError("dataset: num_classes must be >= 1");
  if (images.size() != labels.size() * sample_size()) {
    throw InputError("dataset: " + std::to_string(images.size()) + " pixel values for " +
                     std::to_string(labels.size()) + " samples of size " + std::to_string(sample_size()));
  }
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] < 0 || labels[i] >= num_classes) {
      throw InputError("dataset: label " + std::to_string(labels[i]) + " of sample " + std::to_string(i) +
                       " outside [0, " + std::to_string(num_classes) + ")");
    }
  }
}

std::vector<float> synthetic_templates(const SyntheticSpec& spec) {
  const auto size = static_cast<std::size_t>(spec.size);
  const std::size_t plane = size * size;
  std::vector<float> out(static_cast<std::size_t>(spec.num_classes) * 3 * plane);
  std::mt19937_64 rng(mix(spec.seed, 0x7e3a'11d5ull));
  std::vector<double> buf(plane);
  for (int c = 0; c < spec.num_classes; ++c) {
    for (std::size_t ch = 0; ch < 3; ++ch) {
      std::fill(buf.begin(), buf.end(), 0.0);
      for (int term = 0; term < 3; ++term) {
        const double fy = std::floor(unit(rng) * 3.0);
        const double fx = std::floor(unit(rng) * 3.0);
        const double phase = 2.0 * std::numbers::pi * unit(rng);
        const double amp = 0.5 + unit(rng);
        for (std::size_t y = 0; y < size; ++y) {
          for (std::size_t x = 0; x < size; ++x) {
            const double arg = 2.0 * std::numbers::pi * (fy * static_cast<double>(y) + fx * static_cast<double>(x)) /
                               static_cast<double>(size);
            buf[y * size + x] += amp * std::cos(arg + phase);
          }
        }
      }
      const auto [lo, hi] = std::minmax_element(buf.begin(), buf.end());
      const double range = std::max(*hi - *lo, 1e-12);
      float* dst = out.data() + (static_cast<std::size_t>(c) * 3 + ch) * plane;
      for (std::size_t i = 0; i < plane; ++i) dst[i] = static_cast<float>(0.2 + 0.6 * (buf[i] - *lo) / range);
    }
  }
  return out;
}

std::pair<DatasetHandle, DatasetHandle> make_synthetic(const SyntheticSpec& spec) {
  if (spec.size < 8) throw InputError("make_synthetic: size must be >= 8");
  if (spec.num_classes < 2) throw InputError("make_synthetic: num_classes must be >= 2");
  if (spec.n_per_class < 2) throw InputError("make_synthetic: n_per_class must be >= 2");
  if (!(spec.noise >= 0.0)) throw InputError("make_synthetic: noise must be >= 0");

  const auto templates = synthetic_templates(spec);
  const auto size = static_cast<std::size_t>(spec.size);
  const std::size_t sample = 3 * size * size;
  const int n_train = std::max(1, (spec.n_per_class * 4) / 5);

  DatasetHandle train, test;
  for (auto* d : {&train, &test}) {
    d->num_classes = spec.num_classes;
    d->height = d->width = size;
  }
  train.split = Split::train;
  train.augment = AugmentSpec{};
  test.split = Split::test;

  std::mt19937_64 rng(mix(spec.seed, 0x5a3c'0b17ull));
  // Interleave classes so consecutive samples cover every label.
  for (int i = 0; i < spec.n_per_class; ++i) {
    for (int c = 0; c < spec.num_classes; ++c) {
      DatasetHandle& dst = i < n_train ? train : test;
      const float* tpl = templates.data() + static_cast<std::size_t>(c) * sample;
      const double contrast = 0.7 + 0.6 * unit(rng);
      for (std::size_t k = 0; k < sample; ++k) {
        double v = 0.5 + contrast * (tpl[k] - 0.5);
        if (spec.noise > 0.0) v += spec.noise * gaussian(rng);
        dst.images.push_back(static_cast<float>(std::clamp(v, 0.0, 1.0)));
      }
      dst.labels.push_back(c);
    }
  }
  return {std::move(train), std::move(test)};
}

std::pair<DatasetHandle, DatasetHandle> make_synthetic(int num_classes, int n_per_class, int size,
                                                        std::uint64_t seed) {
  SyntheticSpec spec;
  spec.num_classes = num_classes;
  spec.n_per_class = n_per_class;
  spec.size = size;
  spec.seed = seed;
  return make_synthetic(spec);
}

DatasetHandle read_cifar_file(const std::filesystem::path& path, CifarVariant variant, Split split) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FileError("cannot open CIFAR file " + path.string());
  const std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  const std::size_t label_bytes = variant == CifarVariant::cifar10 ? 1 : 2;
  constexpr std::size_t kPixels = 3 * 32 * 32;
  const std::size_t record = label_bytes + kPixels;
  if (bytes.size() % record != 0) {
    throw FormatError(path.string() + ": truncated record " + std::to_string(bytes.size() / record) + " (" +
                      std::to_string(bytes.size() % record) + " of " + std::to_string(record) + " bytes)");
  }
  DatasetHandle d;
  d.split = split;
  d.num_classes = variant == CifarVariant::cifar10 ? 10 : 100;
  d.height = d.width = 32;
  const std::size_t n = bytes.size() / record;
  d.images.resize(n * kPixels);
  d.labels.resize(n);
  for (std::size_t r = 0; r < n; ++r) {
    const unsigned char* rec = bytes.data() + r * record;
    const int label = rec[label_bytes - 1];
    if (label >= d.num_classes) {
      throw FormatError(path.string() + ": record " + std::to_string(r) + " has label " + std::to_string(label));
    }
    d.labels[r] = label;
    for (std::size_t k = 0; k < kPixels; ++k) d.images[r * kPixels + k] = static_cast<float>(rec[label_bytes + k]) / 255.0f;
  }
  if (split == Split::train) d.augment = AugmentSpec{};
  return d;
}

DatasetHandle subset_classes(const DatasetHandle& data, std::span<const int> classes) {
  std::vector<int> remap(static_cast<std::size_t>(data.num_classes), -1);
  for (std::size_t i = 0; i < classes.size(); ++i) {
    const int c = classes[i];
    if (c < 0 || c >= data.num_classes) throw InputError("class subset: " + std::to_string(c) + " is not a class");
    if (remap[static_cast<std::size_t>(c)] >= 0) throw InputError("class subset: " + std::to_string(c) + " repeated");
    remap[static_cast<std::size_t>(c)] = static_cast<int>(i);
  }
  DatasetHandle out = data;
  out.num_classes = static_cast<int>(classes.size());
  out.images.clear();
  out.labels.clear();
  for (std::size_t i = 0; i < data.size(); ++i) {
    const int to = remap[static_cast<std::size_t>(data.labels[i])];
    if (to < 0) continue;
    const auto px = data.sample(i);
    out.images.insert(out.images.end(), px.begin(), px.end());
    out.labels.push_back(to);
  }
  return out;
}

DatasetHandle downscale(const DatasetHandle& data, int factor) {
  if (factor < 1) throw InputError("downscale factor must be >= 1");
  if (factor == 1) return data;
  const auto f = static_cast<std::size_t>(factor);
  if (data.height % f != 0 || data.width % f != 0) {
    throw InputError("downscale factor " + std::to_string(factor) + " does not divide " +
                     std::to_string(data.height) + "x" + std::to_string(data.width));
  }
  DatasetHandle out = data;
  out.height = data.height / f;
  out.width = data.width / f;
  out.images.assign(data.size() * out.sample_size(), 0.0f);
  const double inv = 1.0 / static_cast<double>(f * f);
  for (std::size_t n = 0; n < data.size(); ++n) {
    for (std::size_t c = 0; c < data.channels; ++c) {
      const float* src = data.images.data() + (n * data.channels + c) * data.height * data.width;
      float* dst = out.images.data() + (n * data.channels + c) * out.height * out.width;
      for (std::size_t y = 0; y < out.height; ++y) {
        for (std::size_t x = 0; x < out.width; ++x) {
          double acc = 0.0;
          for (std::size_t i = 0; i < f; ++i) {
            for (std::size_t j = 0; j < f; ++j) acc += src[(y * f + i) * data.width + x * f + j];
          }
          dst[y * out.width + x] = static_cast<float>(acc * inv);
        }
      }
    }
  }
  return out;
}

DatasetHandle load_cifar_binary(const std::filesystem::path& dir, Split split,
                                const std::optional<std::vector<int>>& classes_subset, int downscale_factor) {
  namespace fs = std::filesystem;
  std::vector<fs::path> files;
  CifarVariant variant;
  if (fs::exists(dir / "data_batch_1.bin") || fs::exists(dir / "test_batch.bin")) {
    variant = CifarVariant::cifar10;
    if (split == Split::train) {
      for (int i = 1; i <= 5; ++i) files.push_back(dir / ("data_batch_" + std::to_string(i) + ".bin"));
    } else {
      files.push_back(dir / "test_batch.bin");
    }
  } else if (fs::exists(dir / "train.bin") || fs::exists(dir / "test.bin")) {
    variant = CifarVariant::cifar100;
    files.push_back(dir / (split == Split::train ? "train.bin" : "test.bin"));
  } else {
    throw FileError("no CIFAR binary files found in " + dir.string());
  }

  DatasetHandle out;
  for (const auto& f : files) {
    if (!fs::exists(f)) throw FileError("missing CIFAR file " + f.string());
    DatasetHandle part = read_cifar_file(f, variant, split);
    if (out.labels.empty()) {
      out = std::move(part);
    } else {
      out.images.insert(out.images.end(), part.images.begin(), part.images.end());
      out.labels.insert(out.labels.end(), part.labels.begin(), part.labels.end());
    }
  }
  if (classes_subset) out = subset_classes(out, *classes_subset);
  return downscale(out, downscale_factor);
}

std::vector<std::size_t> epoch_order(std::size_t n, std::uint64_t seed, int epoch) {
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  if (epoch < 0) return order;
  std::mt19937_64 rng(mix(seed, 0x3c6e'f372ull + static_cast<std::uint64_t>(epoch)));
  // Fisher-Yates with an explicit bounded draw for cross-library determinism.
  for (std::size_t i = n; i > 1; --i) {
    const std::size_t j = static_cast<std::size_t>(unit(rng) * static_cast<double>(i));
    std::swap(order[i - 1], order[std::min(j, i - 1)]);
  }
  return order;
}

template <typename T>
Tensor<T> gather_images(const DatasetHandle& data, std::span<const std::size_t> indices, int epoch) {
  const std::size_t C = data.channels, H = data.height, W = data.width;
  std::vector<T> values(indices.size() * C * H * W, T{0});
  const bool augment = data.split == Split::train && data.augment.has_value() && epoch >= 0;
  for (std::size_t b = 0; b < indices.size(); ++b) {
    const std::size_t idx = indices[b];
    if (idx >= data.size()) throw InputError("sample index " + std::to_string(idx) + " out of range");
    const auto src = data.sample(idx);
    T* dst = values.data() + b * C * H * W;
    if (!augment) {
      std::copy(src.begin(), src.end(), dst);
      continue;
    }
    const AugmentDraw d = augment_draw(*data.augment, epoch, idx);
    const int pad = std::max(data.augment->pad, 0);
    for (std::size_t c = 0; c < C; ++c) {
      for (std::size_t y = 0; y < H; ++y) {
        const long sy = static_cast<long>(y) + d.dy - pad;
        if (sy < 0 || sy >= static_cast<long>(H)) continue;
        for (std::size_t x = 0; x < W; ++x) {
          const std::size_t ox = d.flip ? W - 1 - x : x;
          const long sx = static_cast<long>(ox) + d.dx - pad;
          if (sx < 0 || sx >= static_cast<long>(W)) continue;
          dst[(c * H + y) * W + x] = src[(c * H + static_cast<std::size_t>(sy)) * W + static_cast<std::size_t>(sx)];
        }
      }
    }
  }
  return Tensor<T>(Shape{indices.size(), C, H, W}, std::move(values));
}

std::vector<int> gather_labels(const DatasetHandle& data, std::span<const std::size_t> indices) {
  std::vector<int> out;
  out.reserve(indices.size());
  for (auto i : indices) out.push_back(data.labels.at(i));
  return out;
}

std::vector<std::pair<std::size_t, std::size_t>> batch_ranges(std::size_t n, std::size_t batch_size) {
  if (batch_size == 0) throw UsageError("batch size must be positive");
  std::vector<std::pair<std::size_t, std::size_t>> out;
  for (std::size_t b = 0; b < n; b += batch_size) out.emplace_back(b, std::min(n, b + batch_size));
  return out;
}

template Tensor<float> gather_images(const DatasetHandle&, std::span<const std::size_t>, int);
template Tensor<double> gather_images(const DatasetHandle&, std::span<const std::size_t>, int);

}  // namespace sdt
