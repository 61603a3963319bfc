#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "statdistill/checkpoint.hpp"
#include "statdistill/hooks.hpp"
#include "statdistill/ops.hpp"
#include "statdistill/tensor.hpp"

namespace sdt {

/// Wide residual network WRN-depth-width. Groups conv2/conv3/conv4 hold
/// (depth - 4) / 6 pre-activation blocks each, with base_channels * width *
/// {1, 2, 4} channels and strides {1, 2, 2}.
struct WrnConfig {
  int depth = 16;
  int width = 1;
  int base_channels = 16;
  int num_classes = 10;
  int input_size = 32;

  int blocks_per_group() const { return (depth - 4) / 6; }
  std::size_t group_channels(HookId hook) const;
  std::size_t group_side(HookId hook) const;
  /// Throws ConfigError naming every invalid field.
  void validate() const;
  std::string name() const;

  bool operator==(const WrnConfig&) const = default;
};

/// Desk-scale presets: teacher WRN-16-2 and student WRN-10-1, base 8, 16x16.
WrnConfig teacher_preset(int num_classes);
WrnConfig student_preset(int num_classes);

/// Closed-form count of trainable parameters.
std::size_t wrn_parameter_count(const WrnConfig& config);

template <typename T>
struct Parameter {
  std::string name;
  Tensor<T> tensor;
  bool weight_decay = true;
};

template <typename T>
struct ConvLayer {
  Tensor<T> weight;
  std::size_t stride = 1;
  std::size_t padding = 0;
  Tensor<T> forward(const Tensor<T>& x) const { return conv2d(x, weight, Tensor<T>{}, stride, padding); }
};

template <typename T>
struct BatchNormLayer {
  Tensor<T> gamma;
  Tensor<T> beta;
  RunningStats<T> stats;
  Tensor<T> forward(const Tensor<T>& x, BatchNormMode mode) {
    return batchnorm2d(x, gamma, beta, stats, mode, kMomentum, kEps);
  }
  static constexpr double kMomentum = 0.1;
  static constexpr double kEps = 1e-5;
};

template <typename T>
struct ResidualBlock {
  BatchNormLayer<T> bn1;
  ConvLayer<T> conv1;
  BatchNormLayer<T> bn2;
  ConvLayer<T> conv2;
  std::optional<ConvLayer<T>> shortcut;  // 1x1 projection when the shape changes
};

template <typename T>
class WideResNet {
 public:
  /// Called at each group output; returns the tensor that continues forward.
  using HookFn = std::function<Tensor<T>(HookId, const Tensor<T>&)>;

  WideResNet(const WrnConfig& config, std::uint64_t seed);

  WideResNet(WideResNet&&) noexcept = default;
  WideResNet& operator=(WideResNet&&) noexcept = default;
  WideResNet(const WideResNet&) = delete;
  WideResNet& operator=(const WideResNet&) = delete;

  /// Deep copy, including hooks and mode flags (captures are dropped).
  WideResNet clone() const;
  template <typename U>
  WideResNet<U> cast() const;

  const WrnConfig& config() const { return config_; }

  /// Logits [N, num_classes]. With capture, every registered hook stores its
  /// group output.
  Tensor<T> forward(const Tensor<T>& x, bool capture = false);
  /// Runs the network with `at_hook` applied at every group output.
  Tensor<T> forward_with(const Tensor<T>& x, const HookFn& at_hook);
  /// Executes only the layers after `hook`, starting from `injected`.
  /// Requires a frozen model and a registered hook.
  Tensor<T> forward_from(HookId hook, const Tensor<T>& injected);

  void register_hook(HookId hook);
  bool has_hook(HookId hook) const { return registered_[index(hook)]; }
  /// Last captured group output; throws UsageError if missing.
  const Tensor<T>& captured(HookId hook) const;
  void clear_captures();

  void set_training(bool on) { training_ = on; }
  bool training() const { return training_ && !frozen_; }
  BatchNormMode bn_mode() const { return training() ? BatchNormMode::train : BatchNormMode::eval; }

  /// Clears requires_grad on every parameter and pins batch norm to eval.
  void freeze();
  bool frozen() const { return frozen_; }

  std::vector<Parameter<T>> parameters() const;
  std::size_t parameter_count() const;
  /// Visits every persistent tensor (parameters, then running statistics)
  /// in checkpoint order.
  void visit_state(const std::function<void(const std::string&, Tensor<T>&)>& fn);
  void visit_state(const std::function<void(const std::string&, const Tensor<T>&)>& fn) const;

  std::vector<NamedTensor> state() const;
  /// Throws FormatError listing missing names, unexpected names, and shape
  /// mismatches.
  void load_state(std::span<const NamedTensor> entries, bool allow_extra = false);
  void save(const std::filesystem::path& path) const;
  void load(const std::filesystem::path& path);

 private:
  static std::size_t index(HookId hook) { return static_cast<std::size_t>(hook); }
  Tensor<T> run_stem(const Tensor<T>& x) const;
  Tensor<T> run_group(std::size_t group, const Tensor<T>& x);
  Tensor<T> run_head(const Tensor<T>& x);
  Tensor<T> run_block(ResidualBlock<T>& block, const Tensor<T>& x);
  void check_feature(HookId hook, const Tensor<T>& feature) const;

  WrnConfig config_;
  ConvLayer<T> stem_;
  std::array<std::vector<ResidualBlock<T>>, 3> groups_;
  BatchNormLayer<T> final_bn_;
  Tensor<T> fc_weight_;
  Tensor<T> fc_bias_;

  std::array<bool, 3> registered_{};
  std::array<Tensor<T>, 3> captured_{};
  bool training_ = true;
  bool frozen_ = false;
};

template <typename T>
WideResNet<T> build_wrn(const WrnConfig& config, std::uint64_t seed) {
  return WideResNet<T>(config, seed);
}

template <typename T>
template <typename U>
WideResNet<U> WideResNet<T>::cast() const {
  WideResNet<U> out(config_, 0);
  std::vector<const Tensor<T>*> src;
  visit_state([&](const std::string&, const Tensor<T>& t) { src.push_back(&t); });
  std::size_t i = 0;
  out.visit_state([&](const std::string&, Tensor<U>& t) {
    const auto from = src[i++]->values();
    auto to = t.mutable_values();
    for (std::size_t k = 0; k < to.size(); ++k) to[k] = static_cast<U>(from[k]);
  });
  for (auto hook : kAllHooks) {
    if (has_hook(hook)) out.register_hook(hook);
  }
  out.set_training(training_);
  if (frozen_) out.freeze();
  return out;
}

}  // namespace sdt
