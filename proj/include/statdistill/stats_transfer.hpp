#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "statdistill/hooks.hpp"
#include "statdistill/tensor.hpp"

namespace sdt {

/// Stabilizer inside the square root of the channel standard deviation.
inline constexpr double kStatsEps = 1e-5;

/// Per-sample, per-channel spatial mean and standard deviation.
template <typename T>
struct FeatureStats {
  Tensor<T> mu;     // [N,C]
  Tensor<T> sigma;  // [N,C], sqrt(biased variance + eps)
  double eps = kStatsEps;

  FeatureStats detach() const { return {mu.detach(), sigma.detach(), eps}; }
};

/// mu = spatial mean, sigma = sqrt(biased spatial variance + eps).
/// Differentiable with respect to `feature`.
template <typename T>
FeatureStats<T> channel_stats(const Tensor<T>& feature, double eps = kStatsEps);

/// (1/C) * sum_c (mu_T - mu_S)^2 + (sigma_T - sigma_S)^2, averaged over the
/// batch. Teacher statistics are detached; gradient reaches the student side
/// only.
template <typename T>
Tensor<T> loss_sm_pair(const FeatureStats<T>& teacher, const FeatureStats<T>& student);

/// Trainable 1x1 convolution (with bias) that maps student channels onto the
/// teacher's channel count.
template <typename T>
class ChannelAdapter {
 public:
  ChannelAdapter() = default;
  ChannelAdapter(std::size_t in_channels, std::size_t out_channels, std::uint64_t seed);

  Tensor<T> apply(const Tensor<T>& student_feature) const;

  std::size_t in_channels() const { return weight_.dim(1); }
  std::size_t out_channels() const { return weight_.dim(0); }
  Tensor<T>& weight() { return weight_; }
  Tensor<T>& bias() { return bias_; }
  const Tensor<T>& weight() const { return weight_; }
  const Tensor<T>& bias() const { return bias_; }

 private:
  Tensor<T> weight_;  // [Cout, Cin, 1, 1]
  Tensor<T> bias_;    // [Cout]
};

/// Which hook of the teacher pairs with which hook of the student, and the
/// adapter applied to the student map (null when channels already agree).
template <typename T>
struct PairSpec {
  HookId teacher_hook = HookId::conv4;
  HookId student_hook = HookId::conv4;
  const ChannelAdapter<T>* adapter = nullptr;
};

template <typename T>
struct FeaturePair {
  Tensor<T> teacher;
  Tensor<T> student;
  PairSpec<T> spec;
};

/// Student map after the pair's adapter; checks that it matches the teacher
/// map on C, H and W.
template <typename T>
Tensor<T> adapt_student(const FeaturePair<T>& pair);

/// Sum over pairs of loss_sm_pair on (teacher, adapted student) statistics.
template <typename T>
Tensor<T> loss_sm_total(std::span<const FeaturePair<T>> pairs, double eps = kStatsEps);

/// Re-normalizes `content` per sample and channel to the style statistics:
///   out = style.sigma * (content - mu_c) / sigma_c + style.mu
/// with the content statistics computed using the same eps. Evaluated as a
/// per-channel affine map so that style == channel_stats(content) is an
/// exact identity.
template <typename T>
Tensor<T> adain(const Tensor<T>& content, const FeatureStats<T>& style, double eps = kStatsEps);

/// mse(p, q) with p detached.
template <typename T>
Tensor<T> loss_adain(const Tensor<T>& p, const Tensor<T>& q);

}  // namespace sdt
