#include "statdistill/stats_transfer.hpp"

#include <cmath>
#include <random>

#include "statdistill/ops.hpp"

namespace sdt {

std::string to_string(HookId id) {
  switch (id) {
    case HookId::conv2:
      return "conv2";
    case HookId::conv3:
      return "conv3";
    case HookId::conv4:
      return "conv4";
  }
  return "unknown";
}

HookId parse_hook(std::string_view name) {
  if (name == "conv2") return HookId::conv2;
  if (name == "conv3") return HookId::conv3;
  if (name == "conv4") return HookId::conv4;
  throw ConfigError("unknown hook point '" + std::string(name) + "' (expected conv2, conv3 or conv4)");
}

template <typename T>
FeatureStats<T> channel_stats(const Tensor<T>& feature, double eps) {
  if (feature.rank() != 4) {
    throw DimensionError("channel_stats: expected a rank-4 feature map, got " + shape_str(feature.shape()));
  }
  if (!(eps > 0.0)) throw UsageError("channel_stats: eps must be positive");
  return {channel_mean(feature), channel_std(feature, eps), eps};
}

template <typename T>
Tensor<T> loss_sm_pair(const FeatureStats<T>& teacher, const FeatureStats<T>& student) {
  for (std::size_t axis = 0; axis < 2; ++axis) {
    if (teacher.mu.rank() != 2 || student.mu.rank() != 2 || teacher.mu.dim(axis) != student.mu.dim(axis)) {
      throw DimensionError("loss_sm_pair: statistics differ on axis " + std::to_string(axis) + " (" +
                           shape_str(teacher.mu.shape()) + " vs " + shape_str(student.mu.shape()) + ")");
    }
  }
  const double channels = static_cast<double>(student.mu.dim(1));
  const auto t = teacher.detach();
  return scale(add(mse(student.mu, t.mu), mse(student.sigma, t.sigma)), 1.0 / channels);
}

template <typename T>
ChannelAdapter<T>::ChannelAdapter(std::size_t in_channels, std::size_t out_channels, std::uint64_t seed)
    : weight_(Shape{out_channels, in_channels, 1, 1}), bias_(Shape{out_channels}) {
  std::mt19937_64 rng(seed);
  const double bound = std::sqrt(6.0 / static_cast<double>(in_channels));
  std::uniform_real_distribution<double> dist(-bound, bound);
  for (auto& w : weight_.mutable_values()) w = static_cast<T>(dist(rng));
  weight_.set_requires_grad(true);
  bias_.set_requires_grad(true);
}

template <typename T>
Tensor<T> ChannelAdapter<T>::apply(const Tensor<T>& student_feature) const {
  return conv2d(student_feature, weight_, bias_, 1, 0);
}

template <typename T>
Tensor<T> adapt_student(const FeaturePair<T>& pair) {
  Tensor<T> s = pair.spec.adapter ? pair.spec.adapter->apply(pair.student) : pair.student;
  if (s.rank() != 4 || pair.teacher.rank() != 4) throw DimensionError("feature pair: maps must be rank 4");
  for (std::size_t axis = 0; axis < 4; ++axis) {
    if (s.dim(axis) != pair.teacher.dim(axis)) {
      throw DimensionError("feature pair " + to_string(pair.spec.teacher_hook) + "/" +
                           to_string(pair.spec.student_hook) + ": axis " + std::to_string(axis) + " differs (teacher " +
                           std::to_string(pair.teacher.dim(axis)) + ", student " + std::to_string(s.dim(axis)) + ")");
    }
  }
  return s;
}

template <typename T>
Tensor<T> loss_sm_total(std::span<const FeaturePair<T>> pairs, double eps) {
  if (pairs.empty()) throw UsageError("loss_sm_total: at least one feature pair is required");
  Tensor<T> total;
  for (const auto& pair : pairs) {
    const auto student = channel_stats(adapt_student(pair), eps);
    const auto teacher = channel_stats(pair.teacher.detach(), eps);
    Tensor<T> term = loss_sm_pair(teacher, student);
    total = total.defined() ? add(total, term) : term;
  }
  return total;
}

template <typename T>
Tensor<T> adain(const Tensor<T>& content, const FeatureStats<T>& style, double eps) {
  if (content.rank() != 4) throw DimensionError("adain: content must be rank 4, got " + shape_str(content.shape()));
  for (std::size_t axis = 0; axis < 2; ++axis) {
    if (style.mu.rank() != 2 || style.mu.dim(axis) != content.dim(axis) || style.sigma.rank() != 2 ||
        style.sigma.dim(axis) != content.dim(axis)) {
      throw DimensionError("adain: style statistics axis " + std::to_string(axis) + " does not match content " +
                           shape_str(content.shape()));
    }
  }
  const auto own = channel_stats(content, eps);
  const Tensor<T> gain = div(style.sigma, own.sigma);
  const Tensor<T> shift = sub(style.mu, mul(own.mu, gain));
  return channel_affine(content, gain, shift);
}

template <typename T>
Tensor<T> loss_adain(const Tensor<T>& p, const Tensor<T>& q) {
  return mse(p.detach(), q);
}

#define SDT_INSTANTIATE(T)                                                                  \
  template FeatureStats<T> channel_stats(const Tensor<T>&, double);                         \
  template Tensor<T> loss_sm_pair(const FeatureStats<T>&, const FeatureStats<T>&);          \
  template class ChannelAdapter<T>;                                                         \
  template Tensor<T> adapt_student(const FeaturePair<T>&);                                  \
  template Tensor<T> loss_sm_total(std::span<const FeaturePair<T>>, double);                \
  template Tensor<T> adain(const Tensor<T>&, const FeatureStats<T>&, double);               \
  template Tensor<T> loss_adain(const Tensor<T>&, const Tensor<T>&);

SDT_INSTANTIATE(float)
SDT_INSTANTIATE(double)
#undef SDT_INSTANTIATE

}  // namespace sdt
