#pragma once

#include <span>

#include "statdistill/tensor.hpp"

// Differentiable operations. Shapes must match exactly; the only
// broadcasting is bias addition (conv2d, linear) and the per-sample,
// per-channel forms (channel_affine, batchnorm2d).

namespace sdt {

enum class BatchNormMode { train, eval };

/// Running per-channel statistics of a batch-norm layer. Undefined tensors
/// mean the layer has never been initialized.
template <typename T>
struct RunningStats {
  Tensor<T> mean;
  Tensor<T> var;
  bool initialized() const { return mean.defined() && var.defined(); }
  static RunningStats standard(std::size_t channels) {
    return {Tensor<T>::zeros({channels}), Tensor<T>::ones({channels})};
  }
};

/// Cross-correlation. `bias` may be undefined. Output side is
/// floor((H + 2*padding - kh) / stride) + 1.
template <typename T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& weight, const Tensor<T>& bias, std::size_t stride,
                 std::size_t padding);

/// Train mode normalizes with biased batch moments and folds them into
/// `stats` (running = (1 - momentum) * running + momentum * batch, with the
/// unbiased batch variance). Eval mode normalizes with `stats`.
template <typename T>
Tensor<T> batchnorm2d(const Tensor<T>& input, const Tensor<T>& gamma, const Tensor<T>& beta, RunningStats<T>& stats,
                      BatchNormMode mode, double momentum, double eps);

// relu'(0) == 0
template <typename T>
Tensor<T> relu(const Tensor<T>& x);
template <typename T>
Tensor<T> avg_pool_global(const Tensor<T>& x);
template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias);

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> div(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> scale(const Tensor<T>& x, double factor);
/// x multiplied by the single value held in `factor` (shape [1]).
template <typename T>
Tensor<T> scale_by(const Tensor<T>& x, const Tensor<T>& factor);
template <typename T>
Tensor<T> square(const Tensor<T>& x);
template <typename T>
Tensor<T> sum(const Tensor<T>& x);
template <typename T>
Tensor<T> mean(const Tensor<T>& x);

// Row-wise over [N,K].
template <typename T>
Tensor<T> softmax(const Tensor<T>& logits);
template <typename T>
Tensor<T> log_softmax(const Tensor<T>& logits);

/// Mean over the batch of -log softmax(logits)[label].
template <typename T>
Tensor<T> cross_entropy(const Tensor<T>& logits, std::span<const int> labels);

/// Mean over the batch of sum_k p_k (ln p_k - log softmax(logits)_k).
/// `target_probs` is treated as a constant.
template <typename T>
Tensor<T> kl_div_with_logits(const Tensor<T>& logits, const Tensor<T>& target_probs);

/// Sum of squared differences over the non-batch axes, mean over axis 0.
template <typename T>
Tensor<T> mse(const Tensor<T>& a, const Tensor<T>& b);

// [N,C,H,W] -> [N,C]
template <typename T>
Tensor<T> channel_mean(const Tensor<T>& x);
/// sqrt(biased spatial variance + eps), [N,C,H,W] -> [N,C].
template <typename T>
Tensor<T> channel_std(const Tensor<T>& x, double eps);
/// x[n,c,:,:] * scale[n,c] + shift[n,c]
template <typename T>
Tensor<T> channel_affine(const Tensor<T>& x, const Tensor<T>& scale, const Tensor<T>& shift);

/// Sum over channels of x^2, [N,C,H,W] -> [N,H*W].
template <typename T>
Tensor<T> channel_energy(const Tensor<T>& x);
/// Each row divided by max(||row||_2, eps), [N,D] -> [N,D].
template <typename T>
Tensor<T> l2_normalize_rows(const Tensor<T>& x, double eps = 1e-12);

}  // namespace sdt
