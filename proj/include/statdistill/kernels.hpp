#pragma once

#include <cstddef>
#include <span>

// Raw compute kernels behind the differentiable ops. Two implementations
// share one interface:
//   serial::   direct nested loops, the reference the tests check against
//   parallel:: blocked im2col/GEMM loops with OpenMP work sharing
// The parallel kernels partition work so that every output element is
// reduced by one thread in a fixed order; results do not depend on the
// thread count.

namespace sdt::kernels {

struct ConvGeometry {
  std::size_t batch = 0;
  std::size_t in_channels = 0;
  std::size_t in_h = 0;
  std::size_t in_w = 0;
  std::size_t out_channels = 0;
  std::size_t kernel_h = 0;
  std::size_t kernel_w = 0;
  std::size_t stride = 1;
  std::size_t padding = 0;
  std::size_t out_h = 0;
  std::size_t out_w = 0;

  std::size_t input_size() const { return batch * in_channels * in_h * in_w; }
  std::size_t weight_size() const { return out_channels * in_channels * kernel_h * kernel_w; }
  std::size_t output_size() const { return batch * out_channels * out_h * out_w; }
};

struct LinearGeometry {
  std::size_t batch = 0;
  std::size_t in_features = 0;
  std::size_t out_features = 0;
};

// Forward kernels overwrite `output`. Backward kernels accumulate (+=).
// An empty bias span means no bias.

namespace serial {

template <typename T>
void conv2d_forward(const ConvGeometry& g, std::span<const T> input, std::span<const T> weight,
                    std::span<const T> bias, std::span<T> output);
template <typename T>
void conv2d_backward_input(const ConvGeometry& g, std::span<const T> grad_output, std::span<const T> weight,
                           std::span<T> grad_input);
template <typename T>
void conv2d_backward_weight(const ConvGeometry& g, std::span<const T> grad_output, std::span<const T> input,
                            std::span<T> grad_weight);
template <typename T>
void conv2d_backward_bias(const ConvGeometry& g, std::span<const T> grad_output, std::span<T> grad_bias);

template <typename T>
void linear_forward(const LinearGeometry& g, std::span<const T> input, std::span<const T> weight,
                    std::span<const T> bias, std::span<T> output);
template <typename T>
void linear_backward(const LinearGeometry& g, std::span<const T> grad_output, std::span<const T> input,
                     std::span<const T> weight, std::span<T> grad_input, std::span<T> grad_weight,
                     std::span<T> grad_bias);

}  // namespace serial

namespace parallel {

template <typename T>
void conv2d_forward(const ConvGeometry& g, std::span<const T> input, std::span<const T> weight,
                    std::span<const T> bias, std::span<T> output);
template <typename T>
void conv2d_backward_input(const ConvGeometry& g, std::span<const T> grad_output, std::span<const T> weight,
                           std::span<T> grad_input);
template <typename T>
void conv2d_backward_weight(const ConvGeometry& g, std::span<const T> grad_output, std::span<const T> input,
                            std::span<T> grad_weight);
template <typename T>
void conv2d_backward_bias(const ConvGeometry& g, std::span<const T> grad_output, std::span<T> grad_bias);

template <typename T>
void linear_forward(const LinearGeometry& g, std::span<const T> input, std::span<const T> weight,
                    std::span<const T> bias, std::span<T> output);
template <typename T>
void linear_backward(const LinearGeometry& g, std::span<const T> grad_output, std::span<const T> input,
                     std::span<const T> weight, std::span<T> grad_input, std::span<T> grad_weight,
                     std::span<T> grad_bias);

}  // namespace parallel

/// Applies STATDISTILL_THREADS (if set) as the OpenMP thread cap.
/// Returns the thread count in effect.
int configure_threads_from_env();
int max_threads();

}  // namespace sdt::kernels
