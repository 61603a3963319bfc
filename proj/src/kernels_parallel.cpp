#include <algorithm>
#include <cstdlib>
#include <string>
#include <vector>

#include "statdistill/kernels.hpp"

#ifdef _OPENMP
#include <omp.h>
#endif

namespace sdt::kernels {

int configure_threads_from_env() {
#ifdef _OPENMP
  if (const char* env = std::getenv("STATDISTILL_THREADS")) {
    const int requested = std::atoi(env);
    if (requested > 0) omp_set_num_threads(requested);
  }
  return omp_get_max_threads();
#else
  return 1;
#endif
}

int max_threads() {
#ifdef _OPENMP
  return omp_get_max_threads();
#else
  return 1;
#endif
}

namespace parallel {
namespace {

// Columns of the lowered matrix handled per work item.
constexpr std::size_t kBlock = 512;

// Fixed-order reduction with independent partial sums so the compiler can
// vectorize without reassociating.
template <typename T>
T dot(const T* a, const T* b, std::size_t n) {
  T acc[8] = {};
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8) {
    for (std::size_t j = 0; j < 8; ++j) acc[j] += a[i + j] * b[i + j];
  }
  T tail{0};
  for (; i < n; ++i) tail += a[i] * b[i];
  return ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7])) + tail;
}

// col[(ci*KH + kh)*KW + kw][n*P + oh*OW + ow], zero where the tap is padding.
template <typename T>
std::vector<T> im2col(const ConvGeometry& g, std::span<const T> input) {
  const std::size_t plane = g.out_h * g.out_w;
  const std::size_t cols = g.batch * plane;
  const std::size_t rows = g.in_channels * g.kernel_h * g.kernel_w;
  std::vector<T> col(rows * cols, T{0});
  const long pad = static_cast<long>(g.padding);
#pragma omp parallel for schedule(static)
  for (long r = 0; r < static_cast<long>(rows); ++r) {
    const std::size_t kw = static_cast<std::size_t>(r) % g.kernel_w;
    const std::size_t kh = (static_cast<std::size_t>(r) / g.kernel_w) % g.kernel_h;
    const std::size_t ci = static_cast<std::size_t>(r) / (g.kernel_w * g.kernel_h);
    T* dst = col.data() + static_cast<std::size_t>(r) * cols;
    for (std::size_t n = 0; n < g.batch; ++n) {
      const T* src = input.data() + (n * g.in_channels + ci) * g.in_h * g.in_w;
      for (std::size_t oh = 0; oh < g.out_h; ++oh) {
        const long ih = static_cast<long>(oh * g.stride + kh) - pad;
        if (ih < 0 || ih >= static_cast<long>(g.in_h)) continue;
        T* row = dst + n * plane + oh * g.out_w;
        const T* in_row = src + static_cast<std::size_t>(ih) * g.in_w;
        for (std::size_t ow = 0; ow < g.out_w; ++ow) {
          const long iw = static_cast<long>(ow * g.stride + kw) - pad;
          if (iw >= 0 && iw < static_cast<long>(g.in_w)) row[ow] = in_row[iw];
        }
      }
    }
  }
  return col;
}

// [N][C][P] -> [C][N*P]
template <typename T>
std::vector<T> channels_major(std::span<const T> x, std::size_t batch, std::size_t channels, std::size_t plane) {
  std::vector<T> out(x.size());
  const std::size_t cols = batch * plane;
#pragma omp parallel for schedule(static)
  for (long c = 0; c < static_cast<long>(channels); ++c) {
    for (std::size_t n = 0; n < batch; ++n) {
      std::copy_n(x.data() + (n * channels + static_cast<std::size_t>(c)) * plane, plane,
                  out.data() + static_cast<std::size_t>(c) * cols + n * plane);
    }
  }
  return out;
}

}  // namespace

template <typename T>
void conv2d_forward(const ConvGeometry& g, std::span<const T> input, std::span<const T> weight,
                    std::span<const T> bias, std::span<T> output) {
  const std::size_t plane = g.out_h * g.out_w;
  const std::size_t cols = g.batch * plane;
  const std::size_t depth = g.in_channels * g.kernel_h * g.kernel_w;
  const std::vector<T> col = im2col(g, input);
  std::vector<T> out2(g.out_channels * cols);
  const long blocks = static_cast<long>((cols + kBlock - 1) / kBlock);

#pragma omp parallel for schedule(static)
  for (long b = 0; b < blocks; ++b) {
    const std::size_t lo = static_cast<std::size_t>(b) * kBlock;
    const std::size_t len = std::min(kBlock, cols - lo);
    for (std::size_t co = 0; co < g.out_channels; ++co) {
      T* o = out2.data() + co * cols + lo;
      std::fill_n(o, len, T{0});
      const T* w = weight.data() + co * depth;
      for (std::size_t k = 0; k < depth; ++k) {
        const T wk = w[k];
        const T* c = col.data() + k * cols + lo;
        for (std::size_t i = 0; i < len; ++i) o[i] += wk * c[i];
      }
    }
  }

#pragma omp parallel for schedule(static)
  for (long nc = 0; nc < static_cast<long>(g.batch * g.out_channels); ++nc) {
    const std::size_t n = static_cast<std::size_t>(nc) / g.out_channels;
    const std::size_t co = static_cast<std::size_t>(nc) % g.out_channels;
    const T b = bias.empty() ? T{0} : bias[co];
    const T* src = out2.data() + co * cols + n * plane;
    T* dst = output.data() + static_cast<std::size_t>(nc) * plane;
    for (std::size_t p = 0; p < plane; ++p) dst[p] = src[p] + b;
  }
}

template <typename T>
void conv2d_backward_input(const ConvGeometry& g, std::span<const T> grad_output, std::span<const T> weight,
                           std::span<T> grad_input) {
  const std::size_t plane = g.out_h * g.out_w;
  const std::size_t cols = g.batch * plane;
  const std::size_t depth = g.in_channels * g.kernel_h * g.kernel_w;
  const std::vector<T> go2 = channels_major(grad_output, g.batch, g.out_channels, plane);
  std::vector<T> gcol(depth * cols);
  const long blocks = static_cast<long>((cols + kBlock - 1) / kBlock);

#pragma omp parallel for schedule(static)
  for (long b = 0; b < blocks; ++b) {
    const std::size_t lo = static_cast<std::size_t>(b) * kBlock;
    const std::size_t len = std::min(kBlock, cols - lo);
    for (std::size_t k = 0; k < depth; ++k) {
      T* dst = gcol.data() + k * cols + lo;
      std::fill_n(dst, len, T{0});
      for (std::size_t co = 0; co < g.out_channels; ++co) {
        const T wk = weight[co * depth + k];
        const T* src = go2.data() + co * cols + lo;
        for (std::size_t i = 0; i < len; ++i) dst[i] += wk * src[i];
      }
    }
  }

  const long pad = static_cast<long>(g.padding);
#pragma omp parallel for schedule(static)
  for (long nc = 0; nc < static_cast<long>(g.batch * g.in_channels); ++nc) {
    const std::size_t n = static_cast<std::size_t>(nc) / g.in_channels;
    const std::size_t ci = static_cast<std::size_t>(nc) % g.in_channels;
    T* dst = grad_input.data() + static_cast<std::size_t>(nc) * g.in_h * g.in_w;
    for (std::size_t kh = 0; kh < g.kernel_h; ++kh) {
      for (std::size_t kw = 0; kw < g.kernel_w; ++kw) {
        const T* src = gcol.data() + ((ci * g.kernel_h + kh) * g.kernel_w + kw) * cols + n * plane;
        for (std::size_t oh = 0; oh < g.out_h; ++oh) {
          const long ih = static_cast<long>(oh * g.stride + kh) - pad;
          if (ih < 0 || ih >= static_cast<long>(g.in_h)) continue;
          T* row = dst + static_cast<std::size_t>(ih) * g.in_w;
          for (std::size_t ow = 0; ow < g.out_w; ++ow) {
            const long iw = static_cast<long>(ow * g.stride + kw) - pad;
            if (iw >= 0 && iw < static_cast<long>(g.in_w)) row[iw] += src[oh * g.out_w + ow];
          }
        }
      }
    }
  }
}

template <typename T>
void conv2d_backward_weight(const ConvGeometry& g, std::span<const T> grad_output, std::span<const T> input,
                            std::span<T> grad_weight) {
  const std::size_t plane = g.out_h * g.out_w;
  const std::size_t cols = g.batch * plane;
  const std::size_t depth = g.in_channels * g.kernel_h * g.kernel_w;
  const std::vector<T> col = im2col(g, input);
  const std::vector<T> go2 = channels_major(grad_output, g.batch, g.out_channels, plane);
  std::vector<T> acc(g.out_channels * depth, T{0});
  const std::size_t blocks = (cols + kBlock - 1) / kBlock;

  for (std::size_t b = 0; b < blocks; ++b) {
    const std::size_t lo = b * kBlock;
    const std::size_t len = std::min(kBlock, cols - lo);
#pragma omp parallel for schedule(static)
    for (long co = 0; co < static_cast<long>(g.out_channels); ++co) {
      const T* go = go2.data() + static_cast<std::size_t>(co) * cols + lo;
      T* a = acc.data() + static_cast<std::size_t>(co) * depth;
      for (std::size_t k = 0; k < depth; ++k) a[k] += dot(go, col.data() + k * cols + lo, len);
    }
  }
  for (std::size_t i = 0; i < acc.size(); ++i) grad_weight[i] += acc[i];
}

template <typename T>
void conv2d_backward_bias(const ConvGeometry& g, std::span<const T> grad_output, std::span<T> grad_bias) {
  const std::size_t plane = g.out_h * g.out_w;
#pragma omp parallel for schedule(static)
  for (long co = 0; co < static_cast<long>(g.out_channels); ++co) {
    T acc{0};
    for (std::size_t n = 0; n < g.batch; ++n) {
      const T* go = grad_output.data() + (n * g.out_channels + static_cast<std::size_t>(co)) * plane;
      for (std::size_t p = 0; p < plane; ++p) acc += go[p];
    }
    grad_bias[static_cast<std::size_t>(co)] += acc;
  }
}

template <typename T>
void linear_forward(const LinearGeometry& g, std::span<const T> input, std::span<const T> weight,
                    std::span<const T> bias, std::span<T> output) {
#pragma omp parallel for schedule(static)
  for (long n = 0; n < static_cast<long>(g.batch); ++n) {
    const T* x = input.data() + static_cast<std::size_t>(n) * g.in_features;
    for (std::size_t k = 0; k < g.out_features; ++k) {
      const T b = bias.empty() ? T{0} : bias[k];
      output[static_cast<std::size_t>(n) * g.out_features + k] =
          b + dot(x, weight.data() + k * g.in_features, g.in_features);
    }
  }
}

template <typename T>
void linear_backward(const LinearGeometry& g, std::span<const T> grad_output, std::span<const T> input,
                     std::span<const T> weight, std::span<T> grad_input, std::span<T> grad_weight,
                     std::span<T> grad_bias) {
  const std::size_t D = g.in_features;
  const std::size_t K = g.out_features;
  if (!grad_input.empty()) {
#pragma omp parallel for schedule(static)
    for (long n = 0; n < static_cast<long>(g.batch); ++n) {
      T* gx = grad_input.data() + static_cast<std::size_t>(n) * D;
      for (std::size_t k = 0; k < K; ++k) {
        const T go = grad_output[static_cast<std::size_t>(n) * K + k];
        const T* w = weight.data() + k * D;
        for (std::size_t d = 0; d < D; ++d) gx[d] += go * w[d];
      }
    }
  }
  if (!grad_weight.empty() || !grad_bias.empty()) {
#pragma omp parallel for schedule(static)
    for (long k = 0; k < static_cast<long>(K); ++k) {
      const auto kk = static_cast<std::size_t>(k);
      T bias_acc{0};
      for (std::size_t n = 0; n < g.batch; ++n) {
        const T go = grad_output[n * K + kk];
        bias_acc += go;
        if (!grad_weight.empty()) {
          T* gw = grad_weight.data() + kk * D;
          const T* x = input.data() + n * D;
          for (std::size_t d = 0; d < D; ++d) gw[d] += go * x[d];
        }
      }
      if (!grad_bias.empty()) grad_bias[kk] += bias_acc;
    }
  }
}

#define SDT_INSTANTIATE(T)                                                                                            \
  template void conv2d_forward<T>(const ConvGeometry&, std::span<const T>, std::span<const T>, std::span<const T>,   \
                                  std::span<T>);                                                                      \
  template void conv2d_backward_input<T>(const ConvGeometry&, std::span<const T>, std::span<const T>, std::span<T>); \
  template void conv2d_backward_weight<T>(const ConvGeometry&, std::span<const T>, std::span<const T>,               \
                                          std::span<T>);                                                              \
  template void conv2d_backward_bias<T>(const ConvGeometry&, std::span<const T>, std::span<T>);                      \
  template void linear_forward<T>(const LinearGeometry&, std::span<const T>, std::span<const T>, std::span<const T>, \
                                  std::span<T>);                                                                      \
  template void linear_backward<T>(const LinearGeometry&, std::span<const T>, std::span<const T>,                    \
                                   std::span<const T>, std::span<T>, std::span<T>, std::span<T>);

SDT_INSTANTIATE(float)
SDT_INSTANTIATE(double)
#undef SDT_INSTANTIATE

}  // namespace parallel
}  // namespace sdt::kernels
