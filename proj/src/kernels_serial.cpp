#include "statdistill/kernels.hpp"

namespace sdt::kernels::serial {

template <typename T>
void conv2d_forward(const ConvGeometry& g, std::span<const T> input, std::span<const T> weight,
                    std::span<const T> bias, std::span<T> output) {
  for (std::size_t n = 0; n < g.batch; ++n) {
    for (std::size_t co = 0; co < g.out_channels; ++co) {
      for (std::size_t oh = 0; oh < g.out_h; ++oh) {
        for (std::size_t ow = 0; ow < g.out_w; ++ow) {
          T acc = bias.empty() ? T{0} : bias[co];
          for (std::size_t ci = 0; ci < g.in_channels; ++ci) {
            for (std::size_t kh = 0; kh < g.kernel_h; ++kh) {
              const long ih = static_cast<long>(oh * g.stride + kh) - static_cast<long>(g.padding);
              if (ih < 0 || ih >= static_cast<long>(g.in_h)) continue;
              for (std::size_t kw = 0; kw < g.kernel_w; ++kw) {
                const long iw = static_cast<long>(ow * g.stride + kw) - static_cast<long>(g.padding);
                if (iw < 0 || iw >= static_cast<long>(g.in_w)) continue;
                acc += weight[((co * g.in_channels + ci) * g.kernel_h + kh) * g.kernel_w + kw] *
                       input[((n * g.in_channels + ci) * g.in_h + ih) * g.in_w + iw];
              }
            }
          }
          output[((n * g.out_channels + co) * g.out_h + oh) * g.out_w + ow] = acc;
        }
      }
    }
  }
}

template <typename T>
void conv2d_backward_input(const ConvGeometry& g, std::span<const T> grad_output, std::span<const T> weight,
                           std::span<T> grad_input) {
  for (std::size_t n = 0; n < g.batch; ++n) {
    for (std::size_t co = 0; co < g.out_channels; ++co) {
      for (std::size_t oh = 0; oh < g.out_h; ++oh) {
        for (std::size_t ow = 0; ow < g.out_w; ++ow) {
          const T go = grad_output[((n * g.out_channels + co) * g.out_h + oh) * g.out_w + ow];
          for (std::size_t ci = 0; ci < g.in_channels; ++ci) {
            for (std::size_t kh = 0; kh < g.kernel_h; ++kh) {
              const long ih = static_cast<long>(oh * g.stride + kh) - static_cast<long>(g.padding);
              if (ih < 0 || ih >= static_cast<long>(g.in_h)) continue;
              for (std::size_t kw = 0; kw < g.kernel_w; ++kw) {
                const long iw = static_cast<long>(ow * g.stride + kw) - static_cast<long>(g.padding);
                if (iw < 0 || iw >= static_cast<long>(g.in_w)) continue;
                grad_input[((n * g.in_channels + ci) * g.in_h + ih) * g.in_w + iw] +=
                    go * weight[((co * g.in_channels + ci) * g.kernel_h + kh) * g.kernel_w + kw];
              }
            }
          }
        }
      }
    }
  }
}

template <typename T>
void conv2d_backward_weight(const ConvGeometry& g, std::span<const T> grad_output, std::span<const T> input,
                            std::span<T> grad_weight) {
  for (std::size_t co = 0; co < g.out_channels; ++co) {
    for (std::size_t ci = 0; ci < g.in_channels; ++ci) {
      for (std::size_t kh = 0; kh < g.kernel_h; ++kh) {
        for (std::size_t kw = 0; kw < g.kernel_w; ++kw) {
          T acc{0};
          for (std::size_t n = 0; n < g.batch; ++n) {
            for (std::size_t oh = 0; oh < g.out_h; ++oh) {
              const long ih = static_cast<long>(oh * g.stride + kh) - static_cast<long>(g.padding);
              if (ih < 0 || ih >= static_cast<long>(g.in_h)) continue;
              for (std::size_t ow = 0; ow < g.out_w; ++ow) {
                const long iw = static_cast<long>(ow * g.stride + kw) - static_cast<long>(g.padding);
                if (iw < 0 || iw >= static_cast<long>(g.in_w)) continue;
                acc += grad_output[((n * g.out_channels + co) * g.out_h + oh) * g.out_w + ow] *
                       input[((n * g.in_channels + ci) * g.in_h + ih) * g.in_w + iw];
              }
            }
          }
          grad_weight[((co * g.in_channels + ci) * g.kernel_h + kh) * g.kernel_w + kw] += acc;
        }
      }
    }
  }
}

template <typename T>
void conv2d_backward_bias(const ConvGeometry& g, std::span<const T> grad_output, std::span<T> grad_bias) {
  const std::size_t plane = g.out_h * g.out_w;
  for (std::size_t co = 0; co < g.out_channels; ++co) {
    T acc{0};
    for (std::size_t n = 0; n < g.batch; ++n) {
      const T* go = grad_output.data() + (n * g.out_channels + co) * plane;
      for (std::size_t p = 0; p < plane; ++p) acc += go[p];
    }
    grad_bias[co] += acc;
  }
}

template <typename T>
void linear_forward(const LinearGeometry& g, std::span<const T> input, std::span<const T> weight,
                    std::span<const T> bias, std::span<T> output) {
  for (std::size_t n = 0; n < g.batch; ++n) {
    for (std::size_t k = 0; k < g.out_features; ++k) {
      T acc = bias.empty() ? T{0} : bias[k];
      for (std::size_t d = 0; d < g.in_features; ++d) acc += input[n * g.in_features + d] * weight[k * g.in_features + d];
      output[n * g.out_features + k] = acc;
    }
  }
}

template <typename T>
void linear_backward(const LinearGeometry& g, std::span<const T> grad_output, std::span<const T> input,
                     std::span<const T> weight, std::span<T> grad_input, std::span<T> grad_weight,
                     std::span<T> grad_bias) {
  for (std::size_t n = 0; n < g.batch; ++n) {
    for (std::size_t k = 0; k < g.out_features; ++k) {
      const T go = grad_output[n * g.out_features + k];
      if (!grad_bias.empty()) grad_bias[k] += go;
      for (std::size_t d = 0; d < g.in_features; ++d) {
        if (!grad_input.empty()) grad_input[n * g.in_features + d] += go * weight[k * g.in_features + d];
        if (!grad_weight.empty()) grad_weight[k * g.in_features + d] += go * input[n * g.in_features + d];
      }
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

}  // namespace sdt::kernels::serial
