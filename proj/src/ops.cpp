#include "statdistill/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include "statdistill/kernels.hpp"

namespace sdt {
namespace {

template <typename T>
void require_rank(const Tensor<T>& x, std::size_t rank, const char* op) {
  if (x.rank() != rank) {
    throw DimensionError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got shape " +
                         shape_str(x.shape()));
  }
}

template <typename T>
void require_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
  if (a.rank() != b.rank()) {
    throw DimensionError(std::string(op) + ": rank mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
  for (std::size_t i = 0; i < a.rank(); ++i) {
    if (a.dim(i) != b.dim(i)) {
      throw DimensionError(std::string(op) + ": axis " + std::to_string(i) + " differs (" +
                           std::to_string(a.dim(i)) + " vs " + std::to_string(b.dim(i)) + ")");
    }
  }
}

template <typename T>
void require_dim(const Tensor<T>& x, std::size_t axis, std::size_t expected, const char* op, const char* what) {
  if (x.dim(axis) != expected) {
    throw DimensionError(std::string(op) + ": " + what + " axis " + std::to_string(axis) + " is " +
                         std::to_string(x.dim(axis)) + ", expected " + std::to_string(expected));
  }
}

template <typename T>
using Grads = std::span<const std::span<T>>;

template <typename T>
std::span<const T> cspan(const std::vector<T>& v) {
  return {v.data(), v.size()};
}

}  // namespace

// ---------------------------------------------------------------- conv2d

template <typename T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& weight, const Tensor<T>& bias, std::size_t stride,
                 std::size_t padding) {
  constexpr const char* op = "conv2d";
  require_rank(input, 4, op);
  require_rank(weight, 4, op);
  require_dim(weight, 1, input.dim(1), op, "weight input-channel");
  const std::size_t kh = weight.dim(2);
  const std::size_t kw = weight.dim(3);
  if ((kh != 1 && kh != 3) || (kw != 1 && kw != 3)) {
    throw DimensionError("conv2d: kernel axes 2/3 must be 1 or 3, got " + shape_str(weight.shape()));
  }
  if (stride != 1 && stride != 2) throw UsageError("conv2d: stride must be 1 or 2");
  if (bias.defined()) {
    require_rank(bias, 1, op);
    require_dim(bias, 0, weight.dim(0), op, "bias");
  }
  if (input.dim(2) + 2 * padding < kh) throw DimensionError("conv2d: input axis 2 smaller than kernel");
  if (input.dim(3) + 2 * padding < kw) throw DimensionError("conv2d: input axis 3 smaller than kernel");

  kernels::ConvGeometry g;
  g.batch = input.dim(0);
  g.in_channels = input.dim(1);
  g.in_h = input.dim(2);
  g.in_w = input.dim(3);
  g.out_channels = weight.dim(0);
  g.kernel_h = kh;
  g.kernel_w = kw;
  g.stride = stride;
  g.padding = padding;
  g.out_h = (g.in_h + 2 * padding - kh) / stride + 1;
  g.out_w = (g.in_w + 2 * padding - kw) / stride + 1;

  std::vector<T> out(g.output_size());
  kernels::parallel::conv2d_forward<T>(g, input.values(), weight.values(),
                                       bias.defined() ? bias.values() : std::span<const T>{}, out);

  if (bias.defined()) {
    return make_result<T>("conv2d", {g.batch, g.out_channels, g.out_h, g.out_w}, std::move(out),
                          {input, weight, bias}, [g, input, weight](std::span<const T> go, Grads<T> gi) {
                            if (!gi[0].empty()) kernels::parallel::conv2d_backward_input<T>(g, go, weight.values(), gi[0]);
                            if (!gi[1].empty()) kernels::parallel::conv2d_backward_weight<T>(g, go, input.values(), gi[1]);
                            if (!gi[2].empty()) kernels::parallel::conv2d_backward_bias<T>(g, go, gi[2]);
                          });
  }
  return make_result<T>("conv2d", {g.batch, g.out_channels, g.out_h, g.out_w}, std::move(out), {input, weight},
                        [g, input, weight](std::span<const T> go, Grads<T> gi) {
                          if (!gi[0].empty()) kernels::parallel::conv2d_backward_input<T>(g, go, weight.values(), gi[0]);
                          if (!gi[1].empty()) kernels::parallel::conv2d_backward_weight<T>(g, go, input.values(), gi[1]);
                        });
}

// ------------------------------------------------------------ batchnorm2d

template <typename T>
Tensor<T> batchnorm2d(const Tensor<T>& input, const Tensor<T>& gamma, const Tensor<T>& beta, RunningStats<T>& stats,
                      BatchNormMode mode, double momentum, double eps) {
  constexpr const char* op = "batchnorm2d";
  require_rank(input, 4, op);
  const std::size_t N = input.dim(0), C = input.dim(1), HW = input.dim(2) * input.dim(3);
  require_rank(gamma, 1, op);
  require_rank(beta, 1, op);
  require_dim(gamma, 0, C, op, "gamma");
  require_dim(beta, 0, C, op, "beta");
  const std::size_t M = N * HW;
  const auto x = input.values();
  const auto ga = gamma.values();
  const auto be = beta.values();

  std::vector<T> mu(C), inv_std(C);
  if (mode == BatchNormMode::eval) {
    if (!stats.initialized()) throw StateError("batchnorm2d: eval mode with uninitialized running statistics");
    require_dim(stats.mean, 0, C, op, "running mean");
    require_dim(stats.var, 0, C, op, "running var");
    for (std::size_t c = 0; c < C; ++c) {
      mu[c] = stats.mean.values()[c];
      inv_std[c] = T{1} / std::sqrt(stats.var.values()[c] + static_cast<T>(eps));
    }
  } else {
    if (M == 0) throw DimensionError("batchnorm2d: empty batch");
    std::vector<T> batch_var(C);
    for (std::size_t c = 0; c < C; ++c) {
      T s{0};
      for (std::size_t n = 0; n < N; ++n) {
        const T* p = x.data() + (n * C + c) * HW;
        for (std::size_t i = 0; i < HW; ++i) s += p[i];
      }
      const T m = s / static_cast<T>(M);
      T v{0};
      for (std::size_t n = 0; n < N; ++n) {
        const T* p = x.data() + (n * C + c) * HW;
        for (std::size_t i = 0; i < HW; ++i) v += (p[i] - m) * (p[i] - m);
      }
      mu[c] = m;
      batch_var[c] = v / static_cast<T>(M);
      inv_std[c] = T{1} / std::sqrt(batch_var[c] + static_cast<T>(eps));
    }
    if (!stats.initialized()) stats = RunningStats<T>::standard(C);
    auto rm = stats.mean.mutable_values();
    auto rv = stats.var.mutable_values();
    const T mom = static_cast<T>(momentum);
    const T unbias = M > 1 ? static_cast<T>(M) / static_cast<T>(M - 1) : T{1};
    for (std::size_t c = 0; c < C; ++c) {
      rm[c] = (T{1} - mom) * rm[c] + mom * mu[c];
      rv[c] = (T{1} - mom) * rv[c] + mom * batch_var[c] * unbias;
    }
  }

  std::vector<T> xhat(x.size()), out(x.size());
  for (std::size_t n = 0; n < N; ++n) {
    for (std::size_t c = 0; c < C; ++c) {
      const std::size_t base = (n * C + c) * HW;
      for (std::size_t i = 0; i < HW; ++i) {
        xhat[base + i] = (x[base + i] - mu[c]) * inv_std[c];
        out[base + i] = ga[c] * xhat[base + i] + be[c];
      }
    }
  }

  const bool train = mode == BatchNormMode::train;
  return make_result<T>(
      "batchnorm2d", input.shape(), std::move(out), {input, gamma, beta},
      [xhat = std::move(xhat), inv_std = std::move(inv_std), gamma, N, C, HW, M, train](std::span<const T> go,
                                                                                        Grads<T> gi) {
        const auto ga = gamma.values();
        std::vector<T> sum_go(C, T{0}), sum_go_xhat(C, T{0});
        for (std::size_t n = 0; n < N; ++n) {
          for (std::size_t c = 0; c < C; ++c) {
            const std::size_t base = (n * C + c) * HW;
            for (std::size_t i = 0; i < HW; ++i) {
              sum_go[c] += go[base + i];
              sum_go_xhat[c] += go[base + i] * xhat[base + i];
            }
          }
        }
        if (!gi[1].empty()) for (std::size_t c = 0; c < C; ++c) gi[1][c] += sum_go_xhat[c];
        if (!gi[2].empty()) for (std::size_t c = 0; c < C; ++c) gi[2][c] += sum_go[c];
        if (gi[0].empty()) return;
        const T inv_m = T{1} / static_cast<T>(M);
        for (std::size_t n = 0; n < N; ++n) {
          for (std::size_t c = 0; c < C; ++c) {
            const std::size_t base = (n * C + c) * HW;
            const T k = ga[c] * inv_std[c];
            for (std::size_t i = 0; i < HW; ++i) {
              if (train) {
                gi[0][base + i] += k * (go[base + i] - inv_m * sum_go[c] - xhat[base + i] * inv_m * sum_go_xhat[c]);
              } else {
                gi[0][base + i] += k * go[base + i];
              }
            }
          }
        }
      });
}

// ------------------------------------------------------- pointwise & misc

template <typename T>
Tensor<T> relu(const Tensor<T>& x) {
  const auto v = x.values();
  std::vector<T> out(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) out[i] = v[i] > T{0} ? v[i] : T{0};
  return make_result<T>("relu", x.shape(), std::move(out), {x}, [x](std::span<const T> go, Grads<T> gi) {
    const auto v = x.values();
    for (std::size_t i = 0; i < v.size(); ++i) {
      if (v[i] > T{0}) gi[0][i] += go[i];
    }
  });
}

template <typename T>
Tensor<T> avg_pool_global(const Tensor<T>& x) {
  require_rank(x, 4, "avg_pool_global");
  const std::size_t N = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3);
  const auto v = x.values();
  std::vector<T> out(N * C);
  for (std::size_t nc = 0; nc < N * C; ++nc) {
    T s{0};
    for (std::size_t i = 0; i < HW; ++i) s += v[nc * HW + i];
    out[nc] = s / static_cast<T>(HW);
  }
  return make_result<T>("avg_pool_global", {N, C}, std::move(out), {x}, [N, C, HW](std::span<const T> go, Grads<T> gi) {
    const T inv = T{1} / static_cast<T>(HW);
    for (std::size_t nc = 0; nc < N * C; ++nc) {
      for (std::size_t i = 0; i < HW; ++i) gi[0][nc * HW + i] += go[nc] * inv;
    }
  });
}

template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias) {
  constexpr const char* op = "linear";
  require_rank(x, 2, op);
  require_rank(weight, 2, op);
  require_dim(weight, 1, x.dim(1), op, "weight feature");
  kernels::LinearGeometry g{x.dim(0), x.dim(1), weight.dim(0)};
  if (bias.defined()) {
    require_rank(bias, 1, op);
    require_dim(bias, 0, g.out_features, op, "bias");
  }
  std::vector<T> out(g.batch * g.out_features);
  kernels::parallel::linear_forward<T>(g, x.values(), weight.values(),
                                       bias.defined() ? bias.values() : std::span<const T>{}, out);
  auto back = [g, x, weight](std::span<const T> go, Grads<T> gi) {
    kernels::parallel::linear_backward<T>(g, go, x.values(), weight.values(), gi[0], gi[1],
                                          gi.size() > 2 ? gi[2] : std::span<T>{});
  };
  if (bias.defined()) return make_result<T>("linear", {g.batch, g.out_features}, std::move(out), {x, weight, bias}, back);
  return make_result<T>("linear", {g.batch, g.out_features}, std::move(out), {x, weight}, back);
}

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape(a, b, "add");
  const auto av = a.values(), bv = b.values();
  std::vector<T> out(av.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] + bv[i];
  return make_result<T>("add", a.shape(), std::move(out), {a, b}, [](std::span<const T> go, Grads<T> gi) {
    for (std::size_t k = 0; k < 2; ++k) {
      if (gi[k].empty()) continue;
      for (std::size_t i = 0; i < go.size(); ++i) gi[k][i] += go[i];
    }
  });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape(a, b, "sub");
  const auto av = a.values(), bv = b.values();
  std::vector<T> out(av.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] - bv[i];
  return make_result<T>("sub", a.shape(), std::move(out), {a, b}, [](std::span<const T> go, Grads<T> gi) {
    if (!gi[0].empty()) for (std::size_t i = 0; i < go.size(); ++i) gi[0][i] += go[i];
    if (!gi[1].empty()) for (std::size_t i = 0; i < go.size(); ++i) gi[1][i] -= go[i];
  });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape(a, b, "mul");
  const auto av = a.values(), bv = b.values();
  std::vector<T> out(av.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * bv[i];
  return make_result<T>("mul", a.shape(), std::move(out), {a, b}, [a, b](std::span<const T> go, Grads<T> gi) {
    const auto av = a.values(), bv = b.values();
    if (!gi[0].empty()) for (std::size_t i = 0; i < go.size(); ++i) gi[0][i] += go[i] * bv[i];
    if (!gi[1].empty()) for (std::size_t i = 0; i < go.size(); ++i) gi[1][i] += go[i] * av[i];
  });
}

template <typename T>
Tensor<T> div(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape(a, b, "div");
  const auto av = a.values(), bv = b.values();
  std::vector<T> out(av.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] / bv[i];
  return make_result<T>("div", a.shape(), std::move(out), {a, b}, [a, b](std::span<const T> go, Grads<T> gi) {
    const auto av = a.values(), bv = b.values();
    if (!gi[0].empty()) for (std::size_t i = 0; i < go.size(); ++i) gi[0][i] += go[i] / bv[i];
    if (!gi[1].empty()) for (std::size_t i = 0; i < go.size(); ++i) gi[1][i] -= go[i] * av[i] / (bv[i] * bv[i]);
  });
}

template <typename T>
Tensor<T> scale(const Tensor<T>& x, double factor) {
  const T f = static_cast<T>(factor);
  const auto v = x.values();
  std::vector<T> out(v.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = v[i] * f;
  return make_result<T>("scale", x.shape(), std::move(out), {x}, [f](std::span<const T> go, Grads<T> gi) {
    for (std::size_t i = 0; i < go.size(); ++i) gi[0][i] += go[i] * f;
  });
}

template <typename T>
Tensor<T> scale_by(const Tensor<T>& x, const Tensor<T>& factor) {
  if (factor.numel() != 1) throw DimensionError("scale_by: factor must hold one value, got " + shape_str(factor.shape()));
  const T f = factor.values()[0];
  const auto v = x.values();
  std::vector<T> out(v.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = v[i] * f;
  return make_result<T>("scale_by", x.shape(), std::move(out), {x, factor},
                        [x, factor](std::span<const T> go, Grads<T> gi) {
                          const auto v = x.values();
                          const T f = factor.values()[0];
                          if (!gi[0].empty()) for (std::size_t i = 0; i < go.size(); ++i) gi[0][i] += go[i] * f;
                          if (!gi[1].empty()) {
                            T s{0};
                            for (std::size_t i = 0; i < go.size(); ++i) s += go[i] * v[i];
                            gi[1][0] += s;
                          }
                        });
}

template <typename T>
Tensor<T> square(const Tensor<T>& x) {
  const auto v = x.values();
  std::vector<T> out(v.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = v[i] * v[i];
  return make_result<T>("square", x.shape(), std::move(out), {x}, [x](std::span<const T> go, Grads<T> gi) {
    const auto v = x.values();
    for (std::size_t i = 0; i < go.size(); ++i) gi[0][i] += T{2} * v[i] * go[i];
  });
}

template <typename T>
Tensor<T> sum(const Tensor<T>& x) {
  T s{0};
  for (auto v : x.values()) s += v;
  return make_result<T>("sum", {1}, {s}, {x}, [](std::span<const T> go, Grads<T> gi) {
    for (auto& g : gi[0]) g += go[0];
  });
}

template <typename T>
Tensor<T> mean(const Tensor<T>& x) {
  const std::size_t n = x.numel();
  if (n == 0) throw DimensionError("mean: empty tensor");
  T s{0};
  for (auto v : x.values()) s += v;
  return make_result<T>("mean", {1}, {s / static_cast<T>(n)}, {x}, [n](std::span<const T> go, Grads<T> gi) {
    const T g = go[0] / static_cast<T>(n);
    for (auto& v : gi[0]) v += g;
  });
}

// --------------------------------------------------- softmax family

namespace {

template <typename T>
std::vector<T> log_softmax_rows(std::span<const T> z, std::size_t N, std::size_t K) {
  std::vector<T> out(N * K);
  for (std::size_t n = 0; n < N; ++n) {
    const T* row = z.data() + n * K;
    const T m = *std::max_element(row, row + K);
    T s{0};
    for (std::size_t k = 0; k < K; ++k) s += std::exp(row[k] - m);
    const T lse = m + std::log(s);
    for (std::size_t k = 0; k < K; ++k) out[n * K + k] = row[k] - lse;
  }
  return out;
}

}  // namespace

template <typename T>
Tensor<T> softmax(const Tensor<T>& logits) {
  require_rank(logits, 2, "softmax");
  const std::size_t N = logits.dim(0), K = logits.dim(1);
  std::vector<T> y = log_softmax_rows(logits.values(), N, K);
  for (auto& v : y) v = std::exp(v);
  std::vector<T> saved = y;
  return make_result<T>("softmax", logits.shape(), std::move(y), {logits},
                        [saved = std::move(saved), N, K](std::span<const T> go, Grads<T> gi) {
                          for (std::size_t n = 0; n < N; ++n) {
                            T dot{0};
                            for (std::size_t k = 0; k < K; ++k) dot += go[n * K + k] * saved[n * K + k];
                            for (std::size_t k = 0; k < K; ++k) gi[0][n * K + k] += saved[n * K + k] * (go[n * K + k] - dot);
                          }
                        });
}

template <typename T>
Tensor<T> log_softmax(const Tensor<T>& logits) {
  require_rank(logits, 2, "log_softmax");
  const std::size_t N = logits.dim(0), K = logits.dim(1);
  std::vector<T> y = log_softmax_rows(logits.values(), N, K);
  std::vector<T> probs(y.size());
  for (std::size_t i = 0; i < y.size(); ++i) probs[i] = std::exp(y[i]);
  return make_result<T>("log_softmax", logits.shape(), std::move(y), {logits},
                        [probs = std::move(probs), N, K](std::span<const T> go, Grads<T> gi) {
                          for (std::size_t n = 0; n < N; ++n) {
                            T s{0};
                            for (std::size_t k = 0; k < K; ++k) s += go[n * K + k];
                            for (std::size_t k = 0; k < K; ++k) gi[0][n * K + k] += go[n * K + k] - probs[n * K + k] * s;
                          }
                        });
}

template <typename T>
Tensor<T> cross_entropy(const Tensor<T>& logits, std::span<const int> labels) {
  require_rank(logits, 2, "cross_entropy");
  const std::size_t N = logits.dim(0), K = logits.dim(1);
  if (labels.size() != N) {
    throw DimensionError("cross_entropy: logits axis 0 is " + std::to_string(N) + " but " +
                         std::to_string(labels.size()) + " labels were given");
  }
  for (std::size_t n = 0; n < N; ++n) {
    if (labels[n] < 0 || static_cast<std::size_t>(labels[n]) >= K) {
      throw InputError("cross_entropy: label " + std::to_string(labels[n]) + " at index " + std::to_string(n) +
                       " outside [0," + std::to_string(K) + ")");
    }
  }
  const std::vector<T> logp = log_softmax_rows(logits.values(), N, K);
  T loss{0};
  for (std::size_t n = 0; n < N; ++n) loss -= logp[n * K + static_cast<std::size_t>(labels[n])];
  loss /= static_cast<T>(N);
  std::vector<int> y(labels.begin(), labels.end());
  return make_result<T>("cross_entropy", {1}, {loss}, {logits},
                        [logp, y = std::move(y), N, K](std::span<const T> go, Grads<T> gi) {
                          const T g = go[0] / static_cast<T>(N);
                          for (std::size_t n = 0; n < N; ++n) {
                            for (std::size_t k = 0; k < K; ++k) {
                              const T p = std::exp(logp[n * K + k]);
                              const T target = static_cast<std::size_t>(y[n]) == k ? T{1} : T{0};
                              gi[0][n * K + k] += g * (p - target);
                            }
                          }
                        });
}

template <typename T>
Tensor<T> kl_div_with_logits(const Tensor<T>& logits, const Tensor<T>& target_probs) {
  require_rank(logits, 2, "kl_div_with_logits");
  require_same_shape(logits, target_probs, "kl_div_with_logits");
  const std::size_t N = logits.dim(0), K = logits.dim(1);
  const std::vector<T> logq = log_softmax_rows(logits.values(), N, K);
  const auto p = target_probs.values();
  T loss{0};
  for (std::size_t i = 0; i < N * K; ++i) {
    if (p[i] > T{0}) loss += p[i] * (std::log(p[i]) - logq[i]);
  }
  loss /= static_cast<T>(N);
  std::vector<T> target(p.begin(), p.end());
  return make_result<T>("kl_div_with_logits", {1}, {loss}, {logits},
                        [logq, target = std::move(target), N](std::span<const T> go, Grads<T> gi) {
                          const T g = go[0] / static_cast<T>(N);
                          for (std::size_t i = 0; i < logq.size(); ++i) gi[0][i] += g * (std::exp(logq[i]) - target[i]);
                        });
}

template <typename T>
Tensor<T> mse(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape(a, b, "mse");
  if (a.rank() == 0 || a.dim(0) == 0) throw DimensionError("mse: empty batch axis");
  const std::size_t N = a.dim(0);
  const auto av = a.values(), bv = b.values();
  T s{0};
  for (std::size_t i = 0; i < av.size(); ++i) s += (av[i] - bv[i]) * (av[i] - bv[i]);
  return make_result<T>("mse", {1}, {s / static_cast<T>(N)}, {a, b}, [a, b, N](std::span<const T> go, Grads<T> gi) {
    const auto av = a.values(), bv = b.values();
    const T k = T{2} * go[0] / static_cast<T>(N);
    if (!gi[0].empty()) for (std::size_t i = 0; i < av.size(); ++i) gi[0][i] += k * (av[i] - bv[i]);
    if (!gi[1].empty()) for (std::size_t i = 0; i < av.size(); ++i) gi[1][i] -= k * (av[i] - bv[i]);
  });
}

// ------------------------------------------------- channel statistics

template <typename T>
Tensor<T> channel_mean(const Tensor<T>& x) {
  require_rank(x, 4, "channel_mean");
  const std::size_t N = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3);
  if (HW == 0) throw DimensionError("channel_mean: empty spatial axes");
  const auto v = x.values();
  std::vector<T> out(N * C);
  for (std::size_t nc = 0; nc < N * C; ++nc) {
    T s{0};
    for (std::size_t i = 0; i < HW; ++i) s += v[nc * HW + i];
    out[nc] = s / static_cast<T>(HW);
  }
  return make_result<T>("channel_mean", {N, C}, std::move(out), {x}, [N, C, HW](std::span<const T> go, Grads<T> gi) {
    const T inv = T{1} / static_cast<T>(HW);
    for (std::size_t nc = 0; nc < N * C; ++nc) {
      const T g = go[nc] * inv;
      for (std::size_t i = 0; i < HW; ++i) gi[0][nc * HW + i] += g;
    }
  });
}

template <typename T>
Tensor<T> channel_std(const Tensor<T>& x, double eps) {
  require_rank(x, 4, "channel_std");
  const std::size_t N = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3);
  if (HW == 0) throw DimensionError("channel_std: empty spatial axes");
  const auto v = x.values();
  std::vector<T> mu(N * C), out(N * C);
  for (std::size_t nc = 0; nc < N * C; ++nc) {
    T s{0};
    for (std::size_t i = 0; i < HW; ++i) s += v[nc * HW + i];
    const T m = s / static_cast<T>(HW);
    T var{0};
    for (std::size_t i = 0; i < HW; ++i) var += (v[nc * HW + i] - m) * (v[nc * HW + i] - m);
    mu[nc] = m;
    out[nc] = std::sqrt(var / static_cast<T>(HW) + static_cast<T>(eps));
  }
  std::vector<T> sigma = out;
  return make_result<T>("channel_std", {N, C}, std::move(out), {x},
                        [x, mu = std::move(mu), sigma = std::move(sigma), N, C, HW](std::span<const T> go, Grads<T> gi) {
                          const auto v = x.values();
                          for (std::size_t nc = 0; nc < N * C; ++nc) {
                            const T k = go[nc] / (static_cast<T>(HW) * sigma[nc]);
                            for (std::size_t i = 0; i < HW; ++i) gi[0][nc * HW + i] += k * (v[nc * HW + i] - mu[nc]);
                          }
                        });
}

template <typename T>
Tensor<T> channel_affine(const Tensor<T>& x, const Tensor<T>& scale_nc, const Tensor<T>& shift_nc) {
  constexpr const char* op = "channel_affine";
  require_rank(x, 4, op);
  require_rank(scale_nc, 2, op);
  require_rank(shift_nc, 2, op);
  const std::size_t N = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3);
  require_dim(scale_nc, 0, N, op, "scale");
  require_dim(scale_nc, 1, C, op, "scale");
  require_dim(shift_nc, 0, N, op, "shift");
  require_dim(shift_nc, 1, C, op, "shift");
  const auto v = x.values(), s = scale_nc.values(), b = shift_nc.values();
  std::vector<T> out(v.size());
  for (std::size_t nc = 0; nc < N * C; ++nc) {
    for (std::size_t i = 0; i < HW; ++i) out[nc * HW + i] = v[nc * HW + i] * s[nc] + b[nc];
  }
  return make_result<T>("channel_affine", x.shape(), std::move(out), {x, scale_nc, shift_nc},
                        [x, scale_nc, N, C, HW](std::span<const T> go, Grads<T> gi) {
                          const auto v = x.values(), s = scale_nc.values();
                          for (std::size_t nc = 0; nc < N * C; ++nc) {
                            T gs{0}, gb{0};
                            for (std::size_t i = 0; i < HW; ++i) {
                              const T g = go[nc * HW + i];
                              if (!gi[0].empty()) gi[0][nc * HW + i] += g * s[nc];
                              gs += g * v[nc * HW + i];
                              gb += g;
                            }
                            if (!gi[1].empty()) gi[1][nc] += gs;
                            if (!gi[2].empty()) gi[2][nc] += gb;
                          }
                        });
}

template <typename T>
Tensor<T> channel_energy(const Tensor<T>& x) {
  require_rank(x, 4, "channel_energy");
  const std::size_t N = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3);
  const auto v = x.values();
  std::vector<T> out(N * HW, T{0});
  for (std::size_t n = 0; n < N; ++n) {
    for (std::size_t c = 0; c < C; ++c) {
      const T* p = v.data() + (n * C + c) * HW;
      for (std::size_t i = 0; i < HW; ++i) out[n * HW + i] += p[i] * p[i];
    }
  }
  return make_result<T>("channel_energy", {N, HW}, std::move(out), {x}, [x, N, C, HW](std::span<const T> go, Grads<T> gi) {
    const auto v = x.values();
    for (std::size_t n = 0; n < N; ++n) {
      for (std::size_t c = 0; c < C; ++c) {
        const std::size_t base = (n * C + c) * HW;
        for (std::size_t i = 0; i < HW; ++i) gi[0][base + i] += T{2} * v[base + i] * go[n * HW + i];
      }
    }
  });
}

template <typename T>
Tensor<T> l2_normalize_rows(const Tensor<T>& x, double eps) {
  require_rank(x, 2, "l2_normalize_rows");
  const std::size_t N = x.dim(0), D = x.dim(1);
  const auto v = x.values();
  std::vector<T> out(v.size()), norms(N);
  std::vector<bool> clamped(N);
  for (std::size_t n = 0; n < N; ++n) {
    T s{0};
    for (std::size_t d = 0; d < D; ++d) s += v[n * D + d] * v[n * D + d];
    const T r = std::sqrt(s);
    clamped[n] = r < static_cast<T>(eps);
    norms[n] = clamped[n] ? static_cast<T>(eps) : r;
    for (std::size_t d = 0; d < D; ++d) out[n * D + d] = v[n * D + d] / norms[n];
  }
  std::vector<T> y = out;
  return make_result<T>("l2_normalize_rows", x.shape(), std::move(out), {x},
                        [y = std::move(y), norms = std::move(norms), clamped = std::move(clamped), N, D](
                            std::span<const T> go, Grads<T> gi) {
                          for (std::size_t n = 0; n < N; ++n) {
                            T dot{0};
                            if (!clamped[n]) {
                              for (std::size_t d = 0; d < D; ++d) dot += y[n * D + d] * go[n * D + d];
                            }
                            for (std::size_t d = 0; d < D; ++d) {
                              gi[0][n * D + d] += (go[n * D + d] - y[n * D + d] * dot) / norms[n];
                            }
                          }
                        });
}

#define SDT_INSTANTIATE(T)                                                                                   \
  template Tensor<T> conv2d(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, std::size_t, std::size_t); \
  template Tensor<T> batchnorm2d(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, RunningStats<T>&,     \
                                 BatchNormMode, double, double);                                             \
  template Tensor<T> relu(const Tensor<T>&);                                                                 \
  template Tensor<T> avg_pool_global(const Tensor<T>&);                                                      \
  template Tensor<T> linear(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);                           \
  template Tensor<T> add(const Tensor<T>&, const Tensor<T>&);                                                \
  template Tensor<T> sub(const Tensor<T>&, const Tensor<T>&);                                                \
  template Tensor<T> mul(const Tensor<T>&, const Tensor<T>&);                                                \
  template Tensor<T> div(const Tensor<T>&, const Tensor<T>&);                                                \
  template Tensor<T> scale(const Tensor<T>&, double);                                                        \
  template Tensor<T> scale_by(const Tensor<T>&, const Tensor<T>&);                                           \
  template Tensor<T> square(const Tensor<T>&);                                                               \
  template Tensor<T> sum(const Tensor<T>&);                                                                  \
  template Tensor<T> mean(const Tensor<T>&);                                                                 \
  template Tensor<T> softmax(const Tensor<T>&);                                                              \
  template Tensor<T> log_softmax(const Tensor<T>&);                                                          \
  template Tensor<T> cross_entropy(const Tensor<T>&, std::span<const int>);                                  \
  template Tensor<T> kl_div_with_logits(const Tensor<T>&, const Tensor<T>&);                                 \
  template Tensor<T> mse(const Tensor<T>&, const Tensor<T>&);                                                \
  template Tensor<T> channel_mean(const Tensor<T>&);                                                         \
  template Tensor<T> channel_std(const Tensor<T>&, double);                                                  \
  template Tensor<T> channel_affine(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);                   \
  template Tensor<T> channel_energy(const Tensor<T>&);                                                       \
  template Tensor<T> l2_normalize_rows(const Tensor<T>&, double);

SDT_INSTANTIATE(float)
SDT_INSTANTIATE(double)
#undef SDT_INSTANTIATE

}  // namespace sdt
