// Serial reference vs OpenMP kernels on teacher-sized layers.

#include <benchmark/benchmark.h>
#include <omp.h>

#include <random>
#include <vector>

#include "statdistill/kernels.hpp"

namespace k = sdt::kernels;

namespace {

std::vector<float> random_values(std::size_t n, unsigned seed) {
  std::mt19937 rng(seed);
  std::uniform_real_distribution<float> d(-1.0f, 1.0f);
  std::vector<float> v(n);
  for (auto& x : v) x = d(rng);
  return v;
}

// 3x3 same-padding conv on a [64, C, S, S] batch.
k::ConvGeometry conv_geometry(std::size_t channels, std::size_t side, std::size_t stride) {
  k::ConvGeometry g;
  g.batch = 64;
  g.in_channels = g.out_channels = channels;
  g.in_h = g.in_w = side;
  g.kernel_h = g.kernel_w = 3;
  g.stride = stride;
  g.padding = 1;
  g.out_h = g.out_w = (side + 2 - 3) / stride + 1;
  return g;
}

struct ConvData {
  k::ConvGeometry g;
  std::vector<float> in, w, b, out, gout, gin, gw;
  explicit ConvData(const k::ConvGeometry& geo)
      : g(geo),
        in(random_values(geo.input_size(), 1)),
        w(random_values(geo.weight_size(), 2)),
        b(random_values(geo.out_channels, 3)),
        out(geo.output_size()),
        gout(random_values(geo.output_size(), 4)),
        gin(geo.input_size()),
        gw(geo.weight_size()) {}
};

template <bool Parallel>
void BM_ConvForward(benchmark::State& state) {
  ConvData d(conv_geometry(static_cast<std::size_t>(state.range(0)), static_cast<std::size_t>(state.range(1)), 1));
  for (auto _ : state) {
    if constexpr (Parallel) {
      k::parallel::conv2d_forward<float>(d.g, d.in, d.w, d.b, d.out);
    } else {
      k::serial::conv2d_forward<float>(d.g, d.in, d.w, d.b, d.out);
    }
    benchmark::DoNotOptimize(d.out.data());
  }
  state.SetItemsProcessed(state.iterations() * static_cast<long>(d.g.batch));
}

template <bool Parallel>
void BM_ConvBackward(benchmark::State& state) {
  ConvData d(conv_geometry(static_cast<std::size_t>(state.range(0)), static_cast<std::size_t>(state.range(1)), 1));
  for (auto _ : state) {
    if constexpr (Parallel) {
      k::parallel::conv2d_backward_input<float>(d.g, d.gout, d.w, d.gin);
      k::parallel::conv2d_backward_weight<float>(d.g, d.gout, d.in, d.gw);
    } else {
      k::serial::conv2d_backward_input<float>(d.g, d.gout, d.w, d.gin);
      k::serial::conv2d_backward_weight<float>(d.g, d.gout, d.in, d.gw);
    }
    benchmark::DoNotOptimize(d.gin.data());
    benchmark::DoNotOptimize(d.gw.data());
  }
  state.SetItemsProcessed(state.iterations() * static_cast<long>(d.g.batch));
}

template <bool Parallel>
void BM_Linear(benchmark::State& state) {
  k::LinearGeometry g{256, static_cast<std::size_t>(state.range(0)), 100};
  auto x = random_values(g.batch * g.in_features, 1), w = random_values(g.out_features * g.in_features, 2);
  auto b = random_values(g.out_features, 3);
  std::vector<float> y(g.batch * g.out_features);
  for (auto _ : state) {
    if constexpr (Parallel) {
      k::parallel::linear_forward<float>(g, x, w, b, y);
    } else {
      k::serial::linear_forward<float>(g, x, w, b, y);
    }
    benchmark::DoNotOptimize(y.data());
  }
}

// (channels, side) of the three desk teacher groups.
void conv_args(benchmark::internal::Benchmark* b) {
  b->Args({16, 16})->Args({32, 8})->Args({64, 4})->Unit(benchmark::kMillisecond);
}

}  // namespace

BENCHMARK(BM_ConvForward<false>)->Name("conv_forward/serial")->Apply(conv_args);
BENCHMARK(BM_ConvForward<true>)->Name("conv_forward/parallel")->Apply(conv_args);
BENCHMARK(BM_ConvBackward<false>)->Name("conv_backward/serial")->Apply(conv_args);
BENCHMARK(BM_ConvBackward<true>)->Name("conv_backward/parallel")->Apply(conv_args);
BENCHMARK(BM_Linear<false>)->Name("linear/serial")->Arg(64)->Arg(640);
BENCHMARK(BM_Linear<true>)->Name("linear/parallel")->Arg(64)->Arg(640);

int main(int argc, char** argv) {
  sdt::kernels::configure_threads_from_env();
  benchmark::Initialize(&argc, argv);
  if (benchmark::ReportUnrecognizedArguments(argc, argv)) return 1;
  benchmark::AddCustomContext("omp_threads", std::to_string(omp_get_max_threads()));
  benchmark::RunSpecifiedBenchmarks();
  benchmark::Shutdown();
  return 0;
}
