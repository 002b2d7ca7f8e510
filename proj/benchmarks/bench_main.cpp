#include <benchmark/benchmark.h>

#include "pulsereg/adam.hpp"
#include "pulsereg/loss.hpp"
#include "pulsereg/ops.hpp"
#include "pulsereg/random.hpp"
#include "pulsereg/unet.hpp"
#include "pulsereg/warp.hpp"

using namespace pulsereg;

namespace {

Array<float> noise(Shape s, std::uint64_t seed, double scale = 1.0) {
  Rng rng(seed);
  Array<float> a(std::move(s));
  for (float& v : a.values) v = static_cast<float>(scale * rng.uniform(-1, 1));
  return a;
}

// Args: channels in/out, edge.
void BM_Conv3Forward(benchmark::State& state) {
  const auto c = state.range(0), n = state.range(1);
  const Tensor<float> x(noise(Shape{c, n, n, n}, 1));
  const Tensor<float> w(noise(Shape{c, c, 3, 3, 3}, 2, 0.1));
  const Tensor<float> b(Array<float>(Shape{c}));
  for (auto _ : state) {
    Graph<float> g;
    benchmark::DoNotOptimize(conv3(g, x, w, b, 1, 1).value().data());
  }
  state.SetItemsProcessed(state.iterations() * c * c * 27 * n * n * n);
}
BENCHMARK(BM_Conv3Forward)->Args({16, 32})->Args({32, 16})->Args({16, 64})->Unit(benchmark::kMillisecond);

void BM_Conv3Backward(benchmark::State& state) {
  const auto c = state.range(0), n = state.range(1);
  Tensor<float> x(noise(Shape{c, n, n, n}, 1), true);
  Tensor<float> w(noise(Shape{c, c, 3, 3, 3}, 2, 0.1), true);
  Tensor<float> b(Array<float>(Shape{c}), true);
  for (auto _ : state) {
    Graph<float> g;
    const auto y = conv3(g, x, w, b, 1, 1);
    g.backward(sum(g, y));
  }
}
BENCHMARK(BM_Conv3Backward)->Args({16, 32})->Args({32, 16})->Unit(benchmark::kMillisecond);

void BM_WarpVolume(benchmark::State& state) {
  const auto n = state.range(0);
  Tensor<float> img(noise(Shape{1, n, n, n}, 3), true);
  Tensor<float> field(noise(Shape{3, n, n, n}, 4, 2.0), true);
  for (auto _ : state) {
    Graph<float> g;
    const auto y = warp_volume(g, img, field);
    g.backward(sum(g, y));
  }
  state.SetItemsProcessed(state.iterations() * n * n * n);
}
BENCHMARK(BM_WarpVolume)->Arg(32)->Arg(64)->Unit(benchmark::kMillisecond);

// One optimization step of the per-patch loop: forward, loss, backward, Adam.
void BM_TrainingStep(benchmark::State& state) {
  const auto n = state.range(0);
  const int phases = 4;
  UNetConfig cfg;
  cfg.in_channels = phases;
  UNetParams<float> params = init_params<float>(cfg, 7);
  const Array<float> images = noise(Shape{phases, n, n, n}, 5);
  const Tensor<float> input(images);
  LossWeights weights;
  weights.displacement_cap = static_cast<double>(n) / 2;
  AdamState<float> adam;
  AdamConfig ac;
  for (auto _ : state) {
    Graph<float> g;
    register_parameters(g, params);
    std::vector<Tensor<float>> ptensors = params.tensors();
    const auto fields = forward(g, params, input);
    const auto terms = total_loss(g, images, fields, nullptr, SeamContext<float>{}, weights);
    g.zero_parameter_grads();
    g.backward(terms.total);
    adam_step<float>(ptensors, adam, ac);
  }
}
BENCHMARK(BM_TrainingStep)->Arg(16)->Arg(32)->Unit(benchmark::kMillisecond);

}  // namespace
BENCHMARK_MAIN();
