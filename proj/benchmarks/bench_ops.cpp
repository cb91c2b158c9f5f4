#include <benchmark/benchmark.h>

#include "pgd/coord.hpp"
#include "pgd/data.hpp"
#include "pgd/deform.hpp"
#include "pgd/losses.hpp"
#include "pgd/network.hpp"
#include "pgd/ops.hpp"
#include "pgd/random.hpp"
#include "pgd/trainer.hpp"

using namespace pgd;
using namespace pgd::ops;
using pgd::random::Rng;

namespace {

Tensor randn(Shape shape, std::uint64_t seed, double scale = 1.0, DType dtype = DType::f32) {
  Rng rng(seed);
  Tensor t = Tensor::empty(std::move(shape), dtype);
  for (std::int64_t i = 0; i < t.numel(); ++i) t.set(i, scale * rng.normal());
  return t;
}

ConvSpec random_spec(std::int64_t c, std::int64_t dilation = 1) {
  ConvSpec s = make_conv_spec(c, c, 3, 1, dilation, -1, true, DType::f32);
  s.weight = randn(s.weight.shape(), 7, 0.1);
  return s;
}

// Offsets of a few pixels and masks around 0.5, as a trained branch emits.
DeformField random_field(const ConvSpec& s, std::int64_t hw) {
  return {randn(expected_offset_shape(s, 1, hw, hw), 11, 1.5),
          Tensor::full(expected_mask_shape(s, 1, hw, hw), 0.5, DType::f32)};
}

}  // namespace

// Args: channels, spatial size.
static void BM_Conv2dForward(benchmark::State& state) {
  const std::int64_t c = state.range(0), hw = state.range(1);
  const ConvSpec s = random_spec(c);
  const Tensor x = randn({1, c, hw, hw}, 1);
  NoGradGuard ng;
  for (auto _ : state) benchmark::DoNotOptimize(conv2d(x, s));
  state.SetItemsProcessed(state.iterations() * c * c * 9 * hw * hw);
}
BENCHMARK(BM_Conv2dForward)->Args({16, 64})->Args({64, 32})->Args({128, 8})->Unit(benchmark::kMicrosecond);

static void BM_DeformConv2dForward(benchmark::State& state) {
  const std::int64_t c = state.range(0), hw = state.range(1);
  const ConvSpec s = random_spec(c);
  const Tensor x = randn({1, c, hw, hw}, 1);
  const DeformField f = random_field(s, hw);
  NoGradGuard ng;
  for (auto _ : state) benchmark::DoNotOptimize(deform_conv2d(x, f, s));
  state.SetItemsProcessed(state.iterations() * c * c * 9 * hw * hw);
}
BENCHMARK(BM_DeformConv2dForward)->Args({16, 64})->Args({64, 32})->Args({128, 8})->Unit(benchmark::kMicrosecond);

static void BM_DeformConv2dBackward(benchmark::State& state) {
  const std::int64_t c = state.range(0), hw = state.range(1);
  ConvSpec s = random_spec(c);
  s.weight.set_requires_grad(true);
  Tensor x = randn({1, c, hw, hw}, 1);
  x.set_requires_grad(true);
  DeformField f = random_field(s, hw);
  f.offsets.set_requires_grad(true);
  f.masks.set_requires_grad(true);
  for (auto _ : state) {
    const Tensor loss = sum(deform_conv2d(x, f, s));
    backward(loss);
    benchmark::DoNotOptimize(x.grad());
    x.zero_grad();
    s.weight.zero_grad();
    f.offsets.zero_grad();
    f.masks.zero_grad();
  }
}
BENCHMARK(BM_DeformConv2dBackward)->Args({16, 64})->Args({64, 32})->Unit(benchmark::kMicrosecond);

static void BM_CoordPool(benchmark::State& state) {
  const std::int64_t c = state.range(0), hw = state.range(1);
  const Tensor x = randn({1, c, hw, hw}, 3);
  NoGradGuard ng;
  for (auto _ : state) benchmark::DoNotOptimize(coord_pool(x).pooled);
  state.SetBytesProcessed(state.iterations() * c * hw * hw * static_cast<std::int64_t>(sizeof(float)));
}
BENCHMARK(BM_CoordPool)->Args({16, 64})->Args({64, 32})->Unit(benchmark::kMicrosecond);

static void BM_CombinedLoss(benchmark::State& state) {
  const std::int64_t hw = state.range(0);
  const Tensor probs = softmax_channels(randn({8, 3, hw, hw}, 5));
  Tensor labels = Tensor::empty({8, hw, hw}, DType::f32);
  Rng rng(9);
  for (std::int64_t i = 0; i < labels.numel(); ++i) labels.set(i, static_cast<double>(rng.below(3)));
  const LossConfig cfg;
  NoGradGuard ng;
  for (auto _ : state) benchmark::DoNotOptimize(combined_loss(probs, labels, cfg, LossPhase::NSFL));
}
BENCHMARK(BM_CombinedLoss)->Arg(64)->Unit(benchmark::kMicrosecond);

// Whole-network forward pass on a B×1×64×64 batch; arg 0 selects the
// no-localization variant, arg 1 the full model.
static void BM_NetworkForward(benchmark::State& state) {
  NetworkConfig cfg;
  if (state.range(0) == 0) cfg.use_localization_path = cfg.use_add_coord = cfg.use_coord_pool = false;
  const ModelState m = build(cfg, 0, DType::f32);
  const Tensor x = randn({state.range(1), 1, 64, 64}, 2, 0.3);
  NoGradGuard ng;
  for (auto _ : state) benchmark::DoNotOptimize(forward(m, x));
  state.SetItemsProcessed(state.iterations() * state.range(1));
}
BENCHMARK(BM_NetworkForward)->Args({0, 1})->Args({1, 1})->Args({1, 8})->Unit(benchmark::kMillisecond);

// One optimizer step (forward, loss, backward, Adam) on a batch of 8
// generated samples; this is the unit of training cost.
static void BM_TrainStep(benchmark::State& state) {
  ModelState m = build(NetworkConfig{}, 0, DType::f32);
  const auto data = generate(GenConfig{}, 8);
  const Batch b = make_batch(data, {0, 1, 2, 3, 4, 5, 6, 7}, DType::f32);
  AdamState adam;
  const LossConfig loss;
  for (auto _ : state) {
    m.zero_grad();
    const Tensor l = combined_loss(softmax_channels(forward(m, b.images)), b.labels, loss, LossPhase::FL);
    backward(l);
    adam_step(m, adam, AdamConfig{}, 1e-3);
  }
  state.SetItemsProcessed(state.iterations() * 8);
}
BENCHMARK(BM_TrainStep)->Unit(benchmark::kMillisecond);

BENCHMARK_MAIN();
