#include <benchmark/benchmark.h>

#include "dadt/attacks.hpp"
#include "dadt/diffusion.hpp"
#include "dadt/graph.hpp"
#include "dadt/metrics.hpp"
#include "dadt/models.hpp"
#include "dadt/purify.hpp"

using namespace dadt;

namespace {

// Same shape as the acceptance PDM; weights are random.
UNetConfig pixel_unet() {
  UNetConfig c;
  c.widths = {16, 32};
  c.res_blocks = 1;
  c.time_dim = 32;
  return c;
}

const DenoiserModel& pdm() {
  static const DenoiserModel m = [] {
    Rng init(1);
    return DenoiserModel(pixel_unet(), default_schedule(), init, "pdm");
  }();
  return m;
}

const LatentDiffusionModel& ldm() {
  static const LatentDiffusionModel m = [] {
    Rng init(2);
    AutoencoderConfig ac;
    Autoencoder ae(ac, init);
    UNetConfig u;
    u.channels = ac.latent_channels;
    u.height = u.width = 32 / ac.factor();
    return LatentDiffusionModel(std::move(ae), DenoiserModel(u, default_schedule(), init, "ldm"));
  }();
  return m;
}

Tensor image() { return Rng(3).uniform_tensor({1, 3, 32, 32}, 0, 1); }

void BM_Conv2dBackward(benchmark::State& state) {
  const auto c = static_cast<std::size_t>(state.range(0));
  Rng r(4);
  ComputationGraph g;
  Var x = g.input("x", {1, c, 32, 32});
  Var w = g.input("w", {c, c, 3, 3});
  Var b = g.input("b", {c});
  g.mark_output("loss", g.sum(g.conv2d(x, w, b, 1, 1)));
  Bindings bind;
  bind.bind("x", r.normal_tensor({1, c, 32, 32}));
  bind.bind("w", r.normal_tensor({c, c, 3, 3}));
  bind.bind("b", r.normal_tensor({c}));
  for (auto _ : state) benchmark::DoNotOptimize(gradient(g, bind, "loss", {"x", "w", "b"}));
}
BENCHMARK(BM_Conv2dBackward)->Arg(8)->Arg(32)->Unit(benchmark::kMillisecond);

void BM_PixelPredict(benchmark::State& state) {
  const Tensor x = image();
  for (auto _ : state) benchmark::DoNotOptimize(pdm().predict(x, 50));
}
BENCHMARK(BM_PixelPredict)->Unit(benchmark::kMillisecond);

void BM_PixelEdit(benchmark::State& state) {
  const Tensor x = image();
  const int t = static_cast<int>(state.range(0));
  for (auto _ : state) {
    Rng r(5);
    benchmark::DoNotOptimize(sdedit(pdm(), x, t, pdm().schedule(), r));
  }
}
BENCHMARK(BM_PixelEdit)->Arg(10)->Arg(30)->Unit(benchmark::kMillisecond);

void BM_LatentEdit(benchmark::State& state) {
  const Tensor x = image();
  for (auto _ : state) {
    Rng r(6);
    benchmark::DoNotOptimize(ldm_edit(ldm(), x, 30, r));
  }
}
BENCHMARK(BM_LatentEdit)->Unit(benchmark::kMillisecond);

void BM_AttackStep(benchmark::State& state) {
  const Tensor x = image();
  AttackModels models{&pdm(), &ldm()};
  AttackConfig c;
  c.iterations = 1;
  c.loss = state.range(0) ? LossKind::semantic_pixel : LossKind::semantic_latent;
  for (auto _ : state) benchmark::DoNotOptimize(run_attack(models, x, c));
}
BENCHMARK(BM_AttackStep)->Arg(0)->Arg(1)->Unit(benchmark::kMillisecond);

void BM_GridPure(benchmark::State& state) {
  const Tensor x = image();
  PurifyConfig c;
  c.method = PurifyMethod::grid_pure;
  for (auto _ : state) benchmark::DoNotOptimize(grid_pure(pdm(), x, c));
}
BENCHMARK(BM_GridPure)->Unit(benchmark::kMillisecond);

void BM_Ssim(benchmark::State& state) {
  Rng r(7);
  const Tensor a = r.uniform_tensor({3, 32, 32}, 0, 1), b = r.uniform_tensor({3, 32, 32}, 0, 1);
  for (auto _ : state) benchmark::DoNotOptimize(ssim(a, b));
}
BENCHMARK(BM_Ssim);

void BM_FrechetDistance(benchmark::State& state) {
  const auto d = static_cast<std::size_t>(state.range(0));
  Rng r(8);
  const Tensor a = r.normal_tensor({200, d}), b = r.normal_tensor({200, d});
  for (auto _ : state) benchmark::DoNotOptimize(frechet_distance(a, b));
}
BENCHMARK(BM_FrechetDistance)->Arg(16)->Arg(64)->Unit(benchmark::kMillisecond);

}  // namespace

BENCHMARK_MAIN();
