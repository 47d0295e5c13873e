#include <benchmark/benchmark.h>

#include "gdnsq/pipeline.hpp"
#include "gdnsq/quantizer.hpp"

namespace gdnsq {
namespace {

std::vector<double> random_values(std::size_t n, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<double> v(n);
  for (auto& x : v) x = rng.normal();
  return v;
}

void BM_Matmul(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  auto a = Tensor::from(random_values(n * n, 1), {n, n});
  auto b = Tensor::from(random_values(n * n, 2), {n, n});
  for (auto _ : state) benchmark::DoNotOptimize(matmul(a, b).data().data());
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(n * n * n));
}
BENCHMARK(BM_Matmul)->Arg(32)->Arg(128);

void BM_FakeQuantForward(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  FakeQuantizer q(SiteKind::weight, BoundsMode::free);
  q.set_range(-2.0, 2.0, 4.0);
  auto x = Tensor::from(random_values(n, 3), {n});
  NoGradGuard no_grad;
  for (auto _ : state) benchmark::DoNotOptimize(q.forward(x, nullptr).data().data());
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(n));
}
BENCHMARK(BM_FakeQuantForward)->Arg(1 << 12)->Arg(1 << 16);

void BM_FakeQuantBackward(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  FakeQuantizer q(SiteKind::weight, BoundsMode::free);
  q.set_range(-2.0, 2.0, 4.0);
  auto x = Tensor::from(random_values(n, 4), {n}, true);
  Rng rng(5);
  for (auto _ : state) {
    x.zero_grad();
    sum(q.forward(x, &rng)).backward();
  }
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(n));
}
BENCHMARK(BM_FakeQuantBackward)->Arg(1 << 12)->Arg(1 << 16);

void BM_QatStep(benchmark::State& state) {
  DataSource src;
  src.n_train = 640;
  src.n_val = 200;
  auto data = load_data(src);
  TeacherOptions opt;
  opt.epochs = 5;
  auto teacher = train_teacher(opt, data.train, data.val);
  Model student = Model::student_from(teacher.model);
  ptq_minmax(student, data.train);
  RunConfig config;
  config.epochs = 1000000;
  QatRunner runner(config, teacher.model.clone(), std::move(student), data.train, data.val);
  for (auto _ : state) benchmark::DoNotOptimize(runner.step().loss);
}
BENCHMARK(BM_QatStep);

void BM_FusedForward(benchmark::State& state) {
  const std::size_t in = 256, out = 256, rows = 64;
  QuantizedLayer layer;
  layer.weights = Tensor::from(random_values(in * out, 6), {in, out});
  layer.weight_quantizer.set_range(-3.0, 3.0, 4.0);
  layer.activation_quantizer.set_range(0.0, 3.0, 4.0);
  auto fused = integer_fuse(layer);
  auto x = random_values(rows * in, 7);
  for (auto _ : state) benchmark::DoNotOptimize(fused_forward(fused, x, rows).data());
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(rows * in * out));
}
BENCHMARK(BM_FusedForward);

}  // namespace
}  // namespace gdnsq

BENCHMARK_MAIN();
