#include <random>

#include <benchmark/benchmark.h>

#include "mad/attacks.hpp"
#include "mad/meta.hpp"
#include "mad/model.hpp"

namespace {

using namespace mad;

LabeledImages random_batch(std::size_t count, const ImageShape& shape, int classes) {
  std::mt19937_64 rng(1);
  std::uniform_real_distribution<float> u(0.0f, 1.0f);
  LabeledImages d;
  d.shape = shape;
  d.pixels.resize(count * shape.size());
  for (auto& p : d.pixels) p = u(rng);
  for (std::size_t i = 0; i < count; ++i) d.labels.push_back(static_cast<int>(i % static_cast<std::size_t>(classes)));
  return d;
}

ModelSpec mnist_cnn(int width) {
  ModelSpec s;
  s.width = width;
  return s;
}

void BM_Forward(benchmark::State& state) {
  const auto m = build_model(mnist_cnn(static_cast<int>(state.range(0))), 1);
  const auto batch = random_batch(32, m.spec.input_shape, 10);
  for (auto _ : state) benchmark::DoNotOptimize(compute_logits(m, batch));
  state.SetItemsProcessed(state.iterations() * 32);
}
BENCHMARK(BM_Forward)->Arg(8)->Arg(12)->Unit(benchmark::kMillisecond);

void BM_LossAndGrad(benchmark::State& state) {
  const auto m = build_model(mnist_cnn(static_cast<int>(state.range(0))), 1);
  const auto batch = random_batch(32, m.spec.input_shape, 10);
  for (auto _ : state) benchmark::DoNotOptimize(loss_and_grad(m, batch));
  state.SetItemsProcessed(state.iterations() * 32);
}
BENCHMARK(BM_LossAndGrad)->Arg(8)->Arg(12)->Unit(benchmark::kMillisecond);

void BM_HessianVector(benchmark::State& state) {
  const auto m = build_model(mnist_cnn(8), 1);
  const auto batch = random_batch(16, m.spec.input_shape, 10);
  const std::vector<double> v(m.num_parameters(), 1e-3);
  for (auto _ : state) benchmark::DoNotOptimize(hessian_vector_product(m.spec, m.params, batch, v));
}
BENCHMARK(BM_HessianVector)->Unit(benchmark::kMillisecond);

void BM_Attack(benchmark::State& state) {
  const auto m = build_model(mnist_cnn(8), 1);
  const auto batch = random_batch(32, m.spec.input_shape, 10);
  const auto spec = default_attack_spec(static_cast<int>(state.range(0)));
  const ModelClassifier clf(m);
  for (auto _ : state) benchmark::DoNotOptimize(run_attack(spec, clf, batch, 3));
  state.SetLabel(spec.name);
}
BENCHMARK(BM_Attack)->Arg(13)->Arg(14)->Arg(18)->Arg(25)->Unit(benchmark::kMillisecond);

void BM_MetaEpoch(benchmark::State& state) {
  const auto m = build_model(mnist_cnn(8), 1);
  const ModelObjective obj(m.spec);
  MetaParams p;
  p.episodes_per_epoch = 2;
  p.second_order = state.range(0) != 0;
  const auto support = random_batch(60, m.spec.input_shape, 10);
  const auto query = random_batch(20, m.spec.input_shape, 10);
  const EpisodeSource source = [&](int, int) {
    Episode e;
    e.support.images = support;
    e.query.images = query;
    return e;
  };
  for (auto _ : state) benchmark::DoNotOptimize(meta_epoch(obj, m.params, p, 0, source));
}
BENCHMARK(BM_MetaEpoch)->Arg(0)->Arg(1)->Unit(benchmark::kMillisecond);

}  // namespace

BENCHMARK_MAIN();
