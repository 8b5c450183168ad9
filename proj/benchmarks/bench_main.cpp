#include <benchmark/benchmark.h>

#include <numeric>

#include "metaval/data.hpp"
#include "metaval/meta_engine.hpp"
#include "metaval/nn.hpp"
#include "metaval/oracles.hpp"
#include "metaval/utility_select.hpp"

using namespace metaval;

namespace {

Dataset preset_like(std::size_t per_class) {
  return inject_symmetric(gen_synthetic({SyntheticKind::kGaussianBlobs, 4, per_class, 2, 0.35}, 1), 0.4, 2);
}

void BM_ForwardBackward(benchmark::State& state) {
  const auto width = static_cast<std::size_t>(state.range(0));
  const auto m = MlpModel::init({2, width, width, 4}, 3);
  const Vec x{0.3, -0.7};
  const Vec y{0.0, 1.0, 0.0, 0.0};
  for (auto _ : state) {
    const auto tr = forward(m, x);
    benchmark::DoNotOptimize(backward(m, tr, y));
  }
}
BENCHMARK(BM_ForwardBackward)->Arg(16)->Arg(32)->Arg(128);

void BM_GreedyLower(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  const auto f = oracle::random_feature_table(n, 4, 32, 5);
  std::vector<std::size_t> pool(n);
  std::iota(pool.begin(), pool.end(), 0);
  for (auto _ : state) benchmark::DoNotOptimize(greedy_lower(pool, f, 50));
  state.SetComplexityN(static_cast<benchmark::IterationCount>(n));
}
BENCHMARK(BM_GreedyLower)->Arg(200)->Arg(400)->Arg(800)->Complexity();

void BM_MaxUtility(benchmark::State& state) {
  const auto f = oracle::random_feature_table(800, 4, 32, 6);
  std::vector<std::size_t> pool(800);
  std::iota(pool.begin(), pool.end(), 0);
  for (auto _ : state) benchmark::DoNotOptimize(max_utility(pool, pool, f, {10, 50}, 800));
}
BENCHMARK(BM_MaxUtility);

void BM_MetaTrainStep(benchmark::State& state) {
  const auto ds = preset_like(500);
  const auto m = MlpModel::init({2, 32, 32, 4}, 7);
  const LrSchedule sched{0.1, 0.001, 200, 1.0};
  MetaBatch batch;
  batch.train_indices.resize(static_cast<std::size_t>(state.range(0)));
  std::iota(batch.train_indices.begin(), batch.train_indices.end(), 0);
  for (std::size_t i = 1000; i < 1040; ++i) batch.val_set.push_back(i);
  Rng rng = make_rng(8, 0);
  for (auto _ : state) benchmark::DoNotOptimize(meta_train_step(m, ds, batch, sched, 0, MetaConfig{}, rng));
}
BENCHMARK(BM_MetaTrainStep)->Arg(32)->Arg(100);

}  // namespace
BENCHMARK_MAIN();
