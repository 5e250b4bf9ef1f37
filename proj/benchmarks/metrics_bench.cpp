#include <benchmark/benchmark.h>

#include <random>

#include "mdml/metrics.hpp"

namespace {

using namespace mdml;

std::vector<ScoredSample> random_pool(std::size_t n) {
  std::mt19937_64 gen(11);
  std::uniform_real_distribution<double> u;
  std::vector<ScoredSample> pool(n);
  for (std::size_t i = 0; i < n; ++i) {
    pool[i].label = static_cast<int>(i % 2);
    pool[i].score = 0.3 * pool[i].label + 0.7 * u(gen);
  }
  return pool;
}

void BM_AucRoc(benchmark::State& state) {
  const auto pool = random_pool(static_cast<std::size_t>(state.range(0)));
  for (auto _ : state) benchmark::DoNotOptimize(auc_roc(pool));
  state.SetComplexityN(state.range(0));
}
BENCHMARK(BM_AucRoc)->RangeMultiplier(4)->Range(256, 65536)->Complexity(benchmark::oNLogN);

void BM_SelectThreshold(benchmark::State& state) {
  const auto pool = random_pool(static_cast<std::size_t>(state.range(0)));
  for (auto _ : state) benchmark::DoNotOptimize(select_threshold(pool).tau_star);
  state.SetComplexityN(state.range(0));
}
BENCHMARK(BM_SelectThreshold)->RangeMultiplier(4)->Range(256, 65536)->Complexity(benchmark::oNLogN);

}  // namespace
