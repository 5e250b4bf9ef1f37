#include <benchmark/benchmark.h>

#include <random>

#include "mdml/losses.hpp"
#include "mdml/model.hpp"
#include "mdml/tape.hpp"

namespace {

using namespace mdml;

ValueMatrix random_matrix(std::size_t rows, std::size_t cols, std::uint64_t seed) {
  std::mt19937_64 gen(seed);
  std::normal_distribution<double> d;
  ValueMatrix m(rows, cols);
  for (double& v : m.data()) v = d(gen);
  return m;
}

void BM_Matmul(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  const ValueMatrix a = random_matrix(n, n, 1);
  const ValueMatrix b = random_matrix(n, n, 2);
  for (auto _ : state) {
    Tape tape;
    Var c = tape.matmul(tape.constant(a), tape.constant(b));
    benchmark::DoNotOptimize(tape.value(c).data().data());
  }
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(n * n * n));
}
BENCHMARK(BM_Matmul)->Arg(64)->Arg(128)->Arg(256);

ModelState bench_model(std::size_t input, std::size_t latent, std::size_t hidden) {
  ModelConfig cfg;
  cfg.input_dim = input;
  cfg.latent_dim = latent;
  cfg.hidden_dim = hidden;
  return ModelState::initialize(cfg, 7);
}

// One inner step's forward and reverse sweep at the default model size.
void BM_InnerLossBackward(benchmark::State& state) {
  ModelState model = bench_model(20, 128, 256);
  const auto batch = static_cast<std::size_t>(state.range(0));
  const ValueMatrix x = random_matrix(batch, 20, 3);
  const std::vector<double> variance(20, 1.0);
  for (auto _ : state) {
    model.zero_grad();
    Tape tape;
    auto terms = inner_loss(tape, x, model, InnerLossConfig{}, variance);
    tape.backward(terms.total);
    benchmark::DoNotOptimize(tape.scalar(terms.total));
  }
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(batch));
}
BENCHMARK(BM_InnerLossBackward)->Arg(32)->Arg(64)->Arg(128);

void BM_OuterMetaGradient(benchmark::State& state) {
  ModelState model = bench_model(20, 128, 256);
  const auto q = static_cast<std::size_t>(state.range(0));
  const ValueMatrix id = random_matrix(q, 20, 4);
  const ValueMatrix ood = random_matrix(q, 20, 5);
  model.set_theta_frozen(true);
  for (auto _ : state) {
    model.zero_grad();
    Tape tape;
    auto terms = outer_loss(tape, id, ood, model, OuterLossConfig{});
    meta_gradient(tape, terms, model);
    benchmark::DoNotOptimize(tape.scalar(terms.total));
  }
}
BENCHMARK(BM_OuterMetaGradient)->Arg(20)->Arg(100);

void BM_AnomalyScore(benchmark::State& state) {
  const ModelState model = bench_model(20, 128, 256);
  const ValueMatrix x = random_matrix(2048, 20, 6);
  ScoringOptions opts;
  opts.threads = static_cast<std::size_t>(state.range(0));
  for (auto _ : state) benchmark::DoNotOptimize(anomaly_score(x, model, opts).data());
  state.SetItemsProcessed(state.iterations() * 2048);
}
BENCHMARK(BM_AnomalyScore)->Arg(1)->Arg(4);

}  // namespace
