// SPDX-License-Identifier: Apache-2.0
#include <benchmark/benchmark.h>

#include <random>

#include "dha/attention.hpp"
#include "dha/fusion.hpp"
#include "dha/model.hpp"
#include "dha/search.hpp"
#include "dha/task.hpp"

namespace {

dha::Matrix random_matrix(std::size_t r, std::size_t c, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n(0.0, 1.0);
  dha::Matrix m(r, c);
  for (auto& v : m.values()) v = n(rng);
  return m;
}

void BM_Matmul(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  const auto a = random_matrix(n, n, 1);
  const auto b = random_matrix(n, n, 2);
  for (auto _ : state) benchmark::DoNotOptimize(dha::matmul(a, b));
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(n * n * n));
}
BENCHMARK(BM_Matmul)->Arg(64)->Arg(128)->Arg(256);

void BM_AttentionForward(benchmark::State& state) {
  dha::ModelConfig cfg;
  const auto model = dha::ToyModel::init(cfg, 3);
  const auto x = random_matrix(static_cast<std::size_t>(state.range(0)), cfg.d_model(), 4);
  for (auto _ : state) benchmark::DoNotOptimize(dha::mha_forward(x, model.attention[0]));
}
BENCHMARK(BM_AttentionForward)->Arg(32)->Arg(64)->Arg(128);

void BM_AnnealGrouping(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  auto s = random_matrix(n, n, 5);
  dha::ScoreMatrix m{dha::Matrix(n, n)};
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) m.scores(i, j) = 0.5 * (s(i, j) + s(j, i));
  std::uint64_t seed = 0;
  for (auto _ : state) benchmark::DoNotOptimize(dha::anneal_grouping(m, n / 4, ++seed));
}
BENCHMARK(BM_AnnealGrouping)->Arg(8)->Arg(32);

void BM_FusionTrainingStep(benchmark::State& state) {
  dha::ModelConfig cfg;
  dha::TaskConfig tc;
  tc.train_sequences = 64;
  tc.val_sequences = 8;
  const dha::SyntheticLmTask task(tc);
  const auto model = dha::ToyModel::init(cfg, 6);
  std::vector<dha::HeadGroups> groups(cfg.n_layers, dha::HeadGroups{{0, 1}, {2, 3}, {4, 5}, {6, 7}});
  const auto op = dha::init_identity(model.attention, groups, groups);
  auto grad = dha::make_grad(model, &op);
  const auto batch = task.train_batch(0, 8);
  for (auto _ : state) benchmark::DoNotOptimize(dha::lm_loss_and_grad(model, batch, &op, grad));
}
BENCHMARK(BM_FusionTrainingStep)->Unit(benchmark::kMillisecond);

}  // namespace

BENCHMARK_MAIN();
