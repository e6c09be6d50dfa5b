// SPDX-License-Identifier: Apache-2.0
#include "fixtures.hpp"

#include <map>
#include <tuple>

namespace dha::fixture {

ModelConfig toy_model_config() {
  ModelConfig c;
  c.max_seq = toy_task_config().seq_len - 1;
  return c;
}

TaskConfig toy_task_config() { return TaskConfig{}; }

std::shared_ptr<const SyntheticLmTask> toy_task() {
  static const auto task = std::make_shared<const SyntheticLmTask>(toy_task_config());
  return task;
}

namespace {

const Baseline& cached(bool planted, std::uint64_t seed, std::size_t steps) {
  static std::map<std::tuple<bool, std::uint64_t, std::size_t>, Baseline> cache;
  const auto key = std::make_tuple(planted, seed, steps);
  auto it = cache.find(key);
  if (it != cache.end()) return it->second;
  const auto cfg = toy_model_config();
  Baseline b;
  b.task = toy_task();
  TrainConfig tc;
  tc.steps = steps;
  tc.log_every = 50;
  if (planted) b.ties = random_pair_ties(cfg.n_layers, cfg.n_query_heads, seed + 1);
  b.trained = train_mha_baseline(*b.task, cfg, seed, tc, planted ? &b.ties : nullptr);
  return cache.emplace(key, std::move(b)).first->second;
}

}  // namespace

const Baseline& planted_baseline(std::uint64_t seed, std::size_t steps) {
  return cached(true, seed, steps);
}

const Baseline& plain_baseline(std::uint64_t seed, std::size_t steps) {
  return cached(false, seed, steps);
}

}  // namespace dha::fixture
