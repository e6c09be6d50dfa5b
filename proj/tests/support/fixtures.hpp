// SPDX-License-Identifier: Apache-2.0
// Trained models shared across slow tests. Each one is trained once per
// process and cached.
#pragma once

#include <cstdint>
#include <memory>

#include "dha/task.hpp"
#include "dha/training.hpp"

namespace dha::fixture {

/// 4 layers, 8 heads of width 8, sized to the task's sequences.
ModelConfig toy_model_config();
TaskConfig toy_task_config();

struct Baseline {
  std::shared_ptr<const SyntheticLmTask> task;
  TrainResult trained;
  HeadTies ties;  // empty unless planted
};

/// MHA baseline whose key/value heads come in identical random pairs.
const Baseline& planted_baseline(std::uint64_t seed, std::size_t steps = 300);

/// Ordinary MHA baseline.
const Baseline& plain_baseline(std::uint64_t seed, std::size_t steps = 600);

/// One shared task instance (deterministic for toy_task_config()).
std::shared_ptr<const SyntheticLmTask> toy_task();

}  // namespace dha::fixture
