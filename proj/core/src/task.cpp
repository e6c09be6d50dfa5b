// SPDX-License-Identifier: Apache-2.0
#include "dha/task.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <set>

#include "dha/errors.hpp"

namespace dha {

void TaskConfig::validate() const {
  if (vocab_size < 2) throw ConfigError("task vocabulary needs at least two tokens");
  if (seq_len < 3) throw ConfigError("task sequences need at least three tokens");
  if (train_sequences == 0 || val_sequences == 0) throw ConfigError("task splits must be non-empty");
  if (!(sharpness > 0.0)) throw ConfigError("task sharpness must be positive");
}

SyntheticLmTask::SyntheticLmTask(const TaskConfig& config) : config_(config) {
  config_.validate();
  const std::size_t v = config_.vocab_size;
  std::mt19937_64 rng(config_.seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  by_last_ = Matrix(v, v);
  by_previous_ = Matrix(v, v);
  for (double& x : by_last_.values()) x = normal(rng);
  for (double& x : by_previous_.values()) x = normal(rng);

  std::set<TokenSequence> seen;
  std::uint64_t stream = 0;
  auto draw_unique = [&](TokenBatch& out, std::size_t count) {
    while (out.size() < count) {
      TokenSequence s = sample(stream++);
      if (seen.insert(s).second) out.push_back(std::move(s));
    }
  };
  draw_unique(train_, config_.train_sequences);
  draw_unique(validation_, config_.val_sequences);

  order_.resize(train_.size());
  std::iota(order_.begin(), order_.end(), 0);
  std::shuffle(order_.begin(), order_.end(), rng);
}

Matrix SyntheticLmTask::transition(std::uint32_t a, std::uint32_t b) const {
  Matrix logits(1, config_.vocab_size);
  for (std::size_t n = 0; n < config_.vocab_size; ++n)
    logits(0, n) = config_.sharpness * (by_last_(b, n) + by_previous_(a, n));
  return softmax_rows(logits);
}

TokenSequence SyntheticLmTask::sample(std::uint64_t stream) const {
  std::mt19937_64 rng(config_.seed * 0x9E3779B97F4A7C15ull + stream + 1);
  std::uniform_int_distribution<std::uint32_t> first(0, static_cast<std::uint32_t>(config_.vocab_size - 1));
  std::uniform_real_distribution<double> u(0.0, 1.0);
  TokenSequence s{first(rng), first(rng)};
  while (s.size() < config_.seq_len) {
    const Matrix p = transition(s[s.size() - 2], s.back());
    double r = u(rng);
    std::uint32_t next = static_cast<std::uint32_t>(config_.vocab_size - 1);
    for (std::size_t n = 0; n < config_.vocab_size; ++n) {
      r -= p(0, n);
      if (r < 0.0) {
        next = static_cast<std::uint32_t>(n);
        break;
      }
    }
    s.push_back(next);
  }
  return s;
}

TokenBatch SyntheticLmTask::train_batch(std::size_t step, std::size_t batch_size) const {
  if (batch_size == 0) throw ConfigError("batch size must be >= 1");
  TokenBatch batch;
  batch.reserve(batch_size);
  for (std::size_t i = 0; i < batch_size; ++i)
    batch.push_back(train_[order_[(step * batch_size + i) % order_.size()]]);
  return batch;
}

TokenBatch SyntheticLmTask::validation_batch(std::size_t count) const {
  if (count == 0 || count >= validation_.size()) return validation_;
  return TokenBatch(validation_.begin(), validation_.begin() + static_cast<std::ptrdiff_t>(count));
}

double SyntheticLmTask::validation_entropy() const {
  double total = 0.0;
  std::size_t n = 0;
  for (const auto& s : validation_) {
    // positions with a full two-token context only
    for (std::size_t i = 2; i < s.size(); ++i) {
      const Matrix p = transition(s[i - 2], s[i - 1]);
      for (double q : p.values())
        if (q > 0.0) total -= q * std::log(q);
      ++n;
    }
  }
  return total / static_cast<double>(n);
}

}  // namespace dha
