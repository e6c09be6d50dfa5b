// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <cstdint>

#include "dha/linalg.hpp"
#include "dha/model.hpp"

namespace dha {

struct TaskConfig {
  std::size_t vocab_size = 64;
  std::size_t seq_len = 65;  // tokens per sequence (64 predictions)
  std::size_t train_sequences = 4096;
  std::size_t val_sequences = 64;
  double sharpness = 2.5;     // scale of the transition logits
  std::uint64_t seed = 1;

  void validate() const;
  bool operator==(const TaskConfig&) const = default;
};

/// Seeded order-2 Markov language. The next-token distribution after
/// (a, b) is softmax(sharpness * (B[b] + C[a])) with Gaussian tables B and
/// C, so predicting well needs the previous token (residual path) and the
/// one before it (attention). Train and validation sequences are distinct.
class SyntheticLmTask {
 public:
  explicit SyntheticLmTask(const TaskConfig& config);

  const TaskConfig& config() const noexcept { return config_; }
  const TokenBatch& train() const noexcept { return train_; }
  const TokenBatch& validation() const noexcept { return validation_; }

  /// Deterministic batch for a training step: a sliding window over the
  /// training set in a fixed seeded order.
  TokenBatch train_batch(std::size_t step, std::size_t batch_size) const;

  /// First `count` validation sequences (all when count is 0 or too large).
  TokenBatch validation_batch(std::size_t count = 0) const;

  /// Exact mean next-token entropy of the generating chain over the
  /// validation set (a lower bound on achievable validation loss).
  double validation_entropy() const;

 private:
  TokenSequence sample(std::uint64_t stream) const;
  Matrix transition(std::uint32_t a, std::uint32_t b) const;

  TaskConfig config_;
  Matrix by_last_;      // B: vocab x vocab
  Matrix by_previous_;  // C: vocab x vocab
  TokenBatch train_;
  TokenBatch validation_;
  std::vector<std::size_t> order_;
};

}  // namespace dha
