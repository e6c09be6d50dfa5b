// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <cstdint>
#include <vector>

#include "dha/fusion.hpp"
#include "dha/model.hpp"
#include "dha/search.hpp"
#include "dha/task.hpp"
#include "dha/training.hpp"

namespace dha {

/// Settings of the search -> fusion -> continued-pretraining transform.
struct PipelineConfig {
  std::size_t kv_budget_total = 0;  // sum over layers of key + value heads; 0 = no compression
  std::size_t search_steps = 240;
  std::size_t search_batch_size = 4;
  std::size_t fusion_max_steps = 1000;
  double fusion_terminate_loss = kFusionTerminateLoss;
  double margin_base = 0.999;
  std::size_t warmup_steps = 200;
  std::size_t ct_steps = 200;
  double lr_model = 1e-4;
  double lr_fusion = 1e-2;
  double lr_lambda = 1e-2;
  double penalty_scale = 100.0;
  std::size_t batch_size = 8;
  std::size_t log_every = 20;
  std::size_t val_sequences = 0;  // 0 = whole validation split
  ScoreMode score_mode = ScoreMode::kCka;
  std::vector<std::size_t> alloc_set;  // empty = {H/4, H/2, H}
  bool per_channel = true;
  std::uint64_t seed = 0;

  /// Throws ConfigError on non-positive rates, zero step counts where a
  /// phase needs at least one, or an infeasible budget for `model`.
  void validate(const ModelConfig& model) const;
};

/// Full key+value head count of an MHA model (2 * L * H).
std::size_t full_kv_heads(const ModelConfig& config);

/// `value` <= 1 is a fraction of the full count, larger values are absolute.
/// Throws ConfigError when the result is not a whole, even head count.
std::size_t resolve_kv_budget(const ModelConfig& config, double value);

/// Allocation set used when PipelineConfig::alloc_set is empty.
std::vector<std::size_t> default_alloc_set(std::size_t n_heads);

struct KindSearch {
  std::vector<Matrix> pair_mse;        // per layer, mean activation MSE between heads
  std::vector<double> layer_losses;    // per layer, mean over head pairs of pair_mse
  std::vector<ScoreMatrix> scores;     // per layer
  std::vector<std::size_t> budget;     // per layer head count
  std::vector<HeadGroups> groups;      // per layer
  std::vector<double> group_scores;    // per layer grouping_score
};

struct SearchResult {
  KindSearch key;
  KindSearch value;
  std::size_t steps = 0;
};

/// Runs `search_steps` forward passes without touching the weights,
/// accumulating per-layer head-pair activation MSE for keys and values.
/// Budgets come from allocate_layer_budgets on the per-layer losses (one
/// half of the total budget per kind) fitted to head-count divisors; groups
/// come from anneal_grouping on the score matrix of `score_mode`.
SearchResult run_search_phase(const ToyModel& mha, const SyntheticLmTask& task,
                              const PipelineConfig& config);

struct TransformResult {
  ToyModel model;            // materialized DHA model after continued pretraining
  ToyModel initial_model;    // materialized DHA model before continued pretraining
  SearchResult search;
  std::vector<std::vector<std::size_t>> permutation;  // per layer
  FusionPhaseResult fusion;
  TrainResult ct;
  double mha_val_loss = 0.0;
};

/// search -> permute -> fusion -> materialize -> continued pretraining.
/// Errors are rethrown as StageError tagged with the failing stage.
TransformResult transform_pipeline(const ToyModel& mha, const SyntheticLmTask& task,
                                   const PipelineConfig& config);

/// Mean-pooled GQA model with n_groups key/value heads per layer.
ToyModel make_gqa_model(const ToyModel& mha, std::size_t n_groups);

struct ComparePoint {
  std::size_t step = 0;
  double dha_loss = 0.0;
  double gqa_loss = 0.0;
};

struct CompareResult {
  std::vector<ComparePoint> points;
  TransformResult dha;
  TrainResult gqa;
  std::size_t gqa_groups = 0;
};

/// Continued pretraining from a DHA-transformed init and from a mean-pooled
/// GQA init with the same KV budget, batches and step count. Validation
/// loss is logged every log_every steps. Throws ConfigError when no uniform
/// GQA layout matches the budget.
CompareResult compare_inits(const ToyModel& mha, const SyntheticLmTask& task,
                            const PipelineConfig& config);

}  // namespace dha
