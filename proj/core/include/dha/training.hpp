// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <cstdint>
#include <limits>
#include <vector>

#include "dha/fusion.hpp"
#include "dha/model.hpp"
#include "dha/task.hpp"

namespace dha {

struct TrainConfig {
  std::size_t steps = 600;
  std::size_t batch_size = 8;
  double lr = 3e-3;
  double min_lr_fraction = 0.1;
  std::size_t log_every = 50;   // validation loss every N steps (and at both ends)
  std::size_t val_sequences = 0;  // 0 = whole validation split
  std::size_t batch_offset = 0;   // first training-batch index
};

struct LossPoint {
  std::size_t step = 0;
  double train_loss = std::numeric_limits<double>::quiet_NaN();
  double val_loss = std::numeric_limits<double>::quiet_NaN();
};

struct TrainResult {
  ToyModel model;
  std::vector<LossPoint> curve;
  double final_val_loss = 0.0;
};

/// Heads whose key (value) weights are kept identical during baseline
/// training, one partition per layer. Used to plant exact redundancy.
struct HeadTies {
  std::vector<HeadGroups> key;
  std::vector<HeadGroups> value;
};

/// Random disjoint pairs of heads per layer (independently for keys and values).
HeadTies random_pair_ties(std::size_t n_layers, std::size_t n_heads, std::uint64_t seed);

/// Copies the first member's key/value weights onto the rest of each tie group.
void apply_ties(ToyModel& model, const HeadTies& ties);

/// Trains a fresh MHA model on the task with Adam and cosine decay. Tied
/// heads receive the group-mean gradient so they stay identical.
TrainResult train_mha_baseline(const SyntheticLmTask& task, const ModelConfig& config,
                               std::uint64_t seed, const TrainConfig& train,
                               const HeadTies* ties = nullptr);

/// Plain language-model training of an existing model (any variant).
TrainResult run_continued_pretraining(ToyModel model, const SyntheticLmTask& task,
                                      const TrainConfig& train);

struct FusionPhaseConfig {
  std::size_t max_steps = 1000;
  double terminate_loss = kFusionTerminateLoss;
  double lr_model = 1e-4;
  double lr_fusion = 1e-2;
  // Multiplies the hinge penalty (the fusion loss is normalized per element,
  // so its raw gradient is small next to the language-model gradient).
  double penalty_scale = 100.0;
  std::size_t batch_size = 8;
  std::size_t batch_offset = 0;
  std::size_t val_sequences = 0;
  MarginSchedule schedule;  // step is advanced internally
};

struct FusionTracePoint {
  std::size_t step = 0;
  double lm_loss = 0.0;
  double fusion_loss = 0.0;
  double margin = 0.0;
  double lambda = 0.0;
};

struct FusionPhaseResult {
  ToyModel model;
  FusionOperator op;
  LagrangeState lagrange;
  std::vector<FusionTracePoint> trace;
  bool converged = false;
  std::size_t steps_run = 0;
  double val_loss_before = 0.0;
  double val_loss_after = 0.0;
};

struct FusionObjective {
  double lm_loss = 0.0;
  double fusion_loss = 0.0;
  double total = 0.0;  // lm_loss + penalty_scale * constrained_penalty
};

/// Fusion-phase training objective for one batch.
FusionObjective fusion_objective(const ToyModel& model, const TokenBatch& batch,
                                 const FusionOperator& op, const LagrangeState& lag,
                                 const MarginSchedule& sched, double penalty_scale);

/// Same, plus its gradient with respect to the model and omega (`grad` is
/// overwritten).
FusionObjective fusion_objective_and_grad(const ToyModel& model, const TokenBatch& batch,
                                          const FusionOperator& op, const LagrangeState& lag,
                                          const MarginSchedule& sched, double penalty_scale,
                                          ModelGrad& grad);

/// Alternating max-min optimisation: per batch one Adam descent step on
/// the model parameters and the fusion coefficients for
///   lm_loss + penalty_scale * lambda * max(fusion_loss - margin, 0)
/// followed by one projected ascent step on lambda. Stops as soon as
/// fusion_loss drops below terminate_loss (checked before each update) or
/// after max_steps; `converged` reports which.
FusionPhaseResult run_fusion_phase(ToyModel model, FusionOperator op, LagrangeState lag,
                                   const SyntheticLmTask& task, const FusionPhaseConfig& config);

}  // namespace dha
