// SPDX-License-Identifier: Apache-2.0
#include "dha/training.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "dha/errors.hpp"
#include "dha/optim.hpp"

namespace dha {

namespace {

void tie_gradients(ToyModel& grad, const HeadTies& ties) {
  auto average = [](std::vector<Matrix>& heads, const HeadGroups& groups) {
    for (const auto& g : groups) {
      Matrix mean(heads[g[0]].rows(), heads[g[0]].cols());
      for (std::size_t h : g) mean += heads[h];
      mean *= 1.0 / static_cast<double>(g.size());
      for (std::size_t h : g) heads[h] = mean;
    }
  };
  for (std::size_t l = 0; l < grad.attention.size(); ++l) {
    if (l < ties.key.size()) average(grad.attention[l].w_k, ties.key[l]);
    if (l < ties.value.size()) average(grad.attention[l].w_v, ties.value[l]);
  }
}

void check_finite(double loss, std::size_t step) {
  if (!std::isfinite(loss)) throw TrainingError("training loss diverged", step);
}

TrainResult train_loop(ToyModel model, const SyntheticLmTask& task, const TrainConfig& cfg,
                       const HeadTies* ties) {
  model.validate();
  if (cfg.batch_size == 0) throw ConfigError("batch size must be >= 1");
  const TokenBatch val = task.validation_batch(cfg.val_sequences);
  TrainResult result;
  Adam adam;
  ModelGrad grad;
  auto log_due = [&](std::size_t s) {
    return s == 0 || s == cfg.steps || (cfg.log_every > 0 && s % cfg.log_every == 0);
  };
  for (std::size_t s = 0; s < cfg.steps; ++s) {
    const TokenBatch batch = task.train_batch(cfg.batch_offset + s, cfg.batch_size);
    const double loss = lm_loss_and_grad(model, batch, nullptr, grad);
    check_finite(loss, s);
    LossPoint pt{s, loss};
    if (log_due(s)) pt.val_loss = lm_loss(model, val);
    result.curve.push_back(pt);
    if (ties) tie_gradients(grad.model, *ties);
    auto params = parameter_pointers(model);
    auto grads = parameter_pointers(std::as_const(grad.model));
    adam.step(params, grads, cosine_lr(cfg.lr, s, cfg.steps, cfg.min_lr_fraction));
  }
  result.final_val_loss = lm_loss(model, val);
  check_finite(result.final_val_loss, cfg.steps);
  result.curve.push_back(LossPoint{cfg.steps, std::numeric_limits<double>::quiet_NaN(),
                                   result.final_val_loss});
  result.model = std::move(model);
  return result;
}

}  // namespace

HeadTies random_pair_ties(std::size_t n_layers, std::size_t n_heads, std::uint64_t seed) {
  if (n_heads % 2 != 0) throw ConfigError("pair ties need an even head count");
  std::mt19937_64 rng(seed);
  auto pairs = [&] {
    std::vector<std::size_t> idx(n_heads);
    std::iota(idx.begin(), idx.end(), 0);
    std::shuffle(idx.begin(), idx.end(), rng);
    HeadGroups g;
    for (std::size_t i = 0; i < n_heads; i += 2) g.push_back({std::min(idx[i], idx[i + 1]), std::max(idx[i], idx[i + 1])});
    std::sort(g.begin(), g.end());
    return g;
  };
  HeadTies t;
  for (std::size_t l = 0; l < n_layers; ++l) {
    t.key.push_back(pairs());
    t.value.push_back(pairs());
  }
  return t;
}

void apply_ties(ToyModel& model, const HeadTies& ties) {
  for (std::size_t l = 0; l < model.attention.size(); ++l) {
    auto& a = model.attention[l];
    if (l < ties.key.size()) {
      validate_partition(ties.key[l], a.w_k.size());
      for (const auto& g : ties.key[l])
        for (std::size_t h : g) a.w_k[h] = a.w_k[g[0]];
    }
    if (l < ties.value.size()) {
      validate_partition(ties.value[l], a.w_v.size());
      for (const auto& g : ties.value[l])
        for (std::size_t h : g) a.w_v[h] = a.w_v[g[0]];
    }
  }
}

TrainResult train_mha_baseline(const SyntheticLmTask& task, const ModelConfig& config,
                               std::uint64_t seed, const TrainConfig& train,
                               const HeadTies* ties) {
  if (config.vocab_size != task.config().vocab_size) {
    throw ConfigError("model vocabulary differs from the task vocabulary");
  }
  ToyModel model = ToyModel::init(config, seed);
  if (ties) apply_ties(model, *ties);
  return train_loop(std::move(model), task, train, ties);
}

TrainResult run_continued_pretraining(ToyModel model, const SyntheticLmTask& task,
                                      const TrainConfig& train) {
  return train_loop(std::move(model), task, train, nullptr);
}

FusionObjective fusion_objective(const ToyModel& model, const TokenBatch& batch,
                                 const FusionOperator& op, const LagrangeState& lag,
                                 const MarginSchedule& sched, double penalty_scale) {
  FusionObjective obj;
  obj.lm_loss = lm_loss(model, batch, &op);
  obj.fusion_loss = fusion_loss(op);
  obj.total = obj.lm_loss + penalty_scale * constrained_penalty(obj.fusion_loss, sched, lag);
  return obj;
}

FusionObjective fusion_objective_and_grad(const ToyModel& model, const TokenBatch& batch,
                                          const FusionOperator& op, const LagrangeState& lag,
                                          const MarginSchedule& sched, double penalty_scale,
                                          ModelGrad& grad) {
  FusionObjective obj;
  obj.lm_loss = lm_loss_and_grad(model, batch, &op, grad);
  obj.fusion_loss = fusion_loss(op);
  obj.total = obj.lm_loss + penalty_scale * constrained_penalty(obj.fusion_loss, sched, lag);
  if (obj.fusion_loss > margin(sched) && lag.lambda > 0.0) {
    const FusionOperator fg = fusion_loss_grad(op);
    const double w = penalty_scale * lag.lambda;
    for (std::size_t i = 0; i < fg.layers.size(); ++i) {
      grad.fusion.layers[i].key.omega += fg.layers[i].key.omega * w;
      grad.fusion.layers[i].value.omega += fg.layers[i].value.omega * w;
    }
  }
  return obj;
}

FusionPhaseResult run_fusion_phase(ToyModel model, FusionOperator op, LagrangeState lag,
                                   const SyntheticLmTask& task, const FusionPhaseConfig& config) {
  model.validate();
  config.schedule.validate();
  if (!(config.terminate_loss > 0.0)) throw ConfigError("fusion termination loss must be positive");
  if (!(config.penalty_scale > 0.0)) throw ConfigError("fusion penalty scale must be positive");
  if (model.variant != AttentionVariant::kMha) {
    throw TopologyError("the fusion phase starts from an MHA model");
  }
  const TokenBatch val = task.validation_batch(config.val_sequences);
  FusionPhaseResult result;
  result.val_loss_before = lm_loss(model, val, &op);

  Adam model_adam;
  Adam fusion_adam;
  ModelGrad grad;
  MarginSchedule sched = config.schedule;
  for (std::size_t s = 0; s < config.max_steps; ++s) {
    sched.step = s;
    const TokenBatch batch = task.train_batch(config.batch_offset + s, config.batch_size);
    const double fl = fusion_loss(op);
    const double t = margin(sched);
    if (fl < config.terminate_loss) {
      result.trace.push_back({s, lm_loss(model, batch, &op), fl, t, lag.lambda});
      result.converged = true;
      break;
    }
    const FusionObjective obj =
        fusion_objective_and_grad(model, batch, op, lag, sched, config.penalty_scale, grad);
    check_finite(obj.total, s);
    result.trace.push_back({s, obj.lm_loss, fl, t, lag.lambda});

    auto params = parameter_pointers(model);
    auto grads = parameter_pointers(std::as_const(grad.model));
    model_adam.step(params, grads, cosine_lr(config.lr_model, s, config.max_steps));
    auto omegas = omega_pointers(op);
    auto omega_grads = omega_pointers(std::as_const(grad.fusion));
    fusion_adam.step(omegas, omega_grads, cosine_lr(config.lr_fusion, s, config.max_steps));
    lag = lagrange_step(lag, fl, t);
    result.steps_run = s + 1;
  }
  if (!result.converged && !result.trace.empty()) {
    // one final check after the last update
    const double fl = fusion_loss(op);
    result.converged = fl < config.terminate_loss;
  }
  result.val_loss_after = lm_loss(model, val, &op);
  result.model = std::move(model);
  result.op = std::move(op);
  result.lagrange = lag;
  return result;
}

}  // namespace dha
