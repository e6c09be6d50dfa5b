// SPDX-License-Identifier: Apache-2.0
#include "dha/pipeline.hpp"

#include <cmath>
#include <numeric>
#include <string>
#include <utility>

#include "dha/errors.hpp"

namespace dha {

namespace {

// Runs `fn` and re-raises any library error as a StageError for `stage`.
template <typename F>
auto run_stage(const char* stage, F&& fn) -> decltype(fn()) {
  try {
    return fn();
  } catch (const StageError&) {
    throw;
  } catch (const std::exception& e) {
    throw StageError(stage, e.what());
  }
}

std::vector<std::size_t> alloc_set_for(const PipelineConfig& c, std::size_t n_heads) {
  return c.alloc_set.empty() ? default_alloc_set(n_heads) : c.alloc_set;
}

std::size_t budget_total(const PipelineConfig& c, const ModelConfig& m) {
  return c.kv_budget_total == 0 ? full_kv_heads(m) : c.kv_budget_total;
}

std::vector<std::size_t> kind_budgets(std::span<const double> losses, std::size_t total,
                                      std::span<const std::size_t> alloc_set,
                                      std::size_t n_heads) {
  auto raw = allocate_layer_budgets(losses, total, alloc_set);
  return fit_budgets_to_heads(raw, losses, n_heads);
}

HeadGroups singleton_groups(std::size_t n) {
  HeadGroups g(n);
  for (std::size_t h = 0; h < n; ++h) g[h] = {h};
  return g;
}

void finish_kind(KindSearch& ks, const ToyModel& mha, HeadKind kind, const PipelineConfig& c,
                 std::size_t total) {
  const std::size_t n_layers = mha.config.n_layers;
  const std::size_t n_heads = mha.config.n_query_heads;
  const auto alloc = alloc_set_for(c, n_heads);
  ks.budget = kind_budgets(ks.layer_losses, total, alloc, n_heads);
  ks.scores.clear();
  ks.groups.clear();
  ks.group_scores.clear();
  for (std::size_t l = 0; l < n_layers; ++l) {
    ScoreMatrix sm;
    if (c.score_mode == ScoreMode::kCka) {
      sm = head_score_matrix(mha.attention, l, kind, ScoreMode::kCka);
    } else {
      sm.scores = ks.pair_mse[l];
      sm.scores *= -1.0;
    }
    HeadGroups groups;
    if (ks.budget[l] == n_heads) {
      groups = singleton_groups(n_heads);
    } else {
      const std::uint64_t stream =
          c.seed * 1000003ULL + 2 * l + (kind == HeadKind::kValue ? 1 : 0);
      groups = anneal_grouping(sm, ks.budget[l], stream).groups;
    }
    ks.group_scores.push_back(grouping_score(sm, groups));
    ks.groups.push_back(std::move(groups));
    ks.scores.push_back(std::move(sm));
  }
}

}  // namespace

std::size_t full_kv_heads(const ModelConfig& config) {
  return 2 * config.n_layers * config.n_query_heads;
}

std::size_t resolve_kv_budget(const ModelConfig& config, double value) {
  if (!std::isfinite(value) || value <= 0.0)
    throw ConfigError("kv budget must be positive, got " + std::to_string(value));
  const double full = static_cast<double>(full_kv_heads(config));
  const double heads = value <= 1.0 ? value * full : value;
  const double rounded = std::round(heads);
  if (std::abs(heads - rounded) > 1e-9 || rounded < 1.0)
    throw ConfigError("kv budget " + std::to_string(value) + " is not a whole head count");
  const auto n = static_cast<std::size_t>(rounded);
  if (n % 2 != 0) throw ConfigError("kv budget must split evenly between keys and values");
  if (n > full_kv_heads(config))
    throw ConfigError("kv budget " + std::to_string(n) + " exceeds the model's " +
                      std::to_string(full_kv_heads(config)) + " key/value heads");
  return n;
}

std::vector<std::size_t> default_alloc_set(std::size_t n_heads) {
  std::vector<std::size_t> s;
  for (std::size_t d : {n_heads / 4, n_heads / 2, n_heads})
    if (d > 0 && (s.empty() || s.back() != d)) s.push_back(d);
  return s;
}

void PipelineConfig::validate(const ModelConfig& model) const {
  model.validate();
  if (search_steps == 0) throw ConfigError("search phase needs at least one batch");
  if (search_batch_size == 0 || batch_size == 0) throw ConfigError("batch size must be positive");
  if (!(lr_model > 0.0) || !(lr_fusion > 0.0) || !(lr_lambda > 0.0))
    throw ConfigError("learning rates must be positive");
  if (!(penalty_scale > 0.0)) throw ConfigError("penalty scale must be positive");
  if (!(fusion_terminate_loss > 0.0)) throw ConfigError("terminate loss must be positive");
  if (log_every == 0) throw ConfigError("log_every must be positive");
  MarginSchedule{margin_base, warmup_steps, 0}.validate();

  const std::size_t total = budget_total(*this, model);
  if (total % 2 != 0) throw ConfigError("kv budget must split evenly between keys and values");
  if (total > full_kv_heads(model))
    throw ConfigError("kv budget " + std::to_string(total) + " exceeds the model's " +
                      std::to_string(full_kv_heads(model)) + " key/value heads");
  const auto alloc = alloc_set_for(*this, model.n_query_heads);
  if (alloc.back() > model.n_query_heads)
    throw ConfigError("allocation set entries cannot exceed the head count");
  std::vector<double> uniform(model.n_layers, 1.0);
  kind_budgets(uniform, total / 2, alloc, model.n_query_heads);
}

SearchResult run_search_phase(const ToyModel& mha, const SyntheticLmTask& task,
                              const PipelineConfig& config) {
  if (mha.variant != AttentionVariant::kMha) throw TopologyError("search expects an MHA model");
  config.validate(mha.config);
  const std::size_t n_layers = mha.config.n_layers;
  const std::size_t n_heads = mha.config.n_query_heads;

  SearchResult out;
  out.steps = config.search_steps;
  for (KindSearch* ks : {&out.key, &out.value})
    ks->pair_mse.assign(n_layers, Matrix(n_heads, n_heads, 0.0));

  std::size_t samples = 0;
  std::vector<Matrix> proj(n_heads);
  for (std::size_t step = 0; step < config.search_steps; ++step) {
    for (const auto& seq : task.train_batch(step, config.search_batch_size)) {
      if (seq.size() < 2) throw DomainError("search sequences need at least two tokens");
      const TokenSequence inputs(seq.begin(), seq.end() - 1);
      const auto xs = attention_inputs(mha, inputs);
      for (std::size_t l = 0; l < n_layers; ++l) {
        for (HeadKind kind : {HeadKind::kKey, HeadKind::kValue}) {
          const auto& w = heads_of(mha.attention[l], kind);
          for (std::size_t h = 0; h < n_heads; ++h) proj[h] = matmul(xs[l], w[h]);
          Matrix& acc = (kind == HeadKind::kKey ? out.key : out.value).pair_mse[l];
          const double count = static_cast<double>(proj[0].values().size());
          for (std::size_t i = 0; i < n_heads; ++i) {
            for (std::size_t j = i + 1; j < n_heads; ++j) {
              const auto a = proj[i].values();
              const auto b = proj[j].values();
              double s = 0.0;
              for (std::size_t k = 0; k < a.size(); ++k) s += (a[k] - b[k]) * (a[k] - b[k]);
              acc(i, j) += s / count;
            }
          }
        }
      }
      ++samples;
    }
  }

  const double pairs = static_cast<double>(n_heads * (n_heads - 1) / 2);
  for (KindSearch* ks : {&out.key, &out.value}) {
    ks->layer_losses.assign(n_layers, 0.0);
    for (std::size_t l = 0; l < n_layers; ++l) {
      Matrix& m = ks->pair_mse[l];
      double sum = 0.0;
      for (std::size_t i = 0; i < n_heads; ++i) {
        for (std::size_t j = i + 1; j < n_heads; ++j) {
          m(i, j) /= static_cast<double>(samples);
          m(j, i) = m(i, j);
          sum += m(i, j);
        }
      }
      ks->layer_losses[l] = pairs > 0.0 ? sum / pairs : 0.0;
    }
  }

  const std::size_t per_kind = budget_total(config, mha.config) / 2;
  finish_kind(out.key, mha, HeadKind::kKey, config, per_kind);
  finish_kind(out.value, mha, HeadKind::kValue, config, per_kind);
  return out;
}

TransformResult transform_pipeline(const ToyModel& mha, const SyntheticLmTask& task,
                                   const PipelineConfig& config) {
  run_stage("config", [&] {
    mha.validate();
    if (mha.variant != AttentionVariant::kMha)
      throw TopologyError("the transform starts from an MHA model");
    config.validate(mha.config);
    task.config().validate();
    if (task.config().vocab_size != mha.config.vocab_size)
      throw ConfigError("task vocabulary does not match the model");
    if (task.config().seq_len > mha.config.max_seq + 1)
      throw ConfigError("task sequences are longer than the model's position table");
    return 0;
  });

  TransformResult out{mha, mha, {}, {}, {mha, {}, {}, {}, false, 0, 0.0, 0.0}, {mha, {}, 0.0},
                      0.0};
  out.search = run_stage("search", [&] { return run_search_phase(mha, task, config); });

  const std::size_t n_layers = mha.config.n_layers;
  const std::size_t n_heads = mha.config.n_query_heads;
  ToyModel permuted = mha;
  std::vector<HeadGroups> key_groups(n_layers), value_groups(n_layers);
  run_stage("permute", [&] {
    for (std::size_t l = 0; l < n_layers; ++l) {
      auto perm = permutation_from_groups(out.search.key.groups[l], n_heads);
      permuted.attention[l] = permute_heads(mha.attention[l], perm);
      key_groups[l] = remap_groups(out.search.key.groups[l], perm);
      value_groups[l] = remap_groups(out.search.value.groups[l], perm);
      out.permutation.push_back(std::move(perm));
    }
    return 0;
  });

  const std::size_t search_batches = config.search_steps;
  out.fusion = run_stage("fusion", [&] {
    auto op = init_identity(permuted.attention, key_groups, value_groups, config.per_channel);
    FusionPhaseConfig fc;
    fc.max_steps = config.fusion_max_steps;
    fc.terminate_loss = config.fusion_terminate_loss;
    fc.lr_model = config.lr_model;
    fc.lr_fusion = config.lr_fusion;
    fc.penalty_scale = config.penalty_scale;
    fc.batch_size = config.batch_size;
    fc.batch_offset = search_batches;
    fc.val_sequences = config.val_sequences;
    fc.schedule = MarginSchedule{config.margin_base, config.warmup_steps, 0};
    LagrangeState lag;
    lag.lr_lambda = config.lr_lambda;
    return run_fusion_phase(permuted, std::move(op), lag, task, fc);
  });

  out.initial_model = run_stage("materialize", [&] {
    ToyModel dha = out.fusion.model;
    auto [params, topo] = materialize_dha(out.fusion.model.attention, out.fusion.op);
    dha.attention = std::move(params);
    dha.topology = std::move(topo);
    dha.variant = AttentionVariant::kDha;
    dha.validate();
    const std::size_t expected = budget_total(config, mha.config);
    if (dha.topology.total_kv_heads() != expected)
      throw ConfigError("materialized model has " + std::to_string(dha.topology.total_kv_heads()) +
                        " key/value heads, budget is " + std::to_string(expected));
    return dha;
  });

  out.mha_val_loss = out.fusion.val_loss_before;
  out.ct = run_stage("continued-pretraining", [&] {
    TrainConfig tc;
    tc.steps = config.ct_steps;
    tc.batch_size = config.batch_size;
    tc.lr = config.lr_model;
    tc.log_every = config.log_every;
    tc.val_sequences = config.val_sequences;
    tc.batch_offset = search_batches + config.fusion_max_steps;
    return run_continued_pretraining(out.initial_model, task, tc);
  });
  out.model = out.ct.model;
  return out;
}

ToyModel make_gqa_model(const ToyModel& mha, std::size_t n_groups) {
  if (mha.variant != AttentionVariant::kMha) throw TopologyError("GQA pooling expects an MHA model");
  ToyModel gqa = mha;
  auto [params, topo] = gqa_init_mean_pool(mha.attention, n_groups);
  gqa.attention = std::move(params);
  gqa.topology = std::move(topo);
  gqa.variant = AttentionVariant::kGqa;
  gqa.validate();
  return gqa;
}

CompareResult compare_inits(const ToyModel& mha, const SyntheticLmTask& task,
                            const PipelineConfig& config) {
  config.validate(mha.config);
  const std::size_t total = budget_total(config, mha.config);
  const std::size_t per_layer = 2 * mha.config.n_layers;
  if (total % per_layer != 0 || mha.config.n_query_heads % (total / per_layer) != 0)
    throw ConfigError("kv budget " + std::to_string(total) +
                      " has no uniform grouped-query layout for this model");

  CompareResult out{{}, transform_pipeline(mha, task, config), {mha, {}, 0.0}, total / per_layer};
  const std::size_t dha_total = out.dha.initial_model.topology.total_kv_heads();
  ToyModel gqa = make_gqa_model(mha, out.gqa_groups);
  if (gqa.topology.total_kv_heads() != dha_total)
    throw ConfigError("arms have different kv budgets: dha " + std::to_string(dha_total) +
                      ", gqa " + std::to_string(gqa.topology.total_kv_heads()));

  TrainConfig tc;
  tc.steps = config.ct_steps;
  tc.batch_size = config.batch_size;
  tc.lr = config.lr_model;
  tc.log_every = config.log_every;
  tc.val_sequences = config.val_sequences;
  tc.batch_offset = config.search_steps + config.fusion_max_steps;
  out.gqa = run_continued_pretraining(std::move(gqa), task, tc);

  const auto& a = out.dha.ct.curve;
  const auto& b = out.gqa.curve;
  for (std::size_t i = 0; i < a.size() && i < b.size(); ++i) {
    if (a[i].step != b[i].step || std::isnan(a[i].val_loss) || std::isnan(b[i].val_loss)) continue;
    out.points.push_back({a[i].step, a[i].val_loss, b[i].val_loss});
  }
  return out;
}

}  // namespace dha
