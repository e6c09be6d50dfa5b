// SPDX-License-Identifier: Apache-2.0
#include "cli.hpp"

#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <limits>

#include "CLI11.hpp"
#include "json.hpp"

#include "dha/checkpoint.hpp"
#include "dha/errors.hpp"
#include "dha/head_analysis.hpp"
#include "dha/pipeline.hpp"
#include "dha/report.hpp"
#include "dha/training.hpp"

namespace dha::cli {

namespace {

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;

struct Options {
  std::string out_dir;
  std::string checkpoint;
  std::uint64_t seed = 0;

  // train-baseline
  ModelConfig model;
  TaskConfig task;
  TrainConfig train;
  bool plant_duplicates = false;

  // transform / compare
  double kv_budget = 0.5;
  std::string score_mode = "cka";
  std::string baseline = "dha";
  PipelineConfig pipeline;
};

std::string default_out_dir() {
  const char* env = std::getenv(kOutDirEnv);
  return env && *env ? std::string(env) : std::string("dha_out");
}

KvCacheSpec report_spec(const ModelConfig& c) { return KvCacheSpec{1, c.max_seq, 2}; }

void write_json(const fs::path& path, const json& j) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out << j.dump(2) << '\n';
  if (!out) throw IoError("failed writing " + path.string());
}

json number_or_null(double v) { return std::isfinite(v) ? json(v) : json(nullptr); }

json topology_json(const DhaTopology& topo) {
  json layers = json::array();
  for (const auto& l : topo.layers)
    layers.push_back(json{{"key_heads", l.key_heads}, {"value_heads", l.value_heads}});
  return layers;
}

void add_pipeline_options(CLI::App* cmd, Options& o) {
  cmd->add_option("--checkpoint", o.checkpoint, "MHA checkpoint from train-baseline")->required();
  cmd->add_option("--kv-budget", o.kv_budget,
                  "key+value head budget: fraction (<= 1) of the MHA count or absolute count");
  cmd->add_option("--score-mode", o.score_mode, "head score for grouping")
      ->check(CLI::IsMember({"cka", "neg_mse"}));
  cmd->add_option("--search-steps", o.pipeline.search_steps);
  cmd->add_option("--fusion-steps", o.pipeline.fusion_max_steps);
  cmd->add_option("--ct-steps", o.pipeline.ct_steps);
  cmd->add_option("--margin-base", o.pipeline.margin_base);
  cmd->add_option("--warmup", o.pipeline.warmup_steps);
  cmd->add_option("--lr-model", o.pipeline.lr_model);
  cmd->add_option("--lr-fusion", o.pipeline.lr_fusion);
  cmd->add_option("--lr-lambda", o.pipeline.lr_lambda);
  cmd->add_option("--penalty-scale", o.pipeline.penalty_scale);
  cmd->add_option("--batch", o.pipeline.batch_size);
  cmd->add_option("--log-every", o.pipeline.log_every, "CT validation interval");
}

struct Prepared {
  LoadedModel loaded;
  PipelineConfig pipeline;
};

// Loads the source checkpoint and validates every override before any work.
Prepared prepare_pipeline(const Options& o) {
  Prepared p{load_model(o.checkpoint, AttentionVariant::kMha), o.pipeline};
  if (!p.loaded.task)
    throw ConfigError("checkpoint " + o.checkpoint + " carries no task description");
  p.loaded.task->validate();
  p.pipeline.seed = o.seed;
  p.pipeline.score_mode = parse_score_mode(o.score_mode);
  p.pipeline.kv_budget_total = resolve_kv_budget(p.loaded.model.config, o.kv_budget);
  p.pipeline.validate(p.loaded.model.config);
  return p;
}

int cmd_train_baseline(const Options& o, std::ostream& out) {
  o.model.validate();
  o.task.validate();
  if (o.model.vocab_size != o.task.vocab_size)
    throw ConfigError("model and task vocabularies differ");
  if (o.train.steps == 0 || o.train.batch_size == 0 || o.train.log_every == 0 || !(o.train.lr > 0.0))
    throw ConfigError("steps, batch, log interval and learning rate must be positive");
  ModelConfig model = o.model;
  model.max_seq = o.task.seq_len - 1;
  model.validate();

  const fs::path dir = o.out_dir;
  ensure_directory(dir);
  const SyntheticLmTask task(o.task);
  std::optional<HeadTies> ties;
  if (o.plant_duplicates) ties = random_pair_ties(model.n_layers, model.n_query_heads, o.seed + 1);
  const TrainResult r = train_mha_baseline(task, model, o.seed, o.train, ties ? &*ties : nullptr);

  save_model(dir / "baseline.ckpt", r.model, nullptr, &o.task);
  write_loss_curve(dir / "baseline_loss.csv", r.curve);
  write_metrics(dir / "metrics.json",
                {{"baseline", o.train.steps, r.final_val_loss, std::numeric_limits<double>::quiet_NaN(),
                  kv_cache_bytes(model, r.model.topology, report_spec(model)),
                  r.model.parameter_count()}});
  out << "final validation loss: " << format_number(r.final_val_loss) << '\n';
  out << "checkpoint: " << (dir / "baseline.ckpt").string() << '\n';
  return 0;
}

int cmd_analyze(const Options& o, std::ostream& out) {
  const LoadedModel loaded = load_model(o.checkpoint);
  const fs::path dir = o.out_dir;
  ensure_directory(dir);
  const auto& m = loaded.model;
  std::vector<RedundancyRow> rows;
  for (std::size_t l = 0; l < m.config.n_layers; ++l) {
    RedundancyRow row{l, 0.0, 0.0, 0.0};
    for (HeadKind kind : {HeadKind::kQuery, HeadKind::kKey, HeadKind::kValue}) {
      const SimilarityMatrix sim = head_similarity_matrix(m.attention, l, kind);
      write_similarity_csv(dir / ("similarity_l" + std::to_string(l) + "_" + to_string(kind) + ".csv"),
                           sim);
      const double red = sim.values.rows() >= 2 ? layer_redundancy(sim)
                                                : std::numeric_limits<double>::quiet_NaN();
      (kind == HeadKind::kQuery ? row.query : kind == HeadKind::kKey ? row.key : row.value) = red;
    }
    rows.push_back(row);
  }
  write_redundancy_csv(dir / "redundancy.csv", rows);
  out << "layer  q  k  v\n";
  for (const auto& r : rows) {
    out << r.layer << "  " << format_number(r.query) << "  " << format_number(r.key) << "  "
        << format_number(r.value) << '\n';
  }
  return 0;
}

int cmd_transform_gqa(const Options& o, Prepared& p, std::ostream& out) {
  const ToyModel& mha = p.loaded.model;
  const std::size_t per_layer = 2 * mha.config.n_layers;
  const std::size_t total = p.pipeline.kv_budget_total;
  if (total % per_layer != 0 || mha.config.n_query_heads % (total / per_layer) != 0)
    throw ConfigError("kv budget " + std::to_string(total) +
                      " has no uniform grouped-query layout for this model");
  const fs::path dir = o.out_dir;
  ensure_directory(dir);
  const SyntheticLmTask task(*p.loaded.task);
  ToyModel gqa = make_gqa_model(mha, total / per_layer);
  const double mha_val = lm_loss(mha, task.validation_batch(p.pipeline.val_sequences));

  TrainConfig tc;
  tc.steps = p.pipeline.ct_steps;
  tc.batch_size = p.pipeline.batch_size;
  tc.lr = p.pipeline.lr_model;
  tc.log_every = p.pipeline.log_every;
  tc.val_sequences = p.pipeline.val_sequences;
  tc.batch_offset = p.pipeline.search_steps + p.pipeline.fusion_max_steps;
  const TrainResult ct = run_continued_pretraining(gqa, task, tc);

  save_model(dir / "gqa.ckpt", ct.model, nullptr, &*p.loaded.task);
  write_loss_curve(dir / "ct_loss.csv", ct.curve);
  const auto spec = report_spec(mha.config);
  const std::uint64_t before = kv_cache_bytes(mha.config, mha.topology, spec);
  const std::uint64_t after = kv_cache_bytes(ct.model.config, ct.model.topology, spec);
  write_json(dir / "summary.json",
             json{{"command", "transform"},
                  {"variant", to_string(AttentionVariant::kGqa)},
                  {"seed", o.seed},
                  {"kv_heads_before", full_kv_heads(mha.config)},
                  {"kv_heads_after", ct.model.topology.total_kv_heads()},
                  {"kv_cache_bytes_before", before},
                  {"kv_cache_bytes_after", after},
                  {"kv_ratio", static_cast<double>(after) / static_cast<double>(before)},
                  {"mha_val_loss", mha_val},
                  {"init_val_loss", number_or_null(ct.curve.front().val_loss)},
                  {"final_val_loss", ct.final_val_loss},
                  {"ct_steps", tc.steps},
                  {"layers", topology_json(ct.model.topology)}});
  out << "gqa kv ratio " << format_number(static_cast<double>(after) / static_cast<double>(before))
      << ", final validation loss " << format_number(ct.final_val_loss) << '\n';
  return 0;
}

int cmd_transform(const Options& o, std::ostream& out) {
  Prepared p = prepare_pipeline(o);
  if (o.baseline == "gqa") return cmd_transform_gqa(o, p, out);

  const fs::path dir = o.out_dir;
  ensure_directory(dir);
  const ToyModel& mha = p.loaded.model;
  const SyntheticLmTask task(*p.loaded.task);
  const TransformResult r = transform_pipeline(mha, task, p.pipeline);

  save_model(dir / "dha.ckpt", r.model, nullptr, &*p.loaded.task);
  write_search_report(dir / "search.json", r.search, p.pipeline.score_mode);
  write_layer_losses(dir / "layer_losses.csv", r.search);
  write_fusion_trace(dir / "fusion_trace.csv", r.fusion.trace);
  write_loss_curve(dir / "ct_loss.csv", r.ct.curve);
  const auto spec = report_spec(mha.config);
  write_metrics(dir / "metrics.json", transform_metrics(mha, r, spec));

  const std::uint64_t before = kv_cache_bytes(mha.config, mha.topology, spec);
  const std::uint64_t after = kv_cache_bytes(r.model.config, r.model.topology, spec);
  const double fl = r.fusion.trace.empty() ? 0.0 : r.fusion.trace.back().fusion_loss;
  write_json(dir / "summary.json",
             json{{"command", "transform"},
                  {"variant", to_string(AttentionVariant::kDha)},
                  {"seed", o.seed},
                  {"kv_heads_before", full_kv_heads(mha.config)},
                  {"kv_heads_after", r.model.topology.total_kv_heads()},
                  {"kv_cache_bytes_before", before},
                  {"kv_cache_bytes_after", after},
                  {"kv_ratio", static_cast<double>(after) / static_cast<double>(before)},
                  {"mha_val_loss", r.mha_val_loss},
                  {"init_val_loss", number_or_null(r.ct.curve.front().val_loss)},
                  {"final_val_loss", r.ct.final_val_loss},
                  {"fusion", json{{"converged", r.fusion.converged},
                                  {"steps", r.fusion.steps_run},
                                  {"fusion_loss", fl},
                                  {"lambda", r.fusion.lagrange.lambda}}},
                  {"ct_steps", p.pipeline.ct_steps},
                  {"layers", topology_json(r.model.topology)}});
  out << "fusion " << (r.fusion.converged ? "converged" : "stopped") << " after "
      << r.fusion.steps_run << " steps (fusion loss " << format_number(fl) << ")\n";
  out << "dha kv ratio " << format_number(static_cast<double>(after) / static_cast<double>(before))
      << ", final validation loss " << format_number(r.ct.final_val_loss) << '\n';
  return 0;
}

int cmd_compare(const Options& o, std::ostream& out) {
  Prepared p = prepare_pipeline(o);
  const fs::path dir = o.out_dir;
  ensure_directory(dir);
  const SyntheticLmTask task(*p.loaded.task);
  const CompareResult r = compare_inits(p.loaded.model, task, p.pipeline);

  write_compare_curve(dir / "compare.csv", r);
  write_loss_curve(dir / "dha_ct_loss.csv", r.dha.ct.curve);
  write_loss_curve(dir / "gqa_ct_loss.csv", r.gqa.curve);

  std::size_t dha_lower = 0, gqa_lower = 0;
  json points = json::array();
  for (const auto& pt : r.points) {
    const char* lower = pt.dha_loss < pt.gqa_loss ? "dha" : pt.gqa_loss < pt.dha_loss ? "gqa" : "tie";
    dha_lower += pt.dha_loss < pt.gqa_loss;
    gqa_lower += pt.gqa_loss < pt.dha_loss;
    out << "step " << pt.step << ": " << lower << " lower (dha " << format_number(pt.dha_loss)
        << ", gqa " << format_number(pt.gqa_loss) << ")\n";
    points.push_back(json{{"step", pt.step}, {"lower", lower}});
  }
  const std::string verdict = dha_lower == r.points.size() ? "dha lower at every checkpoint"
                              : gqa_lower == r.points.size() ? "gqa lower at every checkpoint"
                              : dha_lower + gqa_lower == 0   ? "identical at every checkpoint"
                                                             : "mixed";
  out << "verdict: " << verdict << " (dha lower at " << dha_lower << "/" << r.points.size()
      << " checkpoints)\n";
  write_json(dir / "compare_summary.json",
             json{{"command", "compare"},
                  {"seed", o.seed},
                  {"kv_heads", r.dha.model.topology.total_kv_heads()},
                  {"gqa_groups", r.gqa_groups},
                  {"checkpoints", r.points.size()},
                  {"dha_lower", dha_lower},
                  {"gqa_lower", gqa_lower},
                  {"verdict", verdict},
                  {"points", points}});
  return 0;
}

}  // namespace

int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  Options o;
  o.out_dir = default_out_dir();

  CLI::App app{"Decoupled-head attention transform of toy MHA transformers"};
  app.require_subcommand(1);
  app.add_option("--out", o.out_dir, std::string("output directory (default $") + kOutDirEnv +
                                         " or ./dha_out)");
  app.add_option("--seed", o.seed, "random seed");

  auto* train = app.add_subcommand("train-baseline", "train a toy MHA model and save it");
  train->add_option("--steps", o.train.steps);
  train->add_option("--lr", o.train.lr);
  train->add_option("--batch", o.train.batch_size);
  train->add_option("--log-every", o.train.log_every);
  train->add_option("--layers", o.model.n_layers);
  train->add_option("--heads", o.model.n_query_heads);
  train->add_option("--head-dim", o.model.head_dim);
  train->add_option("--ffn-dim", o.model.ffn_dim);
  train->add_option("--vocab", o.task.vocab_size);
  train->add_option("--seq-len", o.task.seq_len, "tokens per training sequence");
  train->add_option("--train-sequences", o.task.train_sequences);
  train->add_option("--val-sequences", o.task.val_sequences);
  train->add_option("--task-seed", o.task.seed);
  train->add_flag("--plant-duplicates", o.plant_duplicates,
                  "keep random pairs of key/value heads identical during training");

  auto* analyze = app.add_subcommand("analyze", "head similarity and layer redundancy tables");
  analyze->add_option("--checkpoint", o.checkpoint)->required();

  auto* transform = app.add_subcommand("transform", "search, fuse and continue pretraining");
  add_pipeline_options(transform, o);
  transform->add_option("--baseline", o.baseline, "dha, or gqa for a mean-pooled baseline")
      ->check(CLI::IsMember({"dha", "gqa"}));

  auto* compare = app.add_subcommand("compare", "DHA init vs GQA init under one budget");
  add_pipeline_options(compare, o);

  for (auto* sub : {train, analyze, transform, compare}) {
    sub->add_option("--out", o.out_dir, "output directory");
    sub->add_option("--seed", o.seed, "random seed");
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e, out, err);
  }
  o.model.vocab_size = o.task.vocab_size;

  try {
    if (train->parsed()) return cmd_train_baseline(o, out);
    if (analyze->parsed()) return cmd_analyze(o, out);
    if (transform->parsed()) return cmd_transform(o, out);
    return cmd_compare(o, out);
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << '\n';
    return 2;
  } catch (const StageError& e) {
    err << "stage '" << e.stage() << "' failed: " << e.what() << '\n';
    return 1;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return 1;
  }
}

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  std::vector<const char*> argv{"dha"};
  for (const auto& a : args) argv.push_back(a.c_str());
  return run(static_cast<int>(argv.size()), argv.data(), out, err);
}

}  // namespace dha::cli
