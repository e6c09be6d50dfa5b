// SPDX-License-Identifier: Apache-2.0
// Runs every acceptance criterion at its stated tolerance and prints one
// PASS/FAIL line per criterion. Exit status is nonzero if any fails.
#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <numeric>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "dha/checkpoint.hpp"
#include "dha/fusion.hpp"
#include "dha/head_analysis.hpp"
#include "dha/pipeline.hpp"
#include "dha/search.hpp"
#include "dha/training.hpp"
#include "fixtures.hpp"
#include "oracles.hpp"

namespace {

using namespace dha;
namespace fs = std::filesystem;

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.3g", v);
  return buf;
}

std::vector<HeadGroups> strided_groups(std::size_t layers, std::size_t heads, std::size_t n_groups) {
  std::vector<HeadGroups> out;
  for (std::size_t l = 0; l < layers; ++l) {
    HeadGroups g(n_groups);
    for (std::size_t h = 0; h < heads; ++h) g[(h + l) % n_groups].push_back(h);
    out.push_back(g);
  }
  return out;
}

TokenBatch random_inputs(std::size_t count, const ModelConfig& c, std::mt19937_64& rng) {
  std::uniform_int_distribution<std::size_t> len(1, c.max_seq);
  TokenBatch out;
  for (std::size_t i = 0; i < count; ++i) {
    const auto seqs = oracle::random_batch(1, len(rng), c.vocab_size, rng);
    out.push_back(seqs.front());
  }
  return out;
}

void randomize(FusionOperator& op, std::mt19937_64& rng) {
  std::normal_distribution<double> n(0.3, 0.5);
  for (auto& lf : op.layers)
    for (KindFusion* kf : {&lf.key, &lf.value})
      for (double& v : kf->omega.values()) v = n(rng);
}

Outcome init_equivalence() {
  const ModelConfig c = fixture::toy_model_config();
  const ToyModel m = ToyModel::init(c, 1);
  const auto gk = strided_groups(c.n_layers, c.n_query_heads, 2);
  const auto gv = strided_groups(c.n_layers, c.n_query_heads, 4);
  const FusionOperator op = init_identity(m.attention, gk, gv);
  std::mt19937_64 rng(2);
  const TokenBatch inputs = random_inputs(100, c, rng);
  const double diff = max_logit_diff(m, &op, m, nullptr, inputs);
  return {diff <= 1e-12, "max |logit diff| " + fmt(diff) + " over 100 inputs (limit 1e-12)"};
}

Outcome materialization_equivalence() {
  const ModelConfig c = fixture::toy_model_config();
  const ToyModel m = ToyModel::init(c, 3);
  const auto gk = strided_groups(c.n_layers, c.n_query_heads, 2);
  const auto gv = strided_groups(c.n_layers, c.n_query_heads, 4);
  FusionOperator op = init_identity(m.attention, gk, gv);
  std::mt19937_64 rng(4);
  randomize(op, rng);
  force_group_means(op);
  auto [params, topo] = materialize_dha(m.attention, op);
  ToyModel dha = m;
  dha.attention = params;
  dha.topology = topo;
  dha.variant = AttentionVariant::kDha;
  double layer_diff = 0.0;
  for (int i = 0; i < 100; ++i) {
    const std::size_t l = static_cast<std::size_t>(i) % c.n_layers;
    const Matrix x = oracle::random_matrix(1 + static_cast<std::size_t>(i) % c.max_seq, c.d_model(), rng);
    layer_diff = std::max(layer_diff, max_abs_diff(dha_forward(x, params[l], topo.layers[l]),
                                                   fused_forward(x, m.attention[l], op, l)));
  }
  const double logit_diff = max_logit_diff(dha, nullptr, m, &op, random_inputs(100, c, rng));
  return {layer_diff <= 1e-10 && logit_diff <= 1e-10,
          "attention " + fmt(layer_diff) + ", logits " + fmt(logit_diff) + " (limit 1e-10)"};
}

std::string parameter_class(const std::string& name) {
  if (name == "tok_emb" || name == "pos_emb" || name == "lm_head") return name;
  for (const char* cls : {"attn.q", "attn.k", "attn.v", "attn.o", "ffn"})
    if (name.find(cls) != std::string::npos) return cls;
  return name;
}

Outcome gradient_correctness() {
  ToyModel m = ToyModel::init({2, 2, 3, 6, 5, 6}, 5);
  const std::vector<HeadGroups> g(2, HeadGroups{{0, 1}});
  FusionOperator op = init_identity(m.attention, g, g);
  std::mt19937_64 rng(6);
  randomize(op, rng);
  const TokenBatch batch = oracle::random_batch(2, 6, 6, rng);
  const LagrangeState lag{0.8, 0.01};
  const MarginSchedule sched{0.999, 5, 5};
  const double scale = 100.0;
  ModelGrad grad = make_grad(m, &op);
  fusion_objective_and_grad(m, batch, op, lag, sched, scale, grad);
  auto objective = [&] { return fusion_objective(m, batch, op, lag, sched, scale).total; };

  std::map<std::string, std::pair<std::vector<double>, std::vector<double>>> by_class;
  std::vector<const Matrix*> grads;
  grad.model.for_each_parameter([&](const std::string&, const Matrix& x) { grads.push_back(&x); });
  std::size_t idx = 0;
  m.for_each_parameter([&](const std::string& name, Matrix& p) {
    auto& [a, n] = by_class[parameter_class(name)];
    const Matrix& gm = *grads[idx++];
    for (std::size_t i = 0; i < p.size(); ++i) {
      a.push_back(gm.values()[i]);
      n.push_back(oracle::central_difference(objective, p.values()[i], 1e-6));
    }
  });
  for (std::size_t l = 0; l < op.layers.size(); ++l)
    for (HeadKind kind : {HeadKind::kKey, HeadKind::kValue}) {
      auto& [a, n] = by_class["omega"];
      Matrix& w = op.at(l, kind).omega;
      for (std::size_t i = 0; i < w.size(); ++i) {
        a.push_back(grad.fusion.at(l, kind).omega.values()[i]);
        n.push_back(oracle::central_difference(objective, w.values()[i], 1e-6));
      }
    }
  double worst = 0.0;
  std::string worst_class;
  for (const auto& [cls, an] : by_class) {
    const double e = oracle::relative_error(an.first, an.second);
    if (e >= worst) {
      worst = e;
      worst_class = cls;
    }
  }
  return {worst <= 1e-5 && by_class.size() == 9,
          std::to_string(by_class.size()) + " parameter classes, worst relative error " + fmt(worst) +
              " (" + worst_class + ", limit 1e-5)"};
}

Outcome fusion_convergence() {
  bool pass = true;
  std::ostringstream detail;
  for (std::uint64_t seed : {1, 2, 3}) {
    const auto& base = fixture::planted_baseline(seed);
    const ToyModel& mha = base.trained.model;
    const std::size_t layers = mha.config.n_layers;
    std::vector<HeadGroups> gk, gv;
    for (std::size_t l = 0; l < layers; ++l) {
      for (HeadKind kind : {HeadKind::kKey, HeadKind::kValue}) {
        const ScoreMatrix s = head_score_matrix(mha.attention, l, kind, ScoreMode::kCka);
        (kind == HeadKind::kKey ? gk : gv)
            .push_back(anneal_grouping(s, mha.config.n_query_heads / 2, seed * 100 + 2 * l +
                                                                            (kind == HeadKind::kValue))
                           .groups);
      }
    }
    FusionPhaseConfig fc;
    const FusionPhaseResult r =
        run_fusion_phase(mha, init_identity(mha.attention, gk, gv), {}, *base.task, fc);
    const double fl = fusion_loss(r.op);
    const double rise = (r.val_loss_after - r.val_loss_before) / r.val_loss_before;
    const bool ok = r.converged && fl < 1e-3 && r.steps_run <= 1000 && rise <= 0.10;
    pass = pass && ok;
    detail << "seed " << seed << ": fusion loss " << fmt(fl) << " after " << r.steps_run
           << " steps, val loss " << fmt(r.val_loss_before) << " -> " << fmt(r.val_loss_after)
           << " (" << fmt(100.0 * rise) << "%); ";
  }
  return {pass, detail.str()};
}

Outcome better_init() {
  std::vector<std::vector<ComparePoint>> runs;
  std::ostringstream detail;
  for (std::uint64_t seed : {1, 2, 3}) {
    const auto& base = fixture::plain_baseline(seed);
    PipelineConfig pc;
    pc.seed = seed;
    pc.kv_budget_total = resolve_kv_budget(base.trained.model.config, 0.5);
    const CompareResult r = compare_inits(base.trained.model, *base.task, pc);
    runs.push_back(r.points);
    detail << "seed " << seed << " step 0: dha " << fmt(r.points.front().dha_loss) << " gqa "
           << fmt(r.points.front().gqa_loss) << "; ";
  }
  const std::size_t n = runs.front().size();
  std::size_t lower = 0;
  bool first = false;
  for (std::size_t i = 0; i < n; ++i) {
    double d = 0.0, g = 0.0;
    for (const auto& run : runs) {
      d += run.at(i).dha_loss;
      g += run.at(i).gqa_loss;
    }
    if (d < g) ++lower;
    if (i == 0) first = d < g;
  }
  const double frac = static_cast<double>(lower) / static_cast<double>(n);
  detail << "seed-averaged dha lower at " << lower << "/" << n << " checkpoints";
  return {first && frac >= 0.9, detail.str()};
}

std::set<std::set<std::size_t>> as_sets(const HeadGroups& g) {
  std::set<std::set<std::size_t>> out;
  for (const auto& m : g) out.insert({m.begin(), m.end()});
  return out;
}

Outcome grouping_quality() {
  std::mt19937_64 rng(7);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  double worst = 1.0;
  for (int i = 0; i < 20; ++i) {
    Matrix s(8, 8);
    for (std::size_t a = 0; a < 8; ++a) {
      s(a, a) = 1.0;
      for (std::size_t b = a + 1; b < 8; ++b) s(a, b) = s(b, a) = u(rng);
    }
    const double best = oracle::brute_force_best(s, 2);
    worst = std::min(worst, anneal_grouping({s}, 2, 1000 + i).score / best);
  }
  int recovered = 0;
  for (int i = 0; i < 10; ++i) {
    std::vector<std::size_t> order(8);
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), rng);
    const HeadGroups truth{{order.begin(), order.begin() + 4}, {order.begin() + 4, order.end()}};
    Matrix s(8, 8, 0.0);
    for (const auto& g : truth)
      for (std::size_t a : g)
        for (std::size_t b : g) s(a, b) = 1.0;
    recovered += as_sets(anneal_grouping({s}, 2, 2000 + i).groups) == as_sets(truth);
  }
  return {worst >= 0.95 && recovered == 10,
          "worst ratio to brute force " + fmt(worst) + " over 20 instances, planted blocks recovered " +
              std::to_string(recovered) + "/10"};
}

Outcome allocation_oracle() {
  std::mt19937_64 rng(8);
  std::uniform_real_distribution<double> u(0.01, 3.0);
  std::uniform_int_distribution<std::size_t> layers(1, 16);
  const std::vector<std::size_t> set{4, 8, 16};
  int matched = 0;
  bool invariants = true;
  for (int i = 0; i < 50; ++i) {
    const std::size_t n = layers(rng);
    std::vector<double> losses(n);
    for (auto& l : losses) l = u(rng);
    std::uniform_int_distribution<std::size_t> extra(0, 3 * n);
    const std::size_t total = 4 * (n + extra(rng));
    const auto got = allocate_layer_budgets(losses, total, set);
    matched += got == oracle::reference_allocation(losses, total);
    invariants = invariants && std::accumulate(got.begin(), got.end(), std::size_t{0}) == total &&
                 *std::min_element(got.begin(), got.end()) >= 4;
  }
  return {matched == 50 && invariants,
          std::to_string(matched) + "/50 match the reference procedure, sum and minimum " +
              (invariants ? "hold" : "violated")};
}

Outcome kv_cache_number() {
  const ModelConfig c{32, 32, 128, 32000, 32768, 11008};
  const std::uint64_t bytes = kv_cache_bytes(c, DhaTopology::identity(32, 32), {4, 32768, 2});
  return {bytes == 68719476736ULL, std::to_string(bytes) + " bytes"};
}

Outcome margin_schedule() {
  MarginSchedule s{0.999, 200, 0};
  const bool start = margin(s) == 1.0;
  s.step = 200;
  const bool end = margin(s) == 0.0;
  bool monotone = true;
  s.step = 0;
  double prev = margin(s);
  for (std::size_t i = 1; i < 1000; ++i) {
    s.step = i;
    const double t = margin(s);
    monotone = monotone && t <= prev && t >= 0.0;
    prev = t;
  }
  s.step = 100;
  // 0.999^100 * (1 - 100/200), with the power by repeated multiplication
  double p = 1.0;
  for (int i = 0; i < 100; ++i) p *= 0.999;
  const double spot = margin(s);
  const bool exact = std::abs(spot - 0.5 * p) <= 1e-15;
  return {start && end && monotone && exact,
          std::string("t(0)=1 ") + (start ? "ok" : "bad") + ", t(k)=0 " + (end ? "ok" : "bad") +
              ", monotone over 1000 steps " + (monotone ? "ok" : "bad") + ", t(100)=" + fmt(spot)};
}

Outcome checkpoint_round_trip() {
  const fs::path dir = fs::temp_directory_path() / "dha_acceptance_ckpt";
  fs::remove_all(dir);
  fs::create_directories(dir);
  const ModelConfig c = fixture::toy_model_config();
  const ToyModel m = ToyModel::init(c, 9);
  const TaskConfig task = fixture::toy_task_config();
  save_model(dir / "a.ckpt", m, nullptr, &task);
  const LoadedModel loaded = load_model(dir / "a.ckpt");
  save_model(dir / "b.ckpt", loaded.model, nullptr, &*loaded.task);
  auto bytes = [](const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    return std::string(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
  };
  const bool identical = bytes(dir / "a.ckpt") == bytes(dir / "b.ckpt");
  std::mt19937_64 rng(10);
  const double diff = max_logit_diff(m, nullptr, loaded.model, nullptr, random_inputs(20, c, rng));
  fs::remove_all(dir);
  return {identical && diff <= 1e-6, std::string("second save ") +
                                         (identical ? "byte-identical" : "differs") +
                                         ", max |logit diff| " + fmt(diff) + " (limit 1e-6)"};
}

Outcome cka_properties() {
  std::mt19937_64 rng(11);
  double worst = 0.0;
  for (int i = 0; i < 10; ++i) {
    const Matrix x = oracle::random_matrix(24, 4, rng);
    const Matrix y = oracle::random_matrix(24, 4, rng);
    // orthogonal 4x4 from Householder reflections
    Matrix q = Matrix::identity(4);
    for (int r = 0; r < 3; ++r) {
      const Matrix v = oracle::random_matrix(4, 1, rng);
      const double vv = frobenius_norm_sq(v);
      q = matmul(q, Matrix::identity(4) - matmul_nt(v, v) * (2.0 / vv));
    }
    const double base = cka(x, y);
    worst = std::max({worst, std::abs(cka(x * -2.5, y) - base), std::abs(cka(x, y * 1e3) - base),
                      std::abs(cka(matmul(x, q), y) - base), std::abs(cka(x, matmul(y, q)) - base)});
  }
  AttentionLayer layer = oracle::random_layer(8, 8, 8, 8, rng);
  for (std::size_t h = 1; h < 8; ++h) layer.w_k[h] = layer.w_k[0];
  const double red = layer_redundancy(head_similarity_matrix({layer}, 0, HeadKind::kKey));
  return {worst <= 1e-9 && red == 1.0,
          "worst invariance change " + fmt(worst) + " (limit 1e-9), duplicate-layer redundancy " +
              fmt(red)};
}

struct Criterion {
  int id;
  const char* name;
  double budget_seconds;
  std::function<Outcome()> run;
};

}  // namespace

int main() {
  const std::vector<Criterion> criteria{
      {1, "initialization equivalence", 10, init_equivalence},
      {2, "materialization equivalence", 10, materialization_equivalence},
      {3, "gradient correctness", 120, gradient_correctness},
      {4, "fusion convergence", 600, fusion_convergence},
      {5, "better initialization than GQA", 1200, better_init},
      {6, "grouping quality", 60, grouping_quality},
      {7, "allocation oracle equivalence", 1, allocation_oracle},
      {8, "KV-cache size", 1, kv_cache_number},
      {9, "margin schedule", 1, margin_schedule},
      {10, "checkpoint round trip", 10, checkpoint_round_trip},
      {11, "CKA and redundancy properties", 10, cka_properties},
  };
  int failures = 0;
  for (const auto& c : criteria) {
    const auto start = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = c.run();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    const double secs =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    const bool in_time = secs <= c.budget_seconds;
    const bool pass = o.pass && in_time;
    failures += !pass;
    std::printf("criterion %2d %-32s %s  %s [%.1fs, budget %.0fs%s]\n", c.id, c.name,
                pass ? "PASS" : "FAIL", o.detail.c_str(), secs, c.budget_seconds,
                in_time ? "" : ", over budget");
    std::fflush(stdout);
  }
  std::printf("%d of %zu criteria passed\n", static_cast<int>(criteria.size()) - failures,
              criteria.size());
  return failures == 0 ? 0 : 1;
}
