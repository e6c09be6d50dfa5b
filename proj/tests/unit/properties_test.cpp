// SPDX-License-Identifier: Apache-2.0
// Randomized checks of structural properties across modules.
#include <gtest/gtest.h>

#include <algorithm>
#include <numeric>

#include "dha/errors.hpp"
#include "dha/fusion.hpp"
#include "dha/head_analysis.hpp"
#include "dha/pipeline.hpp"
#include "dha/search.hpp"
#include "dha/training.hpp"
#include "oracles.hpp"

namespace dha {
namespace {

const SyntheticLmTask& small_task() {
  static const SyntheticLmTask task([] {
    TaskConfig c;
    c.vocab_size = 8;
    c.seq_len = 9;
    c.train_sequences = 64;
    c.val_sequences = 8;
    c.seed = 5;
    return c;
  }());
  return task;
}

ModelConfig small_model() { return {2, 4, 2, 8, 8, 8}; }

class Seeded : public ::testing::TestWithParam<int> {
 protected:
  std::mt19937_64 rng{static_cast<std::uint64_t>(GetParam())};
};

TEST_P(Seeded, MatrixDataLengthAndFiniteness) {
  const Matrix a = oracle::random_matrix(3, 5, rng);
  const Matrix b = oracle::random_matrix(5, 2, rng);
  const Matrix c = matmul(a, b);
  EXPECT_EQ(c.values().size(), c.rows() * c.cols());
  EXPECT_TRUE(all_finite(c));
  EXPECT_TRUE(all_finite(softmax_rows(c * 1e6)));
}

TEST_P(Seeded, GroupingScoreIgnoresLabelsAndMemberOrder) {
  Matrix s = oracle::random_matrix(6, 6, rng);
  s = s + s.transpose();
  const ScoreMatrix m{s};
  HeadGroups g{{0, 4}, {1, 5}, {2, 3}};
  const double base = grouping_score(m, g);
  std::shuffle(g.begin(), g.end(), rng);
  for (auto& members : g) std::shuffle(members.begin(), members.end(), rng);
  EXPECT_NEAR(grouping_score(m, g), base, 1e-12);
}

TEST_P(Seeded, AnnealScoreIsSelfConsistent) {
  Matrix s = oracle::random_matrix(8, 8, rng);
  const ScoreMatrix m{s + s.transpose()};
  for (bool keep_best : {true, false}) {
    AnnealOptions o;
    o.keep_best = keep_best;
    o.restarts = keep_best ? 4 : 1;
    const AnnealResult r = anneal_grouping(m, 4, GetParam(), o);
    EXPECT_DOUBLE_EQ(r.score, grouping_score(m, r.groups));
  }
}

TEST_P(Seeded, AllocationInvariants) {
  std::uniform_int_distribution<std::size_t> layers(1, 10);
  std::uniform_real_distribution<double> u(0.0, 5.0);
  const std::size_t n = layers(rng);
  std::vector<double> losses(n);
  for (auto& l : losses) l = u(rng);
  std::uniform_int_distribution<std::size_t> extra(0, 3 * n);
  const std::size_t total = 4 * (n + extra(rng));
  const std::vector<std::size_t> set{4, 8, 16};
  const auto a = allocate_layer_budgets(losses, total, set);
  EXPECT_EQ(std::accumulate(a.begin(), a.end(), std::size_t{0}), total);
  for (auto c : a) {
    EXPECT_GE(c, 4u);
    EXPECT_EQ(c % 4, 0u);
  }
  // invariant to a common positive scale of the losses
  std::vector<double> scaled = losses;
  for (auto& l : scaled) l *= 8.0;
  EXPECT_EQ(allocate_layer_budgets(scaled, total, set), a);
}

TEST_P(Seeded, FittedBudgetsDivideHeadCount) {
  std::uniform_int_distribution<std::size_t> layers(1, 8);
  std::uniform_real_distribution<double> u(0.1, 2.0);
  const std::size_t n = layers(rng);
  std::vector<double> losses(n);
  for (auto& l : losses) l = u(rng);
  std::uniform_int_distribution<std::size_t> extra(0, n);
  const std::size_t total = 2 * (n + extra(rng));
  const std::vector<std::size_t> set{2, 4, 8};
  const auto raw = allocate_layer_budgets(losses, total, set);
  const auto fit = fit_budgets_to_heads(raw, losses, 8);
  EXPECT_EQ(std::accumulate(fit.begin(), fit.end(), std::size_t{0}), total);
  for (auto c : fit) EXPECT_EQ(8 % c, 0u);
}

TEST_P(Seeded, RedundancyIsPermutationInvariant) {
  const AttentionLayer layer = oracle::random_layer(5, 2, 5, 5, rng);
  const SimilarityMatrix sim = head_similarity_matrix({layer}, 0, HeadKind::kKey);
  std::vector<std::size_t> perm(5);
  std::iota(perm.begin(), perm.end(), 0);
  std::shuffle(perm.begin(), perm.end(), rng);
  SimilarityMatrix p;
  p.values = Matrix(5, 5);
  for (std::size_t i = 0; i < 5; ++i)
    for (std::size_t j = 0; j < 5; ++j) p.values(i, j) = sim.values(perm[i], perm[j]);
  EXPECT_NEAR(layer_redundancy(p), layer_redundancy(sim), 1e-12);
}

TEST_P(Seeded, PermuteHeadsPreservesForward) {
  const AttentionLayer layer = oracle::random_layer(4, 2, 4, 4, rng);
  std::vector<std::size_t> perm(4);
  std::iota(perm.begin(), perm.end(), 0);
  std::shuffle(perm.begin(), perm.end(), rng);
  const Matrix x = oracle::random_matrix(6, 8, rng);
  EXPECT_LE(max_abs_diff(mha_forward(x, permute_heads(layer, perm)), mha_forward(x, layer)), 1e-12);
}

TEST_P(Seeded, FusionLossZeroIffRowsIdenticalWithinGroups) {
  const AttentionParams p{oracle::random_layer(4, 2, 4, 4, rng)};
  const std::vector<HeadGroups> g{{{0, 3}, {1, 2}}};
  FusionOperator op = init_identity(p, g, g);
  std::normal_distribution<double> n(0.0, 1.0);
  for (double& v : op.layers[0].key.omega.values()) v = n(rng);
  for (double& v : op.layers[0].value.omega.values()) v = n(rng);
  force_group_means(op);
  EXPECT_EQ(fusion_loss(op), 0.0);
  op.layers[0].value.omega(1, 0) += 1e-3;
  EXPECT_GT(fusion_loss(op), 0.0);
}

TEST_P(Seeded, LambdaMonotoneUnderTheHinge) {
  LagrangeState lag{0.0, 0.05};
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int i = 0; i < 100; ++i) {
    const double fl = u(rng), t = u(rng);
    const LagrangeState next = lagrange_step(lag, fl, t);
    if (fl > t)
      EXPECT_GE(next.lambda, lag.lambda);
    else
      EXPECT_EQ(next.lambda, lag.lambda);
    lag = next;
  }
}

INSTANTIATE_TEST_SUITE_P(Seeds, Seeded, ::testing::Range(1, 9));

TEST(TopologyInvariants, GroupedAndIdentityAreValid) {
  for (std::size_t g : {1u, 2u, 4u, 8u}) EXPECT_NO_THROW(LayerTopology::grouped(8, g).validate(8));
  EXPECT_NO_THROW(DhaTopology::identity(3, 4).validate(4));
  EXPECT_EQ(DhaTopology::grouped(3, 4, 2).total_kv_heads(), 12u);
}

FusionPhaseResult short_fusion(std::uint64_t seed) {
  const ToyModel mha = ToyModel::init(small_model(), seed);
  const std::vector<HeadGroups> g(2, HeadGroups{{0, 1}, {2, 3}});
  FusionPhaseConfig fc;
  fc.max_steps = 30;
  fc.batch_size = 2;
  fc.lr_fusion = 5e-2;
  fc.schedule = {0.999, 10, 0};
  LagrangeState lag;
  lag.lr_lambda = 0.5;
  return run_fusion_phase(mha, init_identity(mha.attention, g, g), lag, small_task(), fc);
}

TEST(FusionPhase, StepZeroLossEqualsMhaLoss) {
  const ToyModel mha = ToyModel::init(small_model(), 1);
  const FusionPhaseResult r = short_fusion(1);
  ASSERT_FALSE(r.trace.empty());
  EXPECT_EQ(r.trace[0].lm_loss, lm_loss(mha, small_task().train_batch(0, 2)));
  EXPECT_EQ(r.val_loss_before, lm_loss(mha, small_task().validation()));
}

TEST(FusionPhase, LambdaTraceFollowsTheHinge) {
  const FusionPhaseResult r = short_fusion(2);
  for (std::size_t i = 1; i < r.trace.size(); ++i) {
    const auto& prev = r.trace[i - 1];
    if (prev.fusion_loss > prev.margin)
      EXPECT_GE(r.trace[i].lambda, prev.lambda);
    else
      EXPECT_EQ(r.trace[i].lambda, prev.lambda);
  }
  EXPECT_GT(r.lagrange.lambda, 0.0);
}

TEST(FusionPhase, MaterializedModelMatchesForcedMeans) {
  FusionPhaseResult r = short_fusion(3);
  FusionOperator forced = r.op;
  force_group_means(forced);
  ToyModel dha = r.model;
  auto [params, topo] = materialize_dha(r.model.attention, forced);
  dha.attention = params;
  dha.topology = topo;
  dha.variant = AttentionVariant::kDha;
  TokenBatch inputs;
  for (const auto& seq : small_task().validation()) inputs.emplace_back(seq.begin(), seq.end() - 1);
  EXPECT_LE(max_logit_diff(dha, nullptr, r.model, &forced, inputs), 1e-10);
}

TEST(FusionPhase, BitReproducible) {
  const FusionPhaseResult a = short_fusion(4);
  const FusionPhaseResult b = short_fusion(4);
  EXPECT_EQ(a.op.layers[1].value.omega, b.op.layers[1].value.omega);
  EXPECT_EQ(a.model.output, b.model.output);
  EXPECT_EQ(a.lagrange.lambda, b.lagrange.lambda);
}

TEST(FusionPhase, StopsImmediatelyWhenAlreadyFused) {
  const ToyModel mha = ToyModel::init(small_model(), 5);
  const std::vector<HeadGroups> g(2, HeadGroups{{0}, {1}, {2}, {3}});
  FusionPhaseConfig fc;
  fc.max_steps = 10;
  const FusionPhaseResult r =
      run_fusion_phase(mha, init_identity(mha.attention, g, g), {}, small_task(), fc);
  EXPECT_TRUE(r.converged);
  EXPECT_EQ(r.steps_run, 0u);
  EXPECT_EQ(r.model.output, mha.output);
}

TEST(Search, DuplicatedHeadsShareAGroup) {
  ToyModel mha = ToyModel::init(small_model(), 6);
  const HeadTies ties = random_pair_ties(2, 4, 7);
  apply_ties(mha, ties);
  PipelineConfig c;
  c.kv_budget_total = 8;
  c.search_steps = 2;
  c.search_batch_size = 2;
  c.alloc_set = {2};
  const SearchResult r = run_search_phase(mha, small_task(), c);
  for (std::size_t l = 0; l < 2; ++l) {
    ASSERT_EQ(r.key.budget[l], 2u);
    auto sorted = [](HeadGroups g) {
      for (auto& m : g) std::sort(m.begin(), m.end());
      std::sort(g.begin(), g.end());
      return g;
    };
    EXPECT_EQ(sorted(r.key.groups[l]), ties.key[l]);
    EXPECT_EQ(sorted(r.value.groups[l]), ties.value[l]);
  }
}

TEST(Search, UniformLossesFollowReferenceAllocation) {
  const std::vector<double> uniform(4, 1.0);
  const std::vector<std::size_t> set{4, 8, 16};
  for (std::size_t total : {16u, 20u, 32u, 44u, 64u})
    EXPECT_EQ(allocate_layer_budgets(uniform, total, set), oracle::reference_allocation(uniform, total));
}

}  // namespace
}  // namespace dha
