// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cmath>
#include <map>
#include <string>

#include "dha/errors.hpp"
#include "dha/model.hpp"
#include "dha/pipeline.hpp"
#include "dha/training.hpp"
#include "oracles.hpp"

namespace dha {
namespace {

ModelConfig micro_config() { return {2, 2, 2, 5, 6, 4}; }

TokenSequence inputs_of(const TokenSequence& s) { return {s.begin(), s.end() - 1}; }

std::string parameter_class(const std::string& name) {
  if (name == "tok_emb" || name == "pos_emb" || name == "lm_head") return name;
  for (const char* cls : {"attn.q", "attn.k", "attn.v", "attn.o", "ffn"})
    if (name.find(cls) != std::string::npos) return cls;
  return "other";
}

struct GradCheck {
  std::map<std::string, std::vector<double>> analytic;
  std::map<std::string, std::vector<double>> numeric;
};

// Central differences of `objective` over every model parameter and every
// fusion coefficient, grouped by parameter class.
GradCheck check_gradients(ToyModel& model, FusionOperator* op, const ModelGrad& grad,
                          const std::function<double()>& objective) {
  GradCheck out;
  std::vector<std::pair<std::string, const Matrix*>> grads;
  grad.model.for_each_parameter(
      [&](const std::string& name, const Matrix& g) { grads.emplace_back(name, &g); });
  std::size_t idx = 0;
  model.for_each_parameter([&](const std::string& name, Matrix& p) {
    const Matrix& g = *grads[idx++].second;
    const std::string cls = parameter_class(name);
    for (std::size_t i = 0; i < p.size(); ++i) {
      out.analytic[cls].push_back(g.values()[i]);
      out.numeric[cls].push_back(oracle::central_difference(objective, p.values()[i], 1e-6));
    }
  });
  if (op) {
    for (std::size_t l = 0; l < op->layers.size(); ++l)
      for (HeadKind kind : {HeadKind::kKey, HeadKind::kValue}) {
        Matrix& w = op->at(l, kind).omega;
        const Matrix& g = grad.fusion.at(l, kind).omega;
        for (std::size_t i = 0; i < w.size(); ++i) {
          out.analytic["omega"].push_back(g.values()[i]);
          out.numeric["omega"].push_back(oracle::central_difference(objective, w.values()[i], 1e-6));
        }
      }
  }
  return out;
}

TEST(Model, InitIsDeterministicPerSeed) {
  const ToyModel a = ToyModel::init(micro_config(), 3);
  const ToyModel b = ToyModel::init(micro_config(), 3);
  const ToyModel c = ToyModel::init(micro_config(), 4);
  EXPECT_EQ(a.token_embedding, b.token_embedding);
  EXPECT_EQ(a.attention[1].w_v[1], b.attention[1].w_v[1]);
  EXPECT_NE(a.token_embedding, c.token_embedding);
  EXPECT_EQ(a.variant, AttentionVariant::kMha);
  EXPECT_NO_THROW(a.validate());
}

TEST(Model, ParameterCount) {
  const ToyModel m = ToyModel::init(micro_config(), 1);
  // embeddings 5*4 + 6*4, per layer 3*2*4*2 + 16 + 2*16, head 4*5
  EXPECT_EQ(m.parameter_count(), 20u + 24u + 2u * (48u + 16u + 32u) + 20u);
}

TEST(Model, ZeroOutputGivesUniformLoss) {
  ToyModel m = ToyModel::init(micro_config(), 1);
  m.output.fill(0.0);
  std::mt19937_64 rng(2);
  const TokenBatch batch = oracle::random_batch(3, 6, 5, rng);
  EXPECT_NEAR(lm_loss(m, batch), std::log(5.0), 1e-14);
}

TEST(Model, LossMatchesCrossEntropyOracle) {
  const ToyModel m = ToyModel::init(micro_config(), 5);
  std::mt19937_64 rng(6);
  const TokenBatch batch = oracle::random_batch(4, 7, 5, rng);
  std::vector<Matrix> logits;
  for (const auto& s : batch) logits.push_back(forward_logits(m, inputs_of(s)));
  EXPECT_NEAR(lm_loss(m, batch), oracle::cross_entropy(logits, batch), 1e-12);
}

TEST(Model, LogitsAreCausal) {
  const ToyModel m = ToyModel::init(micro_config(), 7);
  const Matrix a = forward_logits(m, {1, 2, 3, 4});
  const Matrix b = forward_logits(m, {1, 2, 0, 0});
  for (std::size_t c = 0; c < 5; ++c) {
    EXPECT_EQ(a(0, c), b(0, c));
    EXPECT_EQ(a(1, c), b(1, c));
  }
}

TEST(Model, RejectsBadInputs) {
  const ToyModel m = ToyModel::init(micro_config(), 8);
  EXPECT_THROW(forward_logits(m, {}), DomainError);
  EXPECT_THROW(forward_logits(m, {1, 9}), DomainError);
  EXPECT_THROW(forward_logits(m, TokenSequence(7, 0)), DomainError);
  EXPECT_THROW(lm_loss(m, {{1}}), DomainError);
}

TEST(Model, FusionOperatorNeedsMha) {
  const ToyModel mha = ToyModel::init(micro_config(), 9);
  const ToyModel gqa = make_gqa_model(mha, 1);
  const std::vector<HeadGroups> g(2, HeadGroups{{0, 1}});
  const FusionOperator op = init_identity(mha.attention, g, g);
  EXPECT_THROW(forward_logits(gqa, {1, 2}, &op), TopologyError);
}

TEST(Model, IdentityFusionLeavesLogitsUnchanged) {
  const ToyModel m = ToyModel::init(micro_config(), 10);
  const std::vector<HeadGroups> g(2, HeadGroups{{0, 1}});
  const FusionOperator op = init_identity(m.attention, g, g);
  std::mt19937_64 rng(11);
  const TokenBatch batch = oracle::random_batch(5, 6, 5, rng);
  EXPECT_LE(max_logit_diff(m, &op, m, nullptr, batch), 1e-12);
}

TEST(Gradients, LanguageModelLossMatchesFiniteDifferences) {
  ToyModel m = ToyModel::init(micro_config(), 12);
  std::mt19937_64 rng(13);
  const TokenBatch batch = oracle::random_batch(2, 6, 5, rng);
  ModelGrad grad = make_grad(m);
  lm_loss_and_grad(m, batch, nullptr, grad);
  const GradCheck gc = check_gradients(m, nullptr, grad, [&] { return lm_loss(m, batch); });
  for (const auto& [cls, a] : gc.analytic)
    EXPECT_LE(oracle::relative_error(a, gc.numeric.at(cls)), 1e-5) << cls;
}

TEST(Gradients, FusionObjectiveMatchesFiniteDifferences) {
  ToyModel m = ToyModel::init(micro_config(), 14);
  const std::vector<HeadGroups> g(2, HeadGroups{{0, 1}});
  FusionOperator op = init_identity(m.attention, g, g);
  std::mt19937_64 rng(15);
  std::normal_distribution<double> n(0.5, 0.4);
  for (auto& lf : op.layers)
    for (KindFusion* kf : {&lf.key, &lf.value})
      for (double& v : kf->omega.values()) v = n(rng);
  const TokenBatch batch = oracle::random_batch(2, 6, 5, rng);
  const LagrangeState lag{0.7, 0.01};
  const MarginSchedule sched{0.999, 10, 10};  // margin 0: hinge active
  ASSERT_GT(fusion_loss(op), 1e-2);
  ModelGrad grad = make_grad(m, &op);
  fusion_objective_and_grad(m, batch, op, lag, sched, 3.0, grad);
  const GradCheck gc = check_gradients(
      m, &op, grad, [&] { return fusion_objective(m, batch, op, lag, sched, 3.0).total; });
  EXPECT_EQ(gc.analytic.size(), 9u);
  for (const auto& [cls, a] : gc.analytic)
    EXPECT_LE(oracle::relative_error(a, gc.numeric.at(cls)), 1e-5) << cls;
}

TEST(Gradients, GroupedModelMatchesFiniteDifferences) {
  ToyModel m = make_gqa_model(ToyModel::init({2, 4, 2, 5, 6, 4}, 16), 2);
  std::mt19937_64 rng(17);
  const TokenBatch batch = oracle::random_batch(2, 6, 5, rng);
  ModelGrad grad = make_grad(m);
  lm_loss_and_grad(m, batch, nullptr, grad);
  const GradCheck gc = check_gradients(m, nullptr, grad, [&] { return lm_loss(m, batch); });
  for (const auto& [cls, a] : gc.analytic)
    EXPECT_LE(oracle::relative_error(a, gc.numeric.at(cls)), 1e-5) << cls;
}

TEST(Gradients, InactiveHingeAddsNothing) {
  ToyModel m = ToyModel::init(micro_config(), 18);
  const std::vector<HeadGroups> g(2, HeadGroups{{0, 1}});
  const FusionOperator op = init_identity(m.attention, g, g);
  std::mt19937_64 rng(19);
  const TokenBatch batch = oracle::random_batch(2, 6, 5, rng);
  const MarginSchedule early{0.999, 200, 0};  // margin 1 > fusion loss
  ModelGrad with = make_grad(m, &op);
  ModelGrad without = make_grad(m, &op);
  fusion_objective_and_grad(m, batch, op, {5.0, 0.01}, early, 100.0, with);
  lm_loss_and_grad(m, batch, &op, without);
  EXPECT_EQ(with.fusion.layers[0].key.omega, without.fusion.layers[0].key.omega);
}

}  // namespace
}  // namespace dha
