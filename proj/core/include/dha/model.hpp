// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "dha/attention.hpp"
#include "dha/fusion.hpp"
#include "dha/linalg.hpp"

namespace dha {

using TokenSequence = std::vector<std::uint32_t>;
using TokenBatch = std::vector<TokenSequence>;

/// Two-matrix SiLU feed-forward block.
struct FeedForward {
  Matrix w_in;   // d_model x ffn_dim
  Matrix w_out;  // ffn_dim x d_model
};

/// Pre-norm decoder-only transformer: learned token and absolute position
/// embeddings, per layer a causal attention block and a feed-forward block,
/// each wrapped in a residual with a parameter-free RMS norm in front, and
/// a final RMS norm feeding the output projection.
struct ToyModel {
  ModelConfig config;
  AttentionVariant variant = AttentionVariant::kMha;
  DhaTopology topology;
  Matrix token_embedding;     // vocab x d_model
  Matrix position_embedding;  // max_seq x d_model
  AttentionParams attention;
  std::vector<FeedForward> ffn;
  Matrix output;  // d_model x vocab

  /// Random MHA model; identical seeds give bit-identical parameters.
  static ToyModel init(const ModelConfig& config, std::uint64_t seed);

  /// Checks every shape against config and topology.
  void validate() const;

  /// Zero-filled copy (same shapes), used as a gradient buffer.
  ToyModel zeros_like() const;

  /// Visits every parameter matrix in a fixed order with a stable name.
  template <typename F>
  void for_each_parameter(F&& fn);
  template <typename F>
  void for_each_parameter(F&& fn) const;

  std::size_t parameter_count() const;
};

/// Gradient of the training objective.
struct ModelGrad {
  ToyModel model;
  FusionOperator fusion;  // omega gradients; empty when no operator is attached
};

inline constexpr double kRmsEps = 1e-6;

/// Next-token logits for `inputs` (positions x vocab). With a fusion
/// operator the model must be MHA and keys/values are fused through it.
Matrix forward_logits(const ToyModel& model, const TokenSequence& inputs,
                      const FusionOperator* op = nullptr);

/// Per-layer normalized attention inputs for `inputs` (search statistics).
std::vector<Matrix> attention_inputs(const ToyModel& model, const TokenSequence& inputs);

/// Mean next-token cross-entropy over every position of every sequence.
/// A sequence of n tokens contributes n - 1 predictions.
double lm_loss(const ToyModel& model, const TokenBatch& batch, const FusionOperator* op = nullptr);

/// lm_loss plus exact gradients for every parameter (and omega when `op`
/// is given). `grad` is overwritten.
double lm_loss_and_grad(const ToyModel& model, const TokenBatch& batch, const FusionOperator* op,
                        ModelGrad& grad);

/// Zero-filled gradient buffer for `model` (and `op` when non-null).
ModelGrad make_grad(const ToyModel& model, const FusionOperator* op = nullptr);

/// Largest absolute logit difference between two models over a batch.
double max_logit_diff(const ToyModel& a, const FusionOperator* op_a, const ToyModel& b,
                      const FusionOperator* op_b, const TokenBatch& batch);

// ---------------------------------------------------------------------------

namespace detail {

template <typename Model, typename F>
void visit_parameters(Model& m, F&& fn) {
  fn(std::string("tok_emb"), m.token_embedding);
  fn(std::string("pos_emb"), m.position_embedding);
  for (std::size_t l = 0; l < m.attention.size(); ++l) {
    const std::string p = "layers." + std::to_string(l) + ".";
    auto& a = m.attention[l];
    for (std::size_t h = 0; h < a.w_q.size(); ++h) fn(p + "attn.q." + std::to_string(h), a.w_q[h]);
    for (std::size_t h = 0; h < a.w_k.size(); ++h) fn(p + "attn.k." + std::to_string(h), a.w_k[h]);
    for (std::size_t h = 0; h < a.w_v.size(); ++h) fn(p + "attn.v." + std::to_string(h), a.w_v[h]);
    fn(p + "attn.o", a.w_o);
    fn(p + "ffn.in", m.ffn[l].w_in);
    fn(p + "ffn.out", m.ffn[l].w_out);
  }
  fn(std::string("lm_head"), m.output);
}

}  // namespace detail

template <typename F>
void ToyModel::for_each_parameter(F&& fn) {
  detail::visit_parameters(*this, std::forward<F>(fn));
}

template <typename F>
void ToyModel::for_each_parameter(F&& fn) const {
  detail::visit_parameters(*this, std::forward<F>(fn));
}

}  // namespace dha
