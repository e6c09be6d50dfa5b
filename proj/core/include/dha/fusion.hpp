// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <span>
#include <utility>
#include <vector>

#include "dha/attention.hpp"
#include "dha/head_analysis.hpp"
#include "dha/linalg.hpp"

namespace dha {

/// Partition of a layer's heads into equal-size groups (explicit member
/// lists; members need not be contiguous).
using HeadGroups = std::vector<std::vector<std::size_t>>;

/// Throws ConfigError unless `groups` partitions [0, n_heads) into
/// non-empty groups of one common size.
void validate_partition(const HeadGroups& groups, std::size_t n_heads);

/// Fusion coefficients of one projection kind in one layer.
///
/// `omega` has one row per query head. Row h holds, for each member j of
/// h's group, `channels` weights stored at columns [j * channels, (j + 1) *
/// channels). The key (or value) seen by query head h is
///   sum_j omega[h][j] (.) (x W^{members[j]})
/// applied channelwise. With channels == 1 the weight is a scalar per member.
struct KindFusion {
  HeadGroups groups;
  std::vector<std::size_t> group_of;     // query head -> group index
  std::vector<std::size_t> slot_of;      // query head -> its own position within the group
  std::size_t channels = 1;
  Matrix omega;

  std::size_t group_size() const { return groups.empty() ? 0 : groups.front().size(); }
  std::size_t n_groups() const { return groups.size(); }
  std::span<const double> coeff(std::size_t h, std::size_t j) const {
    return omega.row(h).subspan(j * channels, channels);
  }
};

struct LayerFusion {
  KindFusion key;
  KindFusion value;
};

struct FusionOperator {
  std::vector<LayerFusion> layers;
  std::size_t head_dim = 0;
  bool per_channel = true;

  KindFusion& at(std::size_t layer, HeadKind kind);
  const KindFusion& at(std::size_t layer, HeadKind kind) const;
};

/// Kronecker-delta coefficients: query head h reads only the head it was
/// paired with in the source model, so the fused forward equals the MHA one.
FusionOperator init_identity(const AttentionParams& mha, std::span<const HeadGroups> grouping_k,
                             std::span<const HeadGroups> grouping_v, bool per_channel = true);

/// Routing whose coefficient spans point into `op` (which must outlive it).
HeadRouting fusion_routing(const FusionOperator& op, std::size_t layer);

Matrix fused_forward(const Matrix& x, const AttentionLayer& mha, const FusionOperator& op,
                     std::size_t layer);

/// Mean over (member, channel) of the squared difference between the rows
/// of query heads h and h2. Throws DomainError unless both are in `group`.
double head_pair_loss(const FusionOperator& op, std::size_t layer, HeadKind kind,
                      std::size_t group, std::size_t h, std::size_t h2);

/// Sum of pairwise row MSEs per layer over both kinds, divided by
/// sum_kind H * g * C * (g - 1) / 2, then averaged over layers.
double fusion_loss(const FusionOperator& op);

/// d fusion_loss / d omega, shaped like `op` (only `omega` is meaningful).
FusionOperator fusion_loss_grad(const FusionOperator& op);

/// Replaces every row by the mean row of its group.
void force_group_means(FusionOperator& op);

/// Builds one fused key/value head per group from group-averaged
/// coefficients and maps each query head to its group's head.
std::pair<AttentionParams, DhaTopology> materialize_dha(const AttentionParams& mha,
                                                        const FusionOperator& op);

struct MarginSchedule {
  double base = 0.999;
  std::size_t warmup_steps = 200;
  std::size_t step = 0;

  void validate() const;
};

/// max(0, base^step * (1 - step / warmup_steps)).
double margin(const MarginSchedule& sched);

struct LagrangeState {
  double lambda = 0.0;
  double lr_lambda = 1e-2;
};

/// lambda * max(loss_fusion - margin, 0).
double constrained_penalty(double loss_fusion, const MarginSchedule& sched,
                           const LagrangeState& lag);

/// Projected ascent: lambda <- max(0, lambda + lr * max(loss_fusion - t, 0)).
LagrangeState lagrange_step(LagrangeState lag, double loss_fusion, double t);

/// fusion_loss below which the fusion phase stops.
inline constexpr double kFusionTerminateLoss = 1e-3;

}  // namespace dha
