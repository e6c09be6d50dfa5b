// SPDX-License-Identifier: Apache-2.0
#include "dha/fusion.hpp"

#include <algorithm>
#include <cmath>

#include "dha/errors.hpp"

namespace dha {

void validate_partition(const HeadGroups& groups, std::size_t n_heads) {
  if (groups.empty()) throw ConfigError("grouping has no groups");
  const std::size_t size = groups.front().size();
  if (size == 0) throw ConfigError("grouping contains an empty group");
  std::vector<int> seen(n_heads, 0);
  std::size_t total = 0;
  for (const auto& g : groups) {
    if (g.size() != size) {
      throw ConfigError("groups have unequal sizes (" + std::to_string(g.size()) + " vs " +
                        std::to_string(size) + ")");
    }
    for (std::size_t h : g) {
      if (h >= n_heads) {
        throw ConfigError("head " + std::to_string(h) + " out of range " +
                          std::to_string(n_heads));
      }
      if (seen[h]++) throw ConfigError("head " + std::to_string(h) + " appears twice");
      ++total;
    }
  }
  if (total != n_heads) {
    throw ConfigError("grouping covers " + std::to_string(total) + " of " +
                      std::to_string(n_heads) + " heads");
  }
}

KindFusion& FusionOperator::at(std::size_t layer, HeadKind kind) {
  return const_cast<KindFusion&>(std::as_const(*this).at(layer, kind));
}

const KindFusion& FusionOperator::at(std::size_t layer, HeadKind kind) const {
  if (layer >= layers.size()) {
    throw DomainError("fusion layer " + std::to_string(layer) + " out of range");
  }
  switch (kind) {
    case HeadKind::kKey: return layers[layer].key;
    case HeadKind::kValue: return layers[layer].value;
    case HeadKind::kQuery: break;
  }
  throw DomainError("query heads are not fused");
}

namespace {

KindFusion make_identity(const HeadGroups& groups, std::size_t n_heads, std::size_t channels) {
  validate_partition(groups, n_heads);
  KindFusion kf;
  kf.groups = groups;
  kf.channels = channels;
  kf.group_of.assign(n_heads, 0);
  kf.slot_of.assign(n_heads, 0);
  const std::size_t g = groups.front().size();
  kf.omega = Matrix(n_heads, g * channels);
  for (std::size_t n = 0; n < groups.size(); ++n) {
    for (std::size_t j = 0; j < g; ++j) {
      const std::size_t h = groups[n][j];
      kf.group_of[h] = n;
      kf.slot_of[h] = j;
      for (std::size_t c = 0; c < channels; ++c) kf.omega(h, j * channels + c) = 1.0;
    }
  }
  return kf;
}

std::vector<std::vector<HeadTerm>> kind_routing(const KindFusion& kf) {
  std::vector<std::vector<HeadTerm>> mix(kf.group_of.size());
  for (std::size_t h = 0; h < mix.size(); ++h) {
    const auto& members = kf.groups[kf.group_of[h]];
    for (std::size_t j = 0; j < members.size(); ++j) mix[h].push_back({members[j], kf.coeff(h, j)});
  }
  return mix;
}

double row_mse(const KindFusion& kf, std::size_t h, std::size_t h2) {
  auto a = kf.omega.row(h);
  auto b = kf.omega.row(h2);
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) acc += (a[i] - b[i]) * (a[i] - b[i]);
  return acc / static_cast<double>(a.size());
}

double kind_normalizer(const KindFusion& kf) {
  const double g = static_cast<double>(kf.group_size());
  return static_cast<double>(kf.group_of.size()) * g * static_cast<double>(kf.channels) *
         (g - 1.0) / 2.0;
}

double layer_pair_sum(const KindFusion& kf) {
  double acc = 0.0;
  for (const auto& members : kf.groups)
    for (std::size_t a = 0; a < members.size(); ++a)
      for (std::size_t b = a + 1; b < members.size(); ++b) acc += row_mse(kf, members[a], members[b]);
  return acc;
}

}  // namespace

FusionOperator init_identity(const AttentionParams& mha, std::span<const HeadGroups> grouping_k,
                             std::span<const HeadGroups> grouping_v, bool per_channel) {
  if (grouping_k.size() != mha.size() || grouping_v.size() != mha.size()) {
    throw ConfigError("one key and one value grouping is required per layer");
  }
  FusionOperator op;
  op.per_channel = per_channel;
  op.head_dim = mha.empty() ? 0 : mha.front().head_dim();
  const std::size_t channels = per_channel ? op.head_dim : 1;
  for (std::size_t l = 0; l < mha.size(); ++l) {
    const std::size_t n = mha[l].w_q.size();
    if (mha[l].w_k.size() != n || mha[l].w_v.size() != n) {
      throw TopologyError("fusion starts from a multi-head attention layer (layer " +
                          std::to_string(l) + ")");
    }
    op.layers.push_back({make_identity(grouping_k[l], n, channels),
                         make_identity(grouping_v[l], n, channels)});
  }
  return op;
}

HeadRouting fusion_routing(const FusionOperator& op, std::size_t layer) {
  const auto& lf = op.layers.at(layer);
  return HeadRouting{kind_routing(lf.key), kind_routing(lf.value)};
}

Matrix fused_forward(const Matrix& x, const AttentionLayer& mha, const FusionOperator& op,
                     std::size_t layer) {
  if (layer >= op.layers.size()) throw TopologyError("fusion operator has no layer " + std::to_string(layer));
  if (op.layers[layer].key.group_of.size() != mha.w_q.size()) {
    throw TopologyError("fusion operator covers " +
                        std::to_string(op.layers[layer].key.group_of.size()) +
                        " query heads, layer has " + std::to_string(mha.w_q.size()));
  }
  return attention_forward(x, mha, fusion_routing(op, layer));
}

double head_pair_loss(const FusionOperator& op, std::size_t layer, HeadKind kind,
                      std::size_t group, std::size_t h, std::size_t h2) {
  const KindFusion& kf = op.at(layer, kind);
  if (group >= kf.n_groups()) throw DomainError("group " + std::to_string(group) + " out of range");
  const auto& members = kf.groups[group];
  auto in_group = [&](std::size_t q) {
    return std::find(members.begin(), members.end(), q) != members.end();
  };
  if (!in_group(h) || !in_group(h2)) {
    throw DomainError("heads " + std::to_string(h) + " and " + std::to_string(h2) +
                      " are not both in group " + std::to_string(group));
  }
  return row_mse(kf, h, h2);
}

double fusion_loss(const FusionOperator& op) {
  if (op.layers.empty()) return 0.0;
  double total = 0.0;
  for (const auto& lf : op.layers) {
    const double norm = kind_normalizer(lf.key) + kind_normalizer(lf.value);
    if (norm == 0.0) continue;
    total += (layer_pair_sum(lf.key) + layer_pair_sum(lf.value)) / norm;
  }
  return total / static_cast<double>(op.layers.size());
}

FusionOperator fusion_loss_grad(const FusionOperator& op) {
  FusionOperator grad = op;
  const double n_layers = static_cast<double>(op.layers.size());
  for (auto& lf : grad.layers) {
    lf.key.omega.fill(0.0);
    lf.value.omega.fill(0.0);
  }
  for (std::size_t l = 0; l < op.layers.size(); ++l) {
    const auto& lf = op.layers[l];
    const double norm = kind_normalizer(lf.key) + kind_normalizer(lf.value);
    if (norm == 0.0) continue;
    for (HeadKind kind : {HeadKind::kKey, HeadKind::kValue}) {
      const KindFusion& kf = op.at(l, kind);
      Matrix& g = grad.at(l, kind).omega;
      const double scale = 2.0 / (static_cast<double>(kf.omega.cols()) * norm * n_layers);
      for (const auto& members : kf.groups) {
        for (std::size_t a = 0; a < members.size(); ++a) {
          for (std::size_t b = a + 1; b < members.size(); ++b) {
            auto ra = kf.omega.row(members[a]);
            auto rb = kf.omega.row(members[b]);
            auto ga = g.row(members[a]);
            auto gb = g.row(members[b]);
            for (std::size_t i = 0; i < ra.size(); ++i) {
              const double d = scale * (ra[i] - rb[i]);
              ga[i] += d;
              gb[i] -= d;
            }
          }
        }
      }
    }
  }
  return grad;
}

void force_group_means(FusionOperator& op) {
  for (auto& lf : op.layers) {
    for (KindFusion* kf : {&lf.key, &lf.value}) {
      for (const auto& members : kf->groups) {
        std::vector<double> mean(kf->omega.cols(), 0.0);
        for (std::size_t h : members)
          for (std::size_t i = 0; i < mean.size(); ++i) mean[i] += kf->omega(h, i);
        for (double& m : mean) m /= static_cast<double>(members.size());
        for (std::size_t h : members) std::copy(mean.begin(), mean.end(), kf->omega.row(h).begin());
      }
    }
  }
}

std::pair<AttentionParams, DhaTopology> materialize_dha(const AttentionParams& mha,
                                                        const FusionOperator& op) {
  if (mha.size() != op.layers.size()) {
    throw TopologyError("fusion operator has " + std::to_string(op.layers.size()) +
                        " layers, model has " + std::to_string(mha.size()));
  }
  AttentionParams out;
  DhaTopology topo;
  for (std::size_t l = 0; l < mha.size(); ++l) {
    const AttentionLayer& src = mha[l];
    AttentionLayer dst;
    dst.w_q = src.w_q;
    dst.w_o = src.w_o;
    LayerTopology lt;
    auto fuse = [&](const KindFusion& kf, const std::vector<Matrix>& heads) {
      std::vector<Matrix> fused;
      for (const auto& members : kf.groups) {
        const std::size_t g = members.size();
        Matrix mean_row(1, kf.omega.cols());
        for (std::size_t h : members)
          for (std::size_t i = 0; i < kf.omega.cols(); ++i) mean_row(0, i) += kf.omega(h, i);
        mean_row *= 1.0 / static_cast<double>(g);
        const Matrix& proto = heads[members.front()];
        Matrix w(proto.rows(), proto.cols());
        for (std::size_t j = 0; j < g; ++j) {
          const Matrix& wj = heads[members[j]];
          for (std::size_t r = 0; r < w.rows(); ++r) {
            for (std::size_t c = 0; c < w.cols(); ++c) {
              const double coef = mean_row(0, j * kf.channels + (kf.channels == 1 ? 0 : c));
              w(r, c) += coef * wj(r, c);
            }
          }
        }
        fused.push_back(std::move(w));
      }
      return fused;
    };
    dst.w_k = fuse(op.layers[l].key, src.w_k);
    dst.w_v = fuse(op.layers[l].value, src.w_v);
    lt.key_heads = op.layers[l].key.n_groups();
    lt.value_heads = op.layers[l].value.n_groups();
    lt.key_map = op.layers[l].key.group_of;
    lt.value_map = op.layers[l].value.group_of;
    out.push_back(std::move(dst));
    topo.layers.push_back(std::move(lt));
  }
  return {std::move(out), std::move(topo)};
}

void MarginSchedule::validate() const {
  if (!(base > 0.0 && base < 1.0)) throw ConfigError("margin base must lie in (0, 1)");
  if (warmup_steps == 0) throw ConfigError("margin warm-up must be >= 1 step");
}

double margin(const MarginSchedule& sched) {
  const double s = static_cast<double>(sched.step);
  const double k = static_cast<double>(sched.warmup_steps);
  return std::max(0.0, std::pow(sched.base, s) * (1.0 - s / k));
}

double constrained_penalty(double loss_fusion, const MarginSchedule& sched,
                           const LagrangeState& lag) {
  return lag.lambda * std::max(loss_fusion - margin(sched), 0.0);
}

LagrangeState lagrange_step(LagrangeState lag, double loss_fusion, double t) {
  lag.lambda = std::max(0.0, lag.lambda + lag.lr_lambda * std::max(loss_fusion - t, 0.0));
  return lag;
}

}  // namespace dha
