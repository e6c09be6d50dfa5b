// SPDX-License-Identifier: Apache-2.0
#include "dha/search.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "dha/errors.hpp"

namespace dha {

void ScoreMatrix::validate() const {
  if (scores.rows() != scores.cols()) throw DomainError("score matrix must be square");
  if (!all_finite(scores)) throw DomainError("score matrix has non-finite entries");
  for (std::size_t i = 0; i < size(); ++i)
    for (std::size_t j = i + 1; j < size(); ++j)
      if (std::abs(scores(i, j) - scores(j, i)) > 1e-9)
        throw DomainError("score matrix is not symmetric");
}

std::string to_string(ScoreMode m) { return m == ScoreMode::kCka ? "cka" : "neg_mse"; }

ScoreMode parse_score_mode(const std::string& s) {
  if (s == "cka") return ScoreMode::kCka;
  if (s == "neg_mse") return ScoreMode::kNegMse;
  throw ConfigError("unknown score mode '" + s + "' (expected cka or neg_mse)");
}

ScoreMatrix head_score_matrix(const AttentionParams& params, std::size_t layer, HeadKind kind,
                              ScoreMode mode) {
  if (mode == ScoreMode::kCka) return {head_similarity_matrix(params, layer, kind).values};
  if (layer >= params.size()) throw DomainError("layer " + std::to_string(layer) + " out of range");
  const auto& heads = heads_of(params[layer], kind);
  const std::size_t n = heads.size();
  ScoreMatrix m{Matrix(n, n)};
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i + 1; j < n; ++j) {
      const double v = -frobenius_norm_sq(heads[i] - heads[j]) / static_cast<double>(heads[i].size());
      m.scores(i, j) = m.scores(j, i) = v;
    }
  }
  return m;
}

double grouping_score(const ScoreMatrix& m, const HeadGroups& groups) {
  validate_partition(groups, m.size());
  double score = 0.0;
  for (const auto& g : groups)
    for (std::size_t i : g)
      for (std::size_t j : g) score += m.scores(i, j);
  return score / 2.0;
}

AnnealResult anneal_grouping(const ScoreMatrix& m, std::size_t n_groups, std::uint64_t seed,
                             const AnnealOptions& options) {
  const std::size_t p = m.size();
  if (n_groups == 0 || p == 0 || p % n_groups != 0) {
    throw ConfigError(std::to_string(p) + " heads cannot form " + std::to_string(n_groups) +
                      " equal groups");
  }
  if (options.restarts == 0) throw ConfigError("annealing needs at least one run");
  if (!(options.cooling > 0.0 && options.cooling < 1.0))
    throw ConfigError("cooling rate must lie in (0, 1)");
  const std::size_t per_group = p / n_groups;
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<std::size_t> pick_group(0, n_groups - 1);
  std::uniform_int_distribution<std::size_t> pick_member(0, per_group - 1);
  std::uniform_real_distribution<double> uniform(0.0, 1.0);

  AnnealResult best;
  for (std::size_t run = 0; run < options.restarts; ++run) {
    std::vector<std::size_t> points(p);
    std::iota(points.begin(), points.end(), 0);
    std::shuffle(points.begin(), points.end(), rng);
    HeadGroups groups(n_groups);
    for (std::size_t g = 0; g < n_groups; ++g)
      groups[g].assign(points.begin() + g * per_group, points.begin() + (g + 1) * per_group);

    double current = grouping_score(m, groups);
    AnnealResult run_best{groups, current};
    double t = options.initial_temperature;
    while (t > options.min_temperature) {
      const std::size_t i = pick_group(rng);
      const std::size_t j = pick_group(rng);
      if (i != j) {
        const std::size_t a = pick_member(rng);
        const std::size_t b = pick_member(rng);
        HeadGroups candidate = groups;
        std::swap(candidate[i][a], candidate[j][b]);
        const double next = grouping_score(m, candidate);
        const double delta = next - current;
        if (delta > 0 || std::exp(delta / t) > uniform(rng)) {
          groups = std::move(candidate);
          current = next;
          if (current > run_best.score) run_best = {groups, current};
        }
      }
      t *= options.cooling;
    }
    if (!options.keep_best) run_best = {std::move(groups), current};
    if (run == 0 || run_best.score > best.score) best = std::move(run_best);
  }
  return best;
}

std::vector<std::size_t> allocate_layer_budgets(std::span<const double> losses,
                                                std::size_t total,
                                                std::span<const std::size_t> alloc_set) {
  const std::size_t n = losses.size();
  if (n == 0) throw ConfigError("allocation needs at least one layer");
  if (alloc_set.empty() || alloc_set.front() == 0 ||
      !std::is_sorted(alloc_set.begin(), alloc_set.end())) {
    throw ConfigError("allocation set must be non-empty, positive and ascending");
  }
  for (double l : losses) {
    if (!std::isfinite(l) || l < 0.0) throw ConfigError("layer losses must be finite and >= 0");
  }
  const std::size_t unit = alloc_set.front();
  const std::size_t top = alloc_set.back();
  if (total < n * unit || (total - n * unit) % unit != 0) {
    throw ConfigError("budget " + std::to_string(total) + " infeasible for " + std::to_string(n) +
                      " layers with minimum " + std::to_string(unit) + " and step " +
                      std::to_string(unit));
  }

  auto argmax = [](const std::vector<double>& v) {
    return static_cast<std::size_t>(std::max_element(v.begin(), v.end()) - v.begin());
  };

  std::vector<std::size_t> alloc(n, unit);
  const double loss_sum = std::accumulate(losses.begin(), losses.end(), 0.0);
  std::vector<double> weight(n, 0.0);
  if (loss_sum > 0.0)
    for (std::size_t i = 0; i < n; ++i) weight[i] = losses[i] / loss_sum;

  std::size_t remaining = total - n * unit;
  const std::size_t upgrades = std::min<std::size_t>(1, remaining / top);
  for (std::size_t i = 0; i < upgrades; ++i) {
    const std::size_t idx = argmax(weight);
    alloc[idx] += top - unit;
    weight[idx] = 0.0;
  }

  remaining = total - std::accumulate(alloc.begin(), alloc.end(), std::size_t{0});
  std::vector<double> ratio(n);
  while (remaining > 0) {
    for (std::size_t i = 0; i < n; ++i) ratio[i] = losses[i] / static_cast<double>(alloc[i]);
    const std::size_t idx = argmax(ratio);
    alloc[idx] += unit;
    remaining -= unit;
  }
  return alloc;
}

std::vector<std::size_t> fit_budgets_to_heads(std::span<const std::size_t> counts,
                                              std::span<const double> losses,
                                              std::size_t n_heads) {
  if (counts.size() != losses.size()) throw ConfigError("one loss per layer is required");
  std::vector<std::size_t> divisors;
  for (std::size_t d = 1; d <= n_heads; ++d)
    if (n_heads % d == 0) divisors.push_back(d);

  const std::size_t total = std::accumulate(counts.begin(), counts.end(), std::size_t{0});
  std::vector<std::size_t> out(counts.begin(), counts.end());
  for (auto& c : out) {
    auto it = std::upper_bound(divisors.begin(), divisors.end(), c);
    if (it == divisors.begin()) throw ConfigError("layer budget of 0 heads");
    c = *std::prev(it);
  }
  std::size_t freed = total - std::accumulate(out.begin(), out.end(), std::size_t{0});
  while (freed > 0) {
    std::size_t best = out.size();
    double best_ratio = -1.0;
    for (std::size_t i = 0; i < out.size(); ++i) {
      auto it = std::upper_bound(divisors.begin(), divisors.end(), out[i]);
      if (it == divisors.end() || *it - out[i] > freed) continue;
      const double r = losses[i] / static_cast<double>(out[i]);
      if (r > best_ratio) {
        best_ratio = r;
        best = i;
      }
    }
    if (best == out.size()) {
      throw ConfigError("budget of " + std::to_string(total) + " heads cannot be split into " +
                        "per-layer divisors of " + std::to_string(n_heads));
    }
    const std::size_t next = *std::upper_bound(divisors.begin(), divisors.end(), out[best]);
    freed -= next - out[best];
    out[best] = next;
  }
  return out;
}

std::vector<std::size_t> permutation_from_groups(const HeadGroups& groups, std::size_t n_heads) {
  validate_partition(groups, n_heads);
  std::vector<std::size_t> perm;
  perm.reserve(n_heads);
  for (const auto& g : groups) perm.insert(perm.end(), g.begin(), g.end());
  return perm;
}

namespace {

void check_permutation(std::span<const std::size_t> perm, std::size_t n) {
  if (perm.size() != n) throw DomainError("permutation length differs from head count");
  std::vector<bool> seen(n, false);
  for (std::size_t p : perm) {
    if (p >= n || seen[p]) throw DomainError("invalid head permutation");
    seen[p] = true;
  }
}

}  // namespace

AttentionLayer permute_heads(const AttentionLayer& layer, std::span<const std::size_t> perm) {
  const std::size_t n = layer.w_q.size();
  if (layer.w_k.size() != n || layer.w_v.size() != n) {
    throw TopologyError("head permutation requires one key and value head per query head");
  }
  check_permutation(perm, n);
  const std::size_t dk = layer.head_dim();
  AttentionLayer out;
  out.w_o = Matrix(layer.w_o.rows(), layer.w_o.cols());
  for (std::size_t i = 0; i < n; ++i) {
    out.w_q.push_back(layer.w_q[perm[i]]);
    out.w_k.push_back(layer.w_k[perm[i]]);
    out.w_v.push_back(layer.w_v[perm[i]]);
    for (std::size_t r = 0; r < dk; ++r) {
      auto src = layer.w_o.row(perm[i] * dk + r);
      std::copy(src.begin(), src.end(), out.w_o.row(i * dk + r).begin());
    }
  }
  return out;
}

HeadGroups remap_groups(const HeadGroups& groups, std::span<const std::size_t> perm) {
  check_permutation(perm, perm.size());
  std::vector<std::size_t> position(perm.size());
  for (std::size_t i = 0; i < perm.size(); ++i) position[perm[i]] = i;
  HeadGroups out = groups;
  for (auto& g : out)
    for (auto& h : g) h = position.at(h);
  return out;
}

}  // namespace dha
