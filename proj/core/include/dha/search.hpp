// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "dha/attention.hpp"
#include "dha/fusion.hpp"
#include "dha/head_analysis.hpp"
#include "dha/linalg.hpp"

namespace dha {

/// Symmetric head-to-head affinity; higher means more alike.
struct ScoreMatrix {
  Matrix scores;

  std::size_t size() const { return scores.rows(); }
  /// Throws DomainError unless square, finite and symmetric within 1e-9.
  void validate() const;
};

enum class ScoreMode { kCka, kNegMse };

std::string to_string(ScoreMode m);
ScoreMode parse_score_mode(const std::string& s);

/// mode kCka: pairwise CKA of the weight matrices.
/// mode kNegMse: minus the mean squared difference of the weight matrices.
ScoreMatrix head_score_matrix(const AttentionParams& params, std::size_t layer, HeadKind kind,
                              ScoreMode mode);

/// Sum over groups of sum_{i,j in group} m[i][j], halved (diagonal included).
double grouping_score(const ScoreMatrix& m, const HeadGroups& groups);

struct AnnealOptions {
  double initial_temperature = 100.0;
  double min_temperature = 0.001;
  double cooling = 0.9;
  std::size_t restarts = 8;  // independent annealing runs; the best result wins
  bool keep_best = true;     // return the best grouping seen instead of the last state
};

struct AnnealResult {
  HeadGroups groups;
  double score = 0.0;
};

/// Simulated annealing over equal-size partitions: random initial grouping,
/// one random cross-group swap per temperature step, accepted when it raises
/// the score or when exp(delta / T) exceeds a uniform draw. Restarts draw
/// from one RNG stream in sequence; with restarts = 1 and keep_best = false
/// this is exactly the reference procedure. The returned score is always
/// grouping_score of the returned groups.
AnnealResult anneal_grouping(const ScoreMatrix& m, std::size_t n_groups, std::uint64_t seed,
                             const AnnealOptions& options = {});

/// Greedy per-layer head budget allocation. `alloc_set` is ordered
/// ascending; its first entry is both the minimum per layer and the greedy
/// increment, its last entry is the size a single high-loss layer is
/// upgraded to first. With alloc_set = {4, 8, 16} this is the reference
/// procedure. Ties in every argmax go to the lowest layer index.
std::vector<std::size_t> allocate_layer_budgets(std::span<const double> losses,
                                                std::size_t total,
                                                std::span<const std::size_t> alloc_set);

/// Adjusts counts so every layer's count divides `n_heads` (equal-size
/// groups) while keeping the total. Counts above n_heads are capped;
/// non-divisors drop to the next divisor below; the freed heads are handed,
/// one divisor step at a time, to the layer with the largest loss / count
/// whose next divisor still fits. Throws ConfigError if heads are left over.
std::vector<std::size_t> fit_budgets_to_heads(std::span<const std::size_t> counts,
                                              std::span<const double> losses,
                                              std::size_t n_heads);

/// Head order that makes every group contiguous (groups in order).
std::vector<std::size_t> permutation_from_groups(const HeadGroups& groups, std::size_t n_heads);

/// Reorders query/key/value heads and the matching d_k-row blocks of w_o.
/// Position i of the result holds original head perm[i]. The forward
/// function is unchanged.
AttentionLayer permute_heads(const AttentionLayer& layer, std::span<const std::size_t> perm);

/// Renames heads in `groups` after permute_heads(perm).
HeadGroups remap_groups(const HeadGroups& groups, std::span<const std::size_t> perm);

}  // namespace dha
