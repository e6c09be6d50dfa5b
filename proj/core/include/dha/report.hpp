// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <limits>
#include <string>
#include <vector>

#include "dha/head_analysis.hpp"
#include "dha/pipeline.hpp"
#include "dha/training.hpp"

namespace dha {

/// Shortest decimal that parses back to exactly `v`; "nan"/"inf" otherwise.
std::string format_number(double v);

/// Writes a header row then one row per entry. Throws IoError on failure.
void write_csv(const std::filesystem::path& path, const std::vector<std::string>& header,
               const std::vector<std::vector<std::string>>& rows);

/// Creates `dir` (and parents) when missing; throws IoError when it exists
/// but is not a directory or cannot be created.
void ensure_directory(const std::filesystem::path& dir);

/// step, lm_loss, fusion_loss, margin, lambda
void write_fusion_trace(const std::filesystem::path& path,
                        const std::vector<FusionTracePoint>& trace);

/// step, train_loss, val_loss (blank where a value was not measured)
void write_loss_curve(const std::filesystem::path& path, const std::vector<LossPoint>& curve);

/// head, then one column per head
void write_similarity_csv(const std::filesystem::path& path, const SimilarityMatrix& sim);

struct RedundancyRow {
  std::size_t layer = 0;
  double query = 0.0;
  double key = 0.0;
  double value = 0.0;
};

/// layer, q, k, v
void write_redundancy_csv(const std::filesystem::path& path, const std::vector<RedundancyRow>& rows);

/// layer, key_loss, value_loss, key_heads, value_heads
void write_layer_losses(const std::filesystem::path& path, const SearchResult& search);

/// Per layer and kind: loss, head budget, groups, grouping score.
void write_search_report(const std::filesystem::path& path, const SearchResult& search,
                         ScoreMode mode);

/// step, dha_loss, gqa_loss (validation losses)
void write_compare_curve(const std::filesystem::path& path, const CompareResult& result);

struct PhaseMetrics {
  std::string phase;
  std::size_t steps = 0;
  double lm_loss = 0.0;
  double fusion_loss = std::numeric_limits<double>::quiet_NaN();  // null in JSON when NaN
  std::uint64_t kv_bytes = 0;
  std::size_t params = 0;
};

/// Metrics for the source model and each phase of a transform.
std::vector<PhaseMetrics> transform_metrics(const ToyModel& mha, const TransformResult& result,
                                            const KvCacheSpec& spec);

/// {"phases": [{phase, steps, lm_loss, fusion_loss, kv_bytes, params}, ...]}
/// with keys in that order, plus the kv byte ratio of last to first phase.
void write_metrics(const std::filesystem::path& path, const std::vector<PhaseMetrics>& phases);

}  // namespace dha
