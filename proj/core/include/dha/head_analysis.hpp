// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <string>

#include "dha/attention.hpp"
#include "dha/linalg.hpp"

namespace dha {

enum class HeadKind { kQuery, kKey, kValue };

std::string to_string(HeadKind k);
/// Accepts "q"/"query", "k"/"key", "v"/"value".
HeadKind parse_head_kind(const std::string& s);

/// Pairwise head similarities of one projection kind in one layer.
struct SimilarityMatrix {
  HeadKind kind = HeadKind::kKey;
  Matrix values;

  std::size_t size() const { return values.rows(); }
};

/// Linear, uncentered CKA: ||X^T Y||_F^2 / (||X^T X||_F * ||Y^T Y||_F).
/// Throws UndefinedSimilarityError if either argument is all zeros.
double cka(const Matrix& x, const Matrix& y);

/// The heads of `kind` in `layer` (w_q, w_k or w_v).
const std::vector<Matrix>& heads_of(const AttentionLayer& layer, HeadKind kind);

SimilarityMatrix head_similarity_matrix(const AttentionParams& params, std::size_t layer,
                                        HeadKind kind);

/// Mean of the strictly upper-triangular entries.
double layer_redundancy(const SimilarityMatrix& sim);

}  // namespace dha
