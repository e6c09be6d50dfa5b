// SPDX-License-Identifier: Apache-2.0
#include "dha/head_analysis.hpp"

#include <cmath>

#include "dha/errors.hpp"

namespace dha {

std::string to_string(HeadKind k) {
  switch (k) {
    case HeadKind::kQuery: return "q";
    case HeadKind::kKey: return "k";
    case HeadKind::kValue: return "v";
  }
  return "?";
}

HeadKind parse_head_kind(const std::string& s) {
  if (s == "q" || s == "query") return HeadKind::kQuery;
  if (s == "k" || s == "key") return HeadKind::kKey;
  if (s == "v" || s == "value") return HeadKind::kValue;
  throw ConfigError("unknown head kind '" + s + "'");
}

double cka(const Matrix& x, const Matrix& y) {
  if (x.rows() != y.rows()) {
    throw DimensionError("cka: row counts differ, " + x.shape_string() + " vs " +
                         y.shape_string());
  }
  const double xx = frobenius_norm_sq(matmul_tn(x, x));
  const double yy = frobenius_norm_sq(matmul_tn(y, y));
  if (xx == 0.0 || yy == 0.0) throw UndefinedSimilarityError("cka of a zero matrix");
  // one square root of the product keeps cka(x, x) exactly 1
  return frobenius_norm_sq(matmul_tn(x, y)) / std::sqrt(xx * yy);
}

const std::vector<Matrix>& heads_of(const AttentionLayer& layer, HeadKind kind) {
  switch (kind) {
    case HeadKind::kQuery: return layer.w_q;
    case HeadKind::kKey: return layer.w_k;
    case HeadKind::kValue: return layer.w_v;
  }
  throw DomainError("invalid head kind");
}

SimilarityMatrix head_similarity_matrix(const AttentionParams& params, std::size_t layer,
                                        HeadKind kind) {
  if (layer >= params.size()) {
    throw DomainError("layer " + std::to_string(layer) + " out of range (model has " +
                      std::to_string(params.size()) + " layers)");
  }
  const auto& heads = heads_of(params[layer], kind);
  const std::size_t n = heads.size();
  SimilarityMatrix sim{kind, Matrix(n, n)};
  for (std::size_t i = 0; i < n; ++i) {
    sim.values(i, i) = cka(heads[i], heads[i]);
    for (std::size_t j = i + 1; j < n; ++j) {
      const double v = cka(heads[i], heads[j]);
      sim.values(i, j) = v;
      sim.values(j, i) = v;
    }
  }
  return sim;
}

double layer_redundancy(const SimilarityMatrix& sim) {
  const std::size_t n = sim.size();
  if (n < 2) throw DomainError("redundancy needs at least two heads");
  double acc = 0.0;
  for (std::size_t i = 0; i + 1 < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j) acc += sim.values(i, j);
  return 2.0 * acc / static_cast<double>(n * (n - 1));
}

}  // namespace dha
