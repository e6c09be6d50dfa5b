// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cmath>
#include <limits>

#include "dha/errors.hpp"
#include "dha/head_analysis.hpp"
#include "oracles.hpp"

namespace dha {
namespace {

Matrix random_orthogonal(std::size_t n, std::mt19937_64& rng) {
  // Gram-Schmidt on a random square matrix
  Matrix q = oracle::random_matrix(n, n, rng);
  for (std::size_t c = 0; c < n; ++c) {
    for (std::size_t p = 0; p < c; ++p) {
      double dot = 0.0;
      for (std::size_t r = 0; r < n; ++r) dot += q(r, c) * q(r, p);
      for (std::size_t r = 0; r < n; ++r) q(r, c) -= dot * q(r, p);
    }
    double norm = 0.0;
    for (std::size_t r = 0; r < n; ++r) norm += q(r, c) * q(r, c);
    norm = std::sqrt(norm);
    for (std::size_t r = 0; r < n; ++r) q(r, c) /= norm;
  }
  return q;
}

TEST(Cka, SelfSimilarityIsOne) {
  std::mt19937_64 rng(1);
  const Matrix x = oracle::random_matrix(16, 4, rng);
  EXPECT_NEAR(cka(x, x), 1.0, 1e-12);
}

TEST(Cka, OrthogonalColumnSpacesGiveZero) {
  const Matrix x{{1, 0}, {0, 0}, {0, 0}};
  const Matrix y{{0, 0}, {1, 0}, {0, 1}};
  EXPECT_EQ(cka(x, y), 0.0);
}

TEST(Cka, MatchesDirectOracle) {
  std::mt19937_64 rng(2);
  for (int i = 0; i < 10; ++i) {
    const Matrix x = oracle::random_matrix(12, 3, rng);
    const Matrix y = oracle::random_matrix(12, 5, rng);
    EXPECT_NEAR(cka(x, y), oracle::cka_direct(x, y), 1e-12);
  }
}

TEST(Cka, InvariantToScaling) {
  std::mt19937_64 rng(3);
  const Matrix x = oracle::random_matrix(20, 4, rng);
  const Matrix y = oracle::random_matrix(20, 4, rng);
  EXPECT_NEAR(cka(x * 3.7, y * 0.01), cka(x, y), 1e-9);
}

TEST(Cka, InvariantToOrthogonalTransform) {
  std::mt19937_64 rng(4);
  const Matrix x = oracle::random_matrix(20, 4, rng);
  const Matrix y = oracle::random_matrix(20, 4, rng);
  const Matrix q = random_orthogonal(4, rng);
  EXPECT_NEAR(cka(matmul(x, q), y), cka(x, y), 1e-9);
  EXPECT_NEAR(cka(x, matmul(y, q)), cka(x, y), 1e-9);
}

TEST(Cka, SymmetricAndBounded) {
  std::mt19937_64 rng(5);
  for (int i = 0; i < 20; ++i) {
    const Matrix x = oracle::random_matrix(10, 3, rng);
    const Matrix y = oracle::random_matrix(10, 3, rng);
    const double s = cka(x, y);
    EXPECT_NEAR(s, cka(y, x), 1e-14);
    EXPECT_GE(s, 0.0);
    EXPECT_LE(s, 1.0 + 1e-12);
  }
}

TEST(Cka, ZeroMatrixIsUndefined) {
  const Matrix x(4, 2, 0.0);
  const Matrix y{{1, 0}, {0, 1}, {0, 0}, {0, 0}};
  EXPECT_THROW(cka(x, y), UndefinedSimilarityError);
  EXPECT_THROW(cka(y, x), UndefinedSimilarityError);
}

TEST(Cka, RowMismatchThrows) {
  EXPECT_THROW(cka(Matrix(3, 2, 1.0), Matrix(4, 2, 1.0)), DimensionError);
}

TEST(SimilarityMatrix, DuplicateHeadsGiveAllOnes) {
  std::mt19937_64 rng(6);
  AttentionLayer layer = oracle::random_layer(4, 2, 4, 4, rng);
  for (std::size_t h = 1; h < 4; ++h) layer.w_v[h] = layer.w_v[0];
  const SimilarityMatrix sim = head_similarity_matrix({layer}, 0, HeadKind::kValue);
  ASSERT_EQ(sim.size(), 4u);
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t j = 0; j < 4; ++j) EXPECT_NEAR(sim.values(i, j), 1.0, 1e-12);
  EXPECT_NEAR(layer_redundancy(sim), 1.0, 1e-12);
}

TEST(SimilarityMatrix, SymmetricWithUnitDiagonal) {
  std::mt19937_64 rng(7);
  const AttentionLayer layer = oracle::random_layer(5, 3, 5, 5, rng);
  for (HeadKind kind : {HeadKind::kQuery, HeadKind::kKey, HeadKind::kValue}) {
    const SimilarityMatrix sim = head_similarity_matrix({layer}, 0, kind);
    EXPECT_EQ(sim.kind, kind);
    for (std::size_t i = 0; i < 5; ++i) {
      EXPECT_NEAR(sim.values(i, i), 1.0, 1e-12);
      for (std::size_t j = 0; j < 5; ++j) EXPECT_EQ(sim.values(i, j), sim.values(j, i));
    }
  }
}

TEST(SimilarityMatrix, LayerOutOfRangeThrows) {
  std::mt19937_64 rng(8);
  const AttentionLayer layer = oracle::random_layer(2, 2, 2, 2, rng);
  EXPECT_THROW(head_similarity_matrix({layer}, 1, HeadKind::kKey), DomainError);
}

TEST(LayerRedundancy, MeanOfUpperTriangle) {
  SimilarityMatrix sim;
  sim.values = Matrix{{1, 0.2, 0.4}, {0.2, 1, 0.9}, {0.4, 0.9, 1}};
  EXPECT_NEAR(layer_redundancy(sim), 0.5, 1e-15);
}

TEST(LayerRedundancy, SingleHeadIsUndefined) {
  SimilarityMatrix sim;
  sim.values = Matrix{{1}};
  EXPECT_THROW(layer_redundancy(sim), DomainError);
}

TEST(HeadKindNames, RoundTrip) {
  for (HeadKind k : {HeadKind::kQuery, HeadKind::kKey, HeadKind::kValue})
    EXPECT_EQ(parse_head_kind(to_string(k)), k);
  EXPECT_EQ(parse_head_kind("v"), HeadKind::kValue);
  EXPECT_THROW(parse_head_kind("x"), ConfigError);
}

}  // namespace
}  // namespace dha
