// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "dha/linalg.hpp"

namespace dha {

/// Shape of a decoder-only toy transformer.
struct ModelConfig {
  std::size_t n_layers = 4;
  std::size_t n_query_heads = 8;
  std::size_t head_dim = 8;
  std::size_t vocab_size = 64;
  std::size_t max_seq = 128;
  std::size_t ffn_dim = 128;

  std::size_t d_model() const noexcept { return n_query_heads * head_dim; }
  /// Throws ConfigError when any count is zero.
  void validate() const;
  bool operator==(const ModelConfig&) const = default;
};

/// Bias-free projections of one attention layer. Every per-head matrix is
/// (d_model x head_dim); w_o is (d_model x d_model) and consumes the
/// concatenation of all query-head outputs.
struct AttentionLayer {
  std::vector<Matrix> w_q;
  std::vector<Matrix> w_k;
  std::vector<Matrix> w_v;
  Matrix w_o;

  std::size_t head_dim() const { return w_q.empty() ? 0 : w_q.front().cols(); }
  std::size_t d_model() const { return w_o.rows(); }
};

using AttentionParams = std::vector<AttentionLayer>;

enum class AttentionVariant { kMha, kGqa, kDha };

std::string to_string(AttentionVariant v);
/// Parses "mha" / "gqa" / "dha"; throws ConfigError otherwise.
AttentionVariant parse_variant(const std::string& s);

/// Key/value head counts and query-to-head maps of one layer.
struct LayerTopology {
  std::size_t key_heads = 0;
  std::size_t value_heads = 0;
  std::vector<std::size_t> key_map;    // query head -> key head
  std::vector<std::size_t> value_map;  // query head -> value head

  static LayerTopology identity(std::size_t n_heads);
  /// Contiguous grouping shared by keys and values: h -> floor(h * G / H).
  static LayerTopology grouped(std::size_t n_heads, std::size_t n_groups);

  /// Checks map ranges, surjectivity and head-count bounds.
  void validate(std::size_t n_query_heads) const;
  bool is_identity() const;
  bool operator==(const LayerTopology&) const = default;
};

struct DhaTopology {
  std::vector<LayerTopology> layers;

  static DhaTopology identity(std::size_t n_layers, std::size_t n_heads);
  static DhaTopology grouped(std::size_t n_layers, std::size_t n_heads, std::size_t n_groups);

  void validate(std::size_t n_query_heads) const;
  /// Sum over layers of key_heads + value_heads.
  std::size_t total_kv_heads() const;
  bool operator==(const DhaTopology&) const = default;
};

/// Throws TopologyError unless `layer` holds the head counts `topo` requires.
void check_layer_matches(const AttentionLayer& layer, const LayerTopology& topo);

/// One weighted contribution to a query head's key or value. An empty
/// coefficient span means weight 1 on every channel; a single entry is a
/// scalar weight; head_dim entries weight each channel separately.
struct HeadTerm {
  std::size_t head = 0;
  std::span<const double> coeff;
};

/// For each query head, the terms whose sum forms its key and its value.
struct HeadRouting {
  std::vector<std::vector<HeadTerm>> key;
  std::vector<std::vector<HeadTerm>> value;
};

HeadRouting routing_from_topology(const LayerTopology& topo);

/// Coefficient gradients, indexed [query head][term][coefficient].
struct RoutingGrad {
  std::vector<std::vector<std::vector<double>>> key;
  std::vector<std::vector<std::vector<double>>> value;
};

/// Activations kept by attention_forward for attention_backward.
struct AttentionCache {
  Matrix input;
  std::vector<Matrix> query;       // per query head
  std::vector<Matrix> key_base;    // x * w_k[m]
  std::vector<Matrix> value_base;  // x * w_v[m]
  std::vector<Matrix> key_mix;     // per query head
  std::vector<Matrix> value_mix;   // per query head
  std::vector<Matrix> probs;       // per query head, (p x p)
  Matrix concat;
};

/// Logit assigned to future positions before the softmax.
inline constexpr double kMaskedLogit = -1e30;

/// Causal attention of x (p x d_model) with the given key/value routing.
Matrix attention_forward(const Matrix& x, const AttentionLayer& layer, const HeadRouting& routing,
                         AttentionCache* cache = nullptr);

/// Accumulates parameter gradients into `grad` (same shapes as `layer`) and,
/// when `coeff_grad` is non-null, coefficient gradients shaped like
/// `routing`. Returns the gradient with respect to the input.
Matrix attention_backward(const AttentionCache& cache, const AttentionLayer& layer,
                          const HeadRouting& routing, const Matrix& d_out,
                          AttentionLayer& grad, RoutingGrad* coeff_grad = nullptr);

/// Zero-filled gradient buffer with the same shapes as `layer`.
AttentionLayer zeros_like(const AttentionLayer& layer);

Matrix mha_forward(const Matrix& x, const AttentionLayer& layer);
Matrix dha_forward(const Matrix& x, const AttentionLayer& layer, const LayerTopology& topo);
/// Attention-only stack: each layer consumes the previous layer's output.
Matrix dha_forward(const Matrix& x, std::span<const AttentionLayer> layers,
                   const DhaTopology& topo);

/// Mean-pools contiguous groups of key and value heads into n_groups heads.
std::pair<AttentionParams, DhaTopology> gqa_init_mean_pool(const AttentionParams& mha,
                                                           std::size_t n_groups);

struct KvCacheSpec {
  std::uint64_t batch = 1;
  std::uint64_t seq_len = 1;
  std::uint64_t bytes_per_element = 2;

  void validate() const;
};

std::uint64_t kv_cache_bytes_mha(const ModelConfig& config, const KvCacheSpec& spec);
std::uint64_t kv_cache_bytes_gqa(const ModelConfig& config, std::size_t n_groups,
                                 const KvCacheSpec& spec);
std::uint64_t kv_cache_bytes(const ModelConfig& config, const DhaTopology& topo,
                             const KvCacheSpec& spec);

}  // namespace dha
