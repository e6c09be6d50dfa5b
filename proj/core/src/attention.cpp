// SPDX-License-Identifier: Apache-2.0
#include "dha/attention.hpp"

#include <cmath>

#include "dha/errors.hpp"

namespace dha {

void ModelConfig::validate() const {
  if (n_layers == 0 || n_query_heads == 0 || head_dim == 0 || vocab_size == 0 ||
      max_seq == 0 || ffn_dim == 0) {
    throw ConfigError("model config: all counts must be >= 1");
  }
}

std::string to_string(AttentionVariant v) {
  switch (v) {
    case AttentionVariant::kMha: return "mha";
    case AttentionVariant::kGqa: return "gqa";
    case AttentionVariant::kDha: return "dha";
  }
  return "unknown";
}

AttentionVariant parse_variant(const std::string& s) {
  if (s == "mha") return AttentionVariant::kMha;
  if (s == "gqa") return AttentionVariant::kGqa;
  if (s == "dha") return AttentionVariant::kDha;
  throw ConfigError("unknown attention variant '" + s + "'");
}

LayerTopology LayerTopology::identity(std::size_t n_heads) {
  LayerTopology t;
  t.key_heads = t.value_heads = n_heads;
  t.key_map.resize(n_heads);
  for (std::size_t h = 0; h < n_heads; ++h) t.key_map[h] = h;
  t.value_map = t.key_map;
  return t;
}

LayerTopology LayerTopology::grouped(std::size_t n_heads, std::size_t n_groups) {
  if (n_groups == 0 || n_heads % n_groups != 0) {
    throw ConfigError(std::to_string(n_heads) + " heads cannot form " +
                      std::to_string(n_groups) + " equal groups");
  }
  LayerTopology t;
  t.key_heads = t.value_heads = n_groups;
  t.key_map.resize(n_heads);
  for (std::size_t h = 0; h < n_heads; ++h) t.key_map[h] = h * n_groups / n_heads;
  t.value_map = t.key_map;
  return t;
}

void LayerTopology::validate(std::size_t n_query_heads) const {
  auto check = [&](const std::vector<std::size_t>& map, std::size_t n, const char* kind) {
    if (map.size() != n_query_heads) {
      throw TopologyError(std::string(kind) + " map has " + std::to_string(map.size()) +
                          " entries, expected " + std::to_string(n_query_heads));
    }
    if (n == 0 || n > n_query_heads) {
      throw TopologyError(std::string(kind) + " head count " + std::to_string(n) +
                          " outside [1, " + std::to_string(n_query_heads) + "]");
    }
    std::vector<bool> hit(n, false);
    for (std::size_t h = 0; h < map.size(); ++h) {
      if (map[h] >= n) {
        throw TopologyError(std::string(kind) + " map entry " + std::to_string(map[h]) +
                            " for query head " + std::to_string(h) + " out of range " +
                            std::to_string(n));
      }
      hit[map[h]] = true;
    }
    for (std::size_t j = 0; j < n; ++j) {
      if (!hit[j]) {
        throw TopologyError(std::string(kind) + " head " + std::to_string(j) +
                            " is not used by any query head");
      }
    }
  };
  check(key_map, key_heads, "key");
  check(value_map, value_heads, "value");
}

bool LayerTopology::is_identity() const {
  return *this == identity(key_map.size());
}

DhaTopology DhaTopology::identity(std::size_t n_layers, std::size_t n_heads) {
  return DhaTopology{std::vector<LayerTopology>(n_layers, LayerTopology::identity(n_heads))};
}

DhaTopology DhaTopology::grouped(std::size_t n_layers, std::size_t n_heads,
                                 std::size_t n_groups) {
  return DhaTopology{
      std::vector<LayerTopology>(n_layers, LayerTopology::grouped(n_heads, n_groups))};
}

void DhaTopology::validate(std::size_t n_query_heads) const {
  for (const auto& l : layers) l.validate(n_query_heads);
}

std::size_t DhaTopology::total_kv_heads() const {
  std::size_t n = 0;
  for (const auto& l : layers) n += l.key_heads + l.value_heads;
  return n;
}

void check_layer_matches(const AttentionLayer& layer, const LayerTopology& topo) {
  topo.validate(layer.w_q.size());
  if (layer.w_k.size() != topo.key_heads || layer.w_v.size() != topo.value_heads) {
    throw TopologyError("layer has " + std::to_string(layer.w_k.size()) + " key / " +
                        std::to_string(layer.w_v.size()) + " value heads, topology expects " +
                        std::to_string(topo.key_heads) + " / " +
                        std::to_string(topo.value_heads));
  }
}

HeadRouting routing_from_topology(const LayerTopology& topo) {
  HeadRouting r;
  r.key.resize(topo.key_map.size());
  r.value.resize(topo.value_map.size());
  for (std::size_t h = 0; h < topo.key_map.size(); ++h) {
    r.key[h] = {HeadTerm{topo.key_map[h], {}}};
    r.value[h] = {HeadTerm{topo.value_map[h], {}}};
  }
  return r;
}

namespace {

void check_shapes(const Matrix& x, const AttentionLayer& layer, const HeadRouting& routing) {
  const std::size_t n_heads = layer.w_q.size();
  if (n_heads == 0) throw TopologyError("attention layer has no query heads");
  const std::size_t dk = layer.head_dim();
  const std::size_t dm = layer.d_model();
  if (x.cols() != dm) {
    throw DimensionError("attention input " + x.shape_string() + " does not match d_model " +
                         std::to_string(dm));
  }
  if (layer.w_o.cols() != dm || n_heads * dk != dm) {
    throw DimensionError("output projection " + layer.w_o.shape_string() +
                         " inconsistent with " + std::to_string(n_heads) + " heads of dim " +
                         std::to_string(dk));
  }
  if (routing.key.size() != n_heads || routing.value.size() != n_heads) {
    throw TopologyError("routing covers " + std::to_string(routing.key.size()) +
                        " query heads, layer has " + std::to_string(n_heads));
  }
  auto check_terms = [&](const std::vector<std::vector<HeadTerm>>& mix, std::size_t n_src,
                         const char* kind) {
    for (std::size_t h = 0; h < mix.size(); ++h) {
      if (mix[h].empty()) {
        throw TopologyError(std::string(kind) + " routing of query head " + std::to_string(h) +
                            " is empty");
      }
      for (const auto& t : mix[h]) {
        if (t.head >= n_src) {
          throw TopologyError(std::string(kind) + " head index " + std::to_string(t.head) +
                              " out of range " + std::to_string(n_src));
        }
        if (!t.coeff.empty() && t.coeff.size() != 1 && t.coeff.size() != dk) {
          throw DimensionError(std::string(kind) + " coefficient length " +
                               std::to_string(t.coeff.size()) + " is neither 1 nor " +
                               std::to_string(dk));
        }
      }
    }
  };
  check_terms(routing.key, layer.w_k.size(), "key");
  check_terms(routing.value, layer.w_v.size(), "value");
  auto check_heads = [&](const std::vector<Matrix>& ws, const char* kind) {
    for (const auto& w : ws) {
      if (w.rows() != dm || w.cols() != dk) {
        throw DimensionError(std::string(kind) + " head " + w.shape_string() + ", expected " +
                             std::to_string(dm) + "x" + std::to_string(dk));
      }
    }
  };
  check_heads(layer.w_q, "query");
  check_heads(layer.w_k, "key");
  check_heads(layer.w_v, "value");
}

Matrix mix_heads(const std::vector<HeadTerm>& terms, const std::vector<Matrix>& base) {
  if (terms.size() == 1 && terms[0].coeff.empty()) return base[terms[0].head];
  const Matrix& first = base[terms[0].head];
  Matrix out(first.rows(), first.cols());
  for (const auto& t : terms) {
    const Matrix& src = base[t.head];
    for (std::size_t r = 0; r < src.rows(); ++r) {
      auto s = src.row(r);
      auto o = out.row(r);
      for (std::size_t c = 0; c < s.size(); ++c) {
        const double w = t.coeff.empty() ? 1.0 : t.coeff[t.coeff.size() == 1 ? 0 : c];
        o[c] += w * s[c];
      }
    }
  }
  return out;
}

// Scatters d_mix back onto the base activations and the coefficients.
void unmix_heads(const std::vector<HeadTerm>& terms, const std::vector<Matrix>& base,
                 const Matrix& d_mix, std::vector<Matrix>& d_base,
                 std::vector<std::vector<double>>* d_coeff) {
  if (d_coeff) {
    d_coeff->resize(terms.size());
    for (std::size_t j = 0; j < terms.size(); ++j) (*d_coeff)[j].assign(terms[j].coeff.size(), 0.0);
  }
  for (std::size_t j = 0; j < terms.size(); ++j) {
    const auto& t = terms[j];
    const Matrix& src = base[t.head];
    Matrix& dst = d_base[t.head];
    for (std::size_t r = 0; r < d_mix.rows(); ++r) {
      auto g = d_mix.row(r);
      auto s = src.row(r);
      auto d = dst.row(r);
      for (std::size_t c = 0; c < g.size(); ++c) {
        const std::size_t ci = t.coeff.size() == 1 ? 0 : c;
        const double w = t.coeff.empty() ? 1.0 : t.coeff[ci];
        d[c] += w * g[c];
        if (d_coeff && !t.coeff.empty()) (*d_coeff)[j][ci] += g[c] * s[c];
      }
    }
  }
}

}  // namespace

Matrix attention_forward(const Matrix& x, const AttentionLayer& layer, const HeadRouting& routing,
                         AttentionCache* cache) {
  check_shapes(x, layer, routing);
  const std::size_t n_heads = layer.w_q.size();
  const std::size_t dk = layer.head_dim();
  const std::size_t p = x.rows();
  const double scale = 1.0 / std::sqrt(static_cast<double>(dk));

  std::vector<Matrix> key_base, value_base;
  key_base.reserve(layer.w_k.size());
  value_base.reserve(layer.w_v.size());
  for (const auto& w : layer.w_k) key_base.push_back(matmul(x, w));
  for (const auto& w : layer.w_v) value_base.push_back(matmul(x, w));

  Matrix concat(p, n_heads * dk);
  if (cache) {
    cache->query.clear();
    cache->key_mix.clear();
    cache->value_mix.clear();
    cache->probs.clear();
  }
  for (std::size_t h = 0; h < n_heads; ++h) {
    Matrix q = matmul(x, layer.w_q[h]);
    Matrix k = mix_heads(routing.key[h], key_base);
    Matrix v = mix_heads(routing.value[h], value_base);
    Matrix scores = matmul_nt(q, k);
    for (std::size_t i = 0; i < p; ++i) {
      for (std::size_t j = 0; j < p; ++j) {
        scores(i, j) = j > i ? kMaskedLogit : scores(i, j) * scale;
      }
    }
    Matrix probs = softmax_rows(scores);
    set_column_block(concat, h * dk, matmul(probs, v));
    if (cache) {
      cache->query.push_back(std::move(q));
      cache->key_mix.push_back(std::move(k));
      cache->value_mix.push_back(std::move(v));
      cache->probs.push_back(std::move(probs));
    }
  }
  Matrix out = matmul(concat, layer.w_o);
  if (cache) {
    cache->input = x;
    cache->key_base = std::move(key_base);
    cache->value_base = std::move(value_base);
    cache->concat = std::move(concat);
  }
  return out;
}

AttentionLayer zeros_like(const AttentionLayer& layer) {
  AttentionLayer g;
  auto zero = [](const std::vector<Matrix>& ws) {
    std::vector<Matrix> out;
    out.reserve(ws.size());
    for (const auto& w : ws) out.emplace_back(w.rows(), w.cols());
    return out;
  };
  g.w_q = zero(layer.w_q);
  g.w_k = zero(layer.w_k);
  g.w_v = zero(layer.w_v);
  g.w_o = Matrix(layer.w_o.rows(), layer.w_o.cols());
  return g;
}

Matrix attention_backward(const AttentionCache& cache, const AttentionLayer& layer,
                          const HeadRouting& routing, const Matrix& d_out, AttentionLayer& grad,
                          RoutingGrad* coeff_grad) {
  const std::size_t n_heads = layer.w_q.size();
  const std::size_t dk = layer.head_dim();
  const std::size_t p = cache.input.rows();
  const double scale = 1.0 / std::sqrt(static_cast<double>(dk));
  const Matrix& x = cache.input;

  matmul_tn_acc(cache.concat, d_out, grad.w_o);
  const Matrix d_concat = matmul_nt(d_out, layer.w_o);

  std::vector<Matrix> d_key_base, d_value_base;
  for (const auto& kb : cache.key_base) d_key_base.emplace_back(kb.rows(), kb.cols());
  for (const auto& vb : cache.value_base) d_value_base.emplace_back(vb.rows(), vb.cols());
  if (coeff_grad) {
    coeff_grad->key.assign(n_heads, {});
    coeff_grad->value.assign(n_heads, {});
  }

  Matrix d_x(p, x.cols());
  for (std::size_t h = 0; h < n_heads; ++h) {
    const Matrix& probs = cache.probs[h];
    const Matrix d_head = column_block(d_concat, h * dk, dk);
    const Matrix d_probs = matmul_nt(d_head, cache.value_mix[h]);
    const Matrix d_value_mix = matmul_tn(probs, d_head);

    Matrix d_scores(p, p);
    for (std::size_t i = 0; i < p; ++i) {
      double dot = 0.0;
      for (std::size_t j = 0; j < p; ++j) dot += probs(i, j) * d_probs(i, j);
      for (std::size_t j = 0; j < p; ++j)
        d_scores(i, j) = probs(i, j) * (d_probs(i, j) - dot) * scale;
    }
    const Matrix d_query = matmul(d_scores, cache.key_mix[h]);
    const Matrix d_key_mix = matmul_tn(d_scores, cache.query[h]);

    unmix_heads(routing.key[h], cache.key_base, d_key_mix, d_key_base,
                coeff_grad ? &coeff_grad->key[h] : nullptr);
    unmix_heads(routing.value[h], cache.value_base, d_value_mix, d_value_base,
                coeff_grad ? &coeff_grad->value[h] : nullptr);

    matmul_tn_acc(x, d_query, grad.w_q[h]);
    d_x += matmul_nt(d_query, layer.w_q[h]);
  }
  for (std::size_t m = 0; m < layer.w_k.size(); ++m) {
    matmul_tn_acc(x, d_key_base[m], grad.w_k[m]);
    d_x += matmul_nt(d_key_base[m], layer.w_k[m]);
  }
  for (std::size_t m = 0; m < layer.w_v.size(); ++m) {
    matmul_tn_acc(x, d_value_base[m], grad.w_v[m]);
    d_x += matmul_nt(d_value_base[m], layer.w_v[m]);
  }
  return d_x;
}

Matrix mha_forward(const Matrix& x, const AttentionLayer& layer) {
  const std::size_t n = layer.w_q.size();
  if (layer.w_k.size() != n || layer.w_v.size() != n) {
    throw TopologyError("multi-head attention needs one key and value head per query head (" +
                        std::to_string(n) + " query, " + std::to_string(layer.w_k.size()) +
                        " key, " + std::to_string(layer.w_v.size()) + " value)");
  }
  return attention_forward(x, layer, routing_from_topology(LayerTopology::identity(n)));
}

Matrix dha_forward(const Matrix& x, const AttentionLayer& layer, const LayerTopology& topo) {
  check_layer_matches(layer, topo);
  return attention_forward(x, layer, routing_from_topology(topo));
}

Matrix dha_forward(const Matrix& x, std::span<const AttentionLayer> layers,
                   const DhaTopology& topo) {
  if (layers.size() != topo.layers.size()) {
    throw TopologyError("topology has " + std::to_string(topo.layers.size()) +
                        " layers, parameters have " + std::to_string(layers.size()));
  }
  Matrix h = x;
  for (std::size_t l = 0; l < layers.size(); ++l) h = dha_forward(h, layers[l], topo.layers[l]);
  return h;
}

std::pair<AttentionParams, DhaTopology> gqa_init_mean_pool(const AttentionParams& mha,
                                                           std::size_t n_groups) {
  AttentionParams out;
  DhaTopology topo;
  for (const auto& layer : mha) {
    const std::size_t n = layer.w_q.size();
    if (layer.w_k.size() != n || layer.w_v.size() != n) {
      throw TopologyError("mean pooling requires a multi-head attention layer");
    }
    LayerTopology lt = LayerTopology::grouped(n, n_groups);
    const std::size_t group_size = n / n_groups;
    AttentionLayer g;
    g.w_q = layer.w_q;
    g.w_o = layer.w_o;
    auto pool = [&](const std::vector<Matrix>& heads) {
      std::vector<Matrix> pooled;
      for (std::size_t grp = 0; grp < n_groups; ++grp) {
        Matrix acc(heads[0].rows(), heads[0].cols());
        for (std::size_t m = 0; m < group_size; ++m) acc += heads[grp * group_size + m];
        acc *= 1.0 / static_cast<double>(group_size);
        pooled.push_back(std::move(acc));
      }
      return pooled;
    };
    g.w_k = pool(layer.w_k);
    g.w_v = pool(layer.w_v);
    out.push_back(std::move(g));
    topo.layers.push_back(std::move(lt));
  }
  return {std::move(out), std::move(topo)};
}

void KvCacheSpec::validate() const {
  if (batch == 0 || seq_len == 0 || bytes_per_element == 0) {
    throw ConfigError("kv-cache spec: batch, seq_len and bytes_per_element must be >= 1");
  }
}

std::uint64_t kv_cache_bytes_mha(const ModelConfig& config, const KvCacheSpec& spec) {
  return kv_cache_bytes_gqa(config, config.n_query_heads, spec);
}

std::uint64_t kv_cache_bytes_gqa(const ModelConfig& config, std::size_t n_groups,
                                 const KvCacheSpec& spec) {
  spec.validate();
  return 2ull * config.n_layers * n_groups * spec.seq_len * config.head_dim * spec.batch *
         spec.bytes_per_element;
}

std::uint64_t kv_cache_bytes(const ModelConfig& config, const DhaTopology& topo,
                             const KvCacheSpec& spec) {
  spec.validate();
  std::uint64_t heads = 0;
  for (const auto& l : topo.layers) heads += l.key_heads + l.value_heads;
  return heads * spec.seq_len * config.head_dim * spec.batch * spec.bytes_per_element;
}

}  // namespace dha
