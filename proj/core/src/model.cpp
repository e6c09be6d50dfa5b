// SPDX-License-Identifier: Apache-2.0
#include "dha/model.hpp"

#include <cmath>
#include <random>

#include "dha/errors.hpp"

namespace dha {

namespace {

Matrix random_matrix(std::size_t rows, std::size_t cols, double stddev, std::mt19937_64& rng) {
  std::normal_distribution<double> dist(0.0, stddev);
  Matrix m(rows, cols);
  for (double& v : m.values()) v = dist(rng);
  return m;
}

void require_shape(const Matrix& m, std::size_t rows, std::size_t cols, const std::string& what) {
  if (m.rows() != rows || m.cols() != cols) {
    throw DimensionError(what + " is " + m.shape_string() + ", expected " + std::to_string(rows) +
                         "x" + std::to_string(cols));
  }
}

// Row-wise RMS normalisation; returns the per-row inverse RMS.
std::vector<double> rms_normalize(const Matrix& x, Matrix& y) {
  y = Matrix(x.rows(), x.cols());
  std::vector<double> inv(x.rows());
  for (std::size_t r = 0; r < x.rows(); ++r) {
    auto in = x.row(r);
    double ms = 0.0;
    for (double v : in) ms += v * v;
    ms /= static_cast<double>(in.size());
    inv[r] = 1.0 / std::sqrt(ms + kRmsEps);
    auto out = y.row(r);
    for (std::size_t c = 0; c < in.size(); ++c) out[c] = in[c] * inv[r];
  }
  return inv;
}

Matrix rms_backward(const Matrix& x, const std::vector<double>& inv, const Matrix& dy) {
  Matrix dx(x.rows(), x.cols());
  const double d = static_cast<double>(x.cols());
  for (std::size_t r = 0; r < x.rows(); ++r) {
    auto xr = x.row(r);
    auto gr = dy.row(r);
    double dot = 0.0;
    for (std::size_t c = 0; c < xr.size(); ++c) dot += xr[c] * gr[c];
    const double k = inv[r] * inv[r] * inv[r] * dot / d;
    auto out = dx.row(r);
    for (std::size_t c = 0; c < xr.size(); ++c) out[c] = inv[r] * gr[c] - k * xr[c];
  }
  return dx;
}

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

struct LayerTrace {
  Matrix h_in;
  std::vector<double> inv1;
  Matrix a;
  AttentionCache attn;
  Matrix h_mid;
  std::vector<double> inv2;
  Matrix b;
  Matrix pre;  // b * w_in
  Matrix act;  // silu(pre)
};

struct ForwardTrace {
  std::vector<LayerTrace> layers;
  Matrix h_final;
  std::vector<double> inv_final;
  Matrix normed_final;
  Matrix logits;
};

HeadRouting layer_routing(const ToyModel& model, const FusionOperator* op, std::size_t l) {
  if (op) return fusion_routing(*op, l);
  return routing_from_topology(model.topology.layers[l]);
}

void check_inputs(const ToyModel& model, const TokenSequence& inputs, const FusionOperator* op) {
  if (inputs.empty()) throw DomainError("empty input sequence");
  if (inputs.size() > model.config.max_seq) {
    throw DomainError("sequence of " + std::to_string(inputs.size()) + " positions exceeds max_seq " +
                      std::to_string(model.config.max_seq));
  }
  for (auto t : inputs) {
    if (t >= model.config.vocab_size) {
      throw DomainError("token " + std::to_string(t) + " outside vocabulary of " +
                        std::to_string(model.config.vocab_size));
    }
  }
  if (op) {
    if (model.variant != AttentionVariant::kMha) {
      throw TopologyError("a fusion operator can only be attached to an MHA model");
    }
    if (op->layers.size() != model.attention.size()) {
      throw TopologyError("fusion operator has " + std::to_string(op->layers.size()) +
                          " layers, model has " + std::to_string(model.attention.size()));
    }
  }
}

ForwardTrace run_forward(const ToyModel& model, const TokenSequence& inputs,
                         const FusionOperator* op, bool keep) {
  check_inputs(model, inputs, op);
  const std::size_t p = inputs.size();
  const std::size_t dm = model.config.d_model();
  ForwardTrace tr;
  Matrix h(p, dm);
  for (std::size_t i = 0; i < p; ++i) {
    auto e = model.token_embedding.row(inputs[i]);
    auto pe = model.position_embedding.row(i);
    auto out = h.row(i);
    for (std::size_t c = 0; c < dm; ++c) out[c] = e[c] + pe[c];
  }
  for (std::size_t l = 0; l < model.attention.size(); ++l) {
    LayerTrace lt;
    lt.inv1 = rms_normalize(h, lt.a);
    const HeadRouting routing = layer_routing(model, op, l);
    Matrix attn = attention_forward(lt.a, model.attention[l], routing, keep ? &lt.attn : nullptr);
    Matrix mid = h + attn;
    lt.inv2 = rms_normalize(mid, lt.b);
    lt.pre = matmul(lt.b, model.ffn[l].w_in);
    lt.act = lt.pre;
    for (double& v : lt.act.values()) v = v * sigmoid(v);
    Matrix next = mid + matmul(lt.act, model.ffn[l].w_out);
    if (keep) {
      lt.h_in = std::move(h);
      lt.h_mid = std::move(mid);
      tr.layers.push_back(std::move(lt));
    }
    h = std::move(next);
  }
  tr.inv_final = rms_normalize(h, tr.normed_final);
  tr.logits = matmul(tr.normed_final, model.output);
  tr.h_final = std::move(h);
  return tr;
}

// Cross-entropy summed over positions; fills d_logits with softmax - onehot
// scaled by `scale` when requested.
double cross_entropy(const Matrix& logits, const TokenSequence& targets, double scale,
                     Matrix* d_logits) {
  double total = 0.0;
  const Matrix probs = softmax_rows(logits);
  if (d_logits) *d_logits = Matrix(logits.rows(), logits.cols());
  for (std::size_t i = 0; i < targets.size(); ++i) {
    auto row = logits.row(i);
    double mx = row[0];
    for (double v : row) mx = std::max(mx, v);
    double sum = 0.0;
    for (double v : row) sum += std::exp(v - mx);
    total += mx + std::log(sum) - row[targets[i]];
    if (d_logits) {
      auto d = d_logits->row(i);
      auto pr = probs.row(i);
      for (std::size_t c = 0; c < d.size(); ++c) d[c] = scale * pr[c];
      d[targets[i]] -= scale;
    }
  }
  return total;
}

void split_sequence(const TokenSequence& seq, TokenSequence& inputs, TokenSequence& targets) {
  if (seq.size() < 2) throw DomainError("training sequences need at least two tokens");
  inputs.assign(seq.begin(), seq.end() - 1);
  targets.assign(seq.begin() + 1, seq.end());
}

std::size_t prediction_count(const TokenBatch& batch) {
  std::size_t n = 0;
  for (const auto& s : batch) n += s.size() < 2 ? 0 : s.size() - 1;
  if (n == 0) throw DomainError("batch has no predictable positions");
  return n;
}

}  // namespace

ToyModel ToyModel::init(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  std::mt19937_64 rng(seed);
  const std::size_t dm = config.d_model();
  const double s_model = 1.0 / std::sqrt(static_cast<double>(dm));
  ToyModel m;
  m.config = config;
  m.variant = AttentionVariant::kMha;
  m.topology = DhaTopology::identity(config.n_layers, config.n_query_heads);
  m.token_embedding = random_matrix(config.vocab_size, dm, 1.0, rng);
  m.position_embedding = random_matrix(config.max_seq, dm, 0.5, rng);
  for (std::size_t l = 0; l < config.n_layers; ++l) {
    AttentionLayer a;
    for (std::size_t h = 0; h < config.n_query_heads; ++h)
      a.w_q.push_back(random_matrix(dm, config.head_dim, s_model, rng));
    for (std::size_t h = 0; h < config.n_query_heads; ++h)
      a.w_k.push_back(random_matrix(dm, config.head_dim, s_model, rng));
    for (std::size_t h = 0; h < config.n_query_heads; ++h)
      a.w_v.push_back(random_matrix(dm, config.head_dim, s_model, rng));
    a.w_o = random_matrix(dm, dm, 0.5 * s_model, rng);
    m.attention.push_back(std::move(a));
    FeedForward f;
    f.w_in = random_matrix(dm, config.ffn_dim, s_model, rng);
    f.w_out = random_matrix(config.ffn_dim, dm, 0.5 / std::sqrt(static_cast<double>(config.ffn_dim)), rng);
    m.ffn.push_back(std::move(f));
  }
  m.output = random_matrix(dm, config.vocab_size, s_model, rng);
  return m;
}

void ToyModel::validate() const {
  config.validate();
  const std::size_t dm = config.d_model();
  const std::size_t dk = config.head_dim;
  require_shape(token_embedding, config.vocab_size, dm, "token embedding");
  require_shape(position_embedding, config.max_seq, dm, "position embedding");
  require_shape(output, dm, config.vocab_size, "output projection");
  if (attention.size() != config.n_layers || ffn.size() != config.n_layers ||
      topology.layers.size() != config.n_layers) {
    throw DimensionError("model must have " + std::to_string(config.n_layers) + " layers");
  }
  for (std::size_t l = 0; l < config.n_layers; ++l) {
    const auto& a = attention[l];
    const std::string p = "layer " + std::to_string(l) + " ";
    if (a.w_q.size() != config.n_query_heads) throw TopologyError(p + "query head count mismatch");
    check_layer_matches(a, topology.layers[l]);
    for (const auto& w : a.w_q) require_shape(w, dm, dk, p + "query head");
    for (const auto& w : a.w_k) require_shape(w, dm, dk, p + "key head");
    for (const auto& w : a.w_v) require_shape(w, dm, dk, p + "value head");
    require_shape(a.w_o, dm, dm, p + "output projection");
    require_shape(ffn[l].w_in, dm, config.ffn_dim, p + "ffn input");
    require_shape(ffn[l].w_out, config.ffn_dim, dm, p + "ffn output");
  }
  if (variant == AttentionVariant::kMha) {
    for (const auto& lt : topology.layers)
      if (!lt.is_identity()) throw TopologyError("MHA model with a non-identity topology");
  }
}

ToyModel ToyModel::zeros_like() const {
  ToyModel z = *this;
  z.for_each_parameter([](const std::string&, Matrix& m) { m.fill(0.0); });
  return z;
}

std::size_t ToyModel::parameter_count() const {
  std::size_t n = 0;
  for_each_parameter([&](const std::string&, const Matrix& m) { n += m.size(); });
  return n;
}

Matrix forward_logits(const ToyModel& model, const TokenSequence& inputs,
                      const FusionOperator* op) {
  return run_forward(model, inputs, op, false).logits;
}

std::vector<Matrix> attention_inputs(const ToyModel& model, const TokenSequence& inputs) {
  ForwardTrace tr = run_forward(model, inputs, nullptr, true);
  std::vector<Matrix> out;
  for (auto& lt : tr.layers) out.push_back(std::move(lt.a));
  return out;
}

double lm_loss(const ToyModel& model, const TokenBatch& batch, const FusionOperator* op) {
  const double n = static_cast<double>(prediction_count(batch));
  double total = 0.0;
  TokenSequence inputs, targets;
  for (const auto& seq : batch) {
    split_sequence(seq, inputs, targets);
    for (auto t : targets) {
      if (t >= model.config.vocab_size) throw DomainError("target token outside vocabulary");
    }
    total += cross_entropy(forward_logits(model, inputs, op), targets, 0.0, nullptr);
  }
  return total / n;
}

ModelGrad make_grad(const ToyModel& model, const FusionOperator* op) {
  ModelGrad g{model.zeros_like(), {}};
  if (op) {
    g.fusion = *op;
    for (auto& lf : g.fusion.layers) {
      lf.key.omega.fill(0.0);
      lf.value.omega.fill(0.0);
    }
  }
  return g;
}

double lm_loss_and_grad(const ToyModel& model, const TokenBatch& batch, const FusionOperator* op,
                        ModelGrad& grad) {
  grad = make_grad(model, op);
  const double n = static_cast<double>(prediction_count(batch));
  const double inv_n = 1.0 / n;
  double total = 0.0;
  TokenSequence inputs, targets;
  ToyModel& g = grad.model;
  for (const auto& seq : batch) {
    split_sequence(seq, inputs, targets);
    for (auto t : targets) {
      if (t >= model.config.vocab_size) throw DomainError("target token outside vocabulary");
    }
    ForwardTrace tr = run_forward(model, inputs, op, true);
    Matrix d_logits;
    total += cross_entropy(tr.logits, targets, inv_n, &d_logits);

    matmul_tn_acc(tr.normed_final, d_logits, g.output);
    Matrix dh = rms_backward(tr.h_final, tr.inv_final, matmul_nt(d_logits, model.output));

    for (std::size_t l = model.attention.size(); l-- > 0;) {
      const LayerTrace& lt = tr.layers[l];
      const FeedForward& f = model.ffn[l];
      // feed-forward residual
      matmul_tn_acc(lt.act, dh, g.ffn[l].w_out);
      Matrix d_pre = matmul_nt(dh, f.w_out);
      auto pre = lt.pre.values();
      auto dp = d_pre.values();
      for (std::size_t i = 0; i < dp.size(); ++i) {
        const double s = sigmoid(pre[i]);
        dp[i] *= s * (1.0 + pre[i] * (1.0 - s));
      }
      matmul_tn_acc(lt.b, d_pre, g.ffn[l].w_in);
      dh += rms_backward(lt.h_mid, lt.inv2, matmul_nt(d_pre, f.w_in));
      // attention residual
      const HeadRouting routing = layer_routing(model, op, l);
      RoutingGrad rg;
      Matrix d_a = attention_backward(lt.attn, model.attention[l], routing, dh, g.attention[l],
                                      op ? &rg : nullptr);
      dh += rms_backward(lt.h_in, lt.inv1, d_a);
      if (op) {
        for (HeadKind kind : {HeadKind::kKey, HeadKind::kValue}) {
          Matrix& dw = grad.fusion.at(l, kind).omega;
          const std::size_t ch = op->at(l, kind).channels;
          const auto& src = kind == HeadKind::kKey ? rg.key : rg.value;
          for (std::size_t h = 0; h < src.size(); ++h)
            for (std::size_t j = 0; j < src[h].size(); ++j)
              for (std::size_t c = 0; c < src[h][j].size(); ++c) dw(h, j * ch + c) += src[h][j][c];
        }
      }
    }
    for (std::size_t i = 0; i < inputs.size(); ++i) {
      auto d = dh.row(i);
      auto te = g.token_embedding.row(inputs[i]);
      auto pe = g.position_embedding.row(i);
      for (std::size_t c = 0; c < d.size(); ++c) {
        te[c] += d[c];
        pe[c] += d[c];
      }
    }
  }
  return total * inv_n;
}

double max_logit_diff(const ToyModel& a, const FusionOperator* op_a, const ToyModel& b,
                      const FusionOperator* op_b, const TokenBatch& batch) {
  double mx = 0.0;
  for (const auto& seq : batch) {
    mx = std::max(mx, max_abs_diff(forward_logits(a, seq, op_a), forward_logits(b, seq, op_b)));
  }
  return mx;
}

}  // namespace dha
