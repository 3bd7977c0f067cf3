#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "gtr/common.hpp"
#include "gtr/embedding.hpp"
#include "gtr/graph.hpp"
#include "gtr/params.hpp"
#include "gtr/tensor.hpp"

namespace gtr {

// ---------------------------------------------------------------------------
// Tabular Graph Transformer: L layers of H-head additive attention over the
// tabular graph, with a transformed residual, LeakyReLU, an affine FFNN and
// LayerNorm per layer. Neighborhoods follow stored edge directions plus a
// self-loop injected at attention time, so global ROW/COL nodes aggregate
// from cells but never feed back into them.
// ---------------------------------------------------------------------------

struct GTConfig {
  std::size_t layers = 4;
  std::size_t heads = 4;
  std::size_t hidden = 300;
  std::size_t ffnn_hidden = 0;  // 0 = single affine map d -> d
  double dropout = 0.1;
  double leaky_slope = 0.2;
  double layer_norm_eps = 1e-5;

  std::size_t head_dim() const {
    if (layers < 1) throw ConfigError("GTConfig: layers must be >= 1");
    if (heads == 0 || hidden % heads != 0) {
      throw ConfigError(str_cat("GTConfig: heads (", heads,
                                ") must divide hidden size (", hidden, ")"));
    }
    return hidden / heads;
  }
};

namespace enc_names {

inline std::string residual(std::size_t l) {
  return str_cat("enc.l", l, ".res.w");
}
inline std::string att_proj(std::size_t l, std::size_t h) {
  return str_cat("enc.l", l, ".h", h, ".att.w");
}
inline std::string att_vec(std::size_t l, std::size_t h) {
  return str_cat("enc.l", l, ".h", h, ".att.a");
}
inline std::string msg_proj(std::size_t l, std::size_t h) {
  return str_cat("enc.l", l, ".h", h, ".msg.w");
}
inline std::string ffnn_w(std::size_t l) { return str_cat("enc.l", l, ".ffnn.w"); }
inline std::string ffnn_b(std::size_t l) { return str_cat("enc.l", l, ".ffnn.b"); }
inline std::string ffnn_w1(std::size_t l) { return str_cat("enc.l", l, ".ffnn.w1"); }
inline std::string ffnn_b1(std::size_t l) { return str_cat("enc.l", l, ".ffnn.b1"); }
inline std::string ffnn_w2(std::size_t l) { return str_cat("enc.l", l, ".ffnn.w2"); }
inline std::string ffnn_b2(std::size_t l) { return str_cat("enc.l", l, ".ffnn.b2"); }
inline std::string ln_gain(std::size_t l) { return str_cat("enc.l", l, ".ln.gain"); }
inline std::string ln_bias(std::size_t l) { return str_cat("enc.l", l, ".ln.bias"); }

}  // namespace enc_names

/// Initial node feature matrix |V| x d. Cell nodes embed their own text;
/// each global node is the arithmetic mean of its constituent cells'
/// features, every constituent counted once regardless of span multiplicity.
template <typename Real>
Tensor<Real> init_node_features(const TabularGraph& graph,
                                const EmbeddingTable<Real>& emb) {
  const std::size_t n = graph.node_count();
  const std::size_t d = emb.dim();
  std::vector<Real> feats(n * d, Real(0));
  for (std::size_t i = 0; i < graph.n_cells; ++i) {
    const std::vector<Real> v = embed_text(graph.nodes[i].text, emb);
    std::copy(v.begin(), v.end(), feats.begin() + i * d);
  }
  std::vector<std::size_t> constituents(n, 0);
  for (const auto& [src, dst] : graph.edges) {
    if (dst < graph.n_cells) continue;  // cell-cell edge
    Real* acc = feats.data() + dst * d;
    const Real* cell = feats.data() + src * d;
    for (std::size_t k = 0; k < d; ++k) acc[k] += cell[k];
    ++constituents[dst];
  }
  for (std::size_t i = graph.n_cells; i < n; ++i) {
    if (constituents[i] > 1) {
      Real* acc = feats.data() + i * d;
      for (std::size_t k = 0; k < d; ++k) acc[k] /= Real(constituents[i]);
    }
  }
  return Tensor<Real>::matrix(n, d, std::move(feats));
}

template <typename Real>
void register_encoder_params(ParameterStore<Real>& store, const GTConfig& cfg,
                             const Rng& master) {
  const std::size_t d = cfg.hidden;
  const std::size_t dh = cfg.head_dim();
  auto init = [&](const std::string& name, std::size_t fan_in,
                  std::size_t fan_out) {
    Rng r = master.fork(std::hash<std::string>{}(name));
    store.add(name, xavier_init<Real>(fan_in, fan_out, r));
  };
  for (std::size_t l = 0; l < cfg.layers; ++l) {
    init(enc_names::residual(l), d, d);
    for (std::size_t h = 0; h < cfg.heads; ++h) {
      init(enc_names::att_proj(l, h), d, dh);
      init(enc_names::msg_proj(l, h), d, dh);
      // The attention vector is Xavier-initialized as a (2*dh, 1) map.
      Rng r = master.fork(std::hash<std::string>{}(enc_names::att_vec(l, h)));
      Tensor<Real> a = xavier_init<Real>(2 * dh, 1, r);
      store.add(enc_names::att_vec(l, h),
                Tensor<Real>::vector(std::move(a.value())));
    }
    if (cfg.ffnn_hidden == 0) {
      init(enc_names::ffnn_w(l), d, d);
      store.add(enc_names::ffnn_b(l), Tensor<Real>::zeros({d}));
    } else {
      init(enc_names::ffnn_w1(l), d, cfg.ffnn_hidden);
      store.add(enc_names::ffnn_b1(l), Tensor<Real>::zeros({cfg.ffnn_hidden}));
      init(enc_names::ffnn_w2(l), cfg.ffnn_hidden, d);
      store.add(enc_names::ffnn_b2(l), Tensor<Real>::zeros({d}));
    }
    store.add(enc_names::ln_gain(l),
              Tensor<Real>::from({d}, std::vector<Real>(d, Real(1))));
    store.add(enc_names::ln_bias(l), Tensor<Real>::zeros({d}));
  }
}

/// Attention weights of one layer/head over the neighborhood index (stored
/// in-edges plus self-loops), given node states. Inspection path: runs the
/// same ops as the forward pass but records nothing on the tape. Entry k of
/// the result is aligned with idx->src[k] / idx->dst[k].
template <typename Real>
std::vector<Real> attention_scores(const ParameterStore<Real>& store,
                                   const GTConfig& cfg, std::size_t layer,
                                   std::size_t head,
                                   std::shared_ptr<const NeighborIndex> idx,
                                   const Tensor<Real>& states) {
  NoGradGuard ng;
  Tensor<Real> keys = matmul(states, store.get(enc_names::att_proj(layer, head)));
  Tensor<Real> logits = edge_scores(keys, store.get(enc_names::att_vec(layer, head)),
                                    idx, static_cast<Real>(cfg.leaky_slope));
  return segment_softmax(logits, idx).value();
}

/// One Graph Transformer layer:
///   v' = LayerNorm(FFNN(LeakyReLU(W_res v + concat_h(sum_j alpha_hj W_msg v_j))))
/// with dropout on the layer output in training mode.
template <typename Real>
Tensor<Real> gt_layer_forward(const Tensor<Real>& states,
                              std::shared_ptr<const NeighborIndex> idx,
                              const ParameterStore<Real>& store,
                              const GTConfig& cfg, std::size_t layer,
                              bool training = false, Rng* drop_rng = nullptr) {
  if (states.rank() != 2 || states.cols() != cfg.hidden) {
    throw DimensionError(str_cat("gt_layer_forward: states ",
                                 shape_str(states.shape()), " vs hidden ",
                                 cfg.hidden));
  }
  const Real slope = static_cast<Real>(cfg.leaky_slope);
  std::vector<Tensor<Real>> heads;
  heads.reserve(cfg.heads);
  for (std::size_t h = 0; h < cfg.heads; ++h) {
    Tensor<Real> keys = matmul(states, store.get(enc_names::att_proj(layer, h)));
    Tensor<Real> msgs = matmul(states, store.get(enc_names::msg_proj(layer, h)));
    Tensor<Real> logits = edge_scores(keys, store.get(enc_names::att_vec(layer, h)),
                                      idx, slope);
    Tensor<Real> alpha = segment_softmax(logits, idx);
    heads.push_back(segment_weighted_sum(alpha, msgs, idx));
  }
  Tensor<Real> multi = concat_cols(heads);
  Tensor<Real> residual = matmul(states, store.get(enc_names::residual(layer)));
  Tensor<Real> act = leaky_relu(add(residual, multi), slope);

  Tensor<Real> ffnn;
  if (cfg.ffnn_hidden == 0) {
    ffnn = add_bias(matmul(act, store.get(enc_names::ffnn_w(layer))),
                    store.get(enc_names::ffnn_b(layer)));
  } else {
    Tensor<Real> mid = leaky_relu(
        add_bias(matmul(act, store.get(enc_names::ffnn_w1(layer))),
                 store.get(enc_names::ffnn_b1(layer))),
        slope);
    ffnn = add_bias(matmul(mid, store.get(enc_names::ffnn_w2(layer))),
                    store.get(enc_names::ffnn_b2(layer)));
  }
  Tensor<Real> out = layer_norm(ffnn, store.get(enc_names::ln_gain(layer)),
                                store.get(enc_names::ln_bias(layer)),
                                static_cast<Real>(cfg.layer_norm_eps));
  if (training && cfg.dropout > 0) {
    if (!drop_rng) throw ConfigError("gt_layer_forward: training needs an rng");
    out = dropout(out, static_cast<Real>(cfg.dropout), true, *drop_rng);
  }
  return out;
}

/// Stacks all configured layers over the initial features.
template <typename Real>
Tensor<Real> encode_graph(const Tensor<Real>& features,
                          std::shared_ptr<const NeighborIndex> idx,
                          const ParameterStore<Real>& store,
                          const GTConfig& cfg, bool training = false,
                          Rng* drop_rng = nullptr) {
  Tensor<Real> states = features;
  for (std::size_t l = 0; l < cfg.layers; ++l) {
    states = gt_layer_forward(states, idx, store, cfg, l, training, drop_rng);
  }
  return states;
}

}  // namespace gtr
