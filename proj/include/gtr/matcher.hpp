#pragma once

#include <cstddef>
#include <fstream>
#include <memory>
#include <string>
#include <string_view>
#include <vector>

#include "gtr/common.hpp"
#include "gtr/embedding.hpp"
#include "gtr/encoder.hpp"
#include "gtr/graph.hpp"
#include "gtr/params.hpp"
#include "gtr/table.hpp"
#include "gtr/tensor.hpp"

namespace gtr {

// ---------------------------------------------------------------------------
// Query-graph and query-context matching. Node embeddings are projected and
// layer-normalized, fused with the query vector (concat, difference, Hadamard),
// mapped through tanh, and max-pooled over nodes; the pooled vector joins
// the context-matching vector in front of a small MLP scorer.
// ---------------------------------------------------------------------------

struct MatchConfig {
  std::size_t match_dim = 300;  // d_m, width of fused node hidden states
  std::size_t ctx_dim = 300;    // d_c, width of the context matching vector
  std::size_t mlp_hidden = 128;
  double layer_norm_eps = 1e-5;
};

namespace match_names {

inline const char* proj_w = "match.proj.w";
inline const char* proj_b = "match.proj.b";
inline const char* proj_ln_gain = "match.proj.ln.gain";
inline const char* proj_ln_bias = "match.proj.ln.bias";
inline const char* fuse_w = "match.fuse.w";
inline const char* fuse_b = "match.fuse.b";
inline const char* ctx_fuse_w = "ctx.fuse.w";
inline const char* ctx_fuse_b = "ctx.fuse.b";
inline const char* mlp_w1 = "score.mlp.w1";
inline const char* mlp_b1 = "score.mlp.b1";
inline const char* mlp_w2 = "score.mlp.w2";
inline const char* mlp_b2 = "score.mlp.b2";
inline const char* pretrain_w = "pretrain.head.w";
inline const char* pretrain_b = "pretrain.head.b";

}  // namespace match_names

/// Optional external sentence-pair encoder for query-context matching. The
/// default implementation below ("static fusion") needs no external weights;
/// adapters wrapping a pretrained encoder consume the [SEP]-joined pair and
/// return their pooled first-position vector.
template <typename Real>
class ContextEncoder {
 public:
  virtual ~ContextEncoder() = default;
  virtual std::size_t dim() const = 0;
  virtual std::vector<Real> encode(std::string_view query,
                                   const TableContext& ctx) = 0;
};

/// Wire format handed to external context encoders.
inline std::string format_context_pair(std::string_view query,
                                       const TableContext& ctx) {
  return str_cat(query, " [SEP] ", ctx.caption, " [SEP] ", ctx.page_title,
                 " [SEP] ", ctx.section_title);
}

template <typename Real>
void register_matcher_params(ParameterStore<Real>& store, const GTConfig& enc,
                             const MatchConfig& cfg, const Rng& master,
                             bool with_builtin_context = true) {
  const std::size_t d = enc.hidden;
  auto init = [&](const std::string& name, std::size_t fan_in,
                  std::size_t fan_out) {
    Rng r = master.fork(std::hash<std::string>{}(name));
    store.add(name, xavier_init<Real>(fan_in, fan_out, r));
  };
  init(match_names::proj_w, d, d);
  store.add(match_names::proj_b, Tensor<Real>::zeros({d}));
  store.add(match_names::proj_ln_gain,
            Tensor<Real>::from({d}, std::vector<Real>(d, Real(1))));
  store.add(match_names::proj_ln_bias, Tensor<Real>::zeros({d}));
  init(match_names::fuse_w, 4 * d, cfg.match_dim);
  store.add(match_names::fuse_b, Tensor<Real>::zeros({cfg.match_dim}));
  if (with_builtin_context) {
    init(match_names::ctx_fuse_w, 4 * d, cfg.ctx_dim);
    store.add(match_names::ctx_fuse_b, Tensor<Real>::zeros({cfg.ctx_dim}));
  }
  init(match_names::mlp_w1, cfg.match_dim + cfg.ctx_dim, cfg.mlp_hidden);
  store.add(match_names::mlp_b1, Tensor<Real>::zeros({cfg.mlp_hidden}));
  init(match_names::mlp_w2, cfg.mlp_hidden, 1);
  store.add(match_names::mlp_b2, Tensor<Real>::zeros({std::size_t{1}}));
  init(match_names::pretrain_w, cfg.match_dim, 1);
  store.add(match_names::pretrain_b, Tensor<Real>::zeros({std::size_t{1}}));
}

/// v_i = LayerNorm(W_1 v_i^L + b_1), per node.
template <typename Real>
Tensor<Real> project_nodes(const Tensor<Real>& encoded,
                           const ParameterStore<Real>& store,
                           const MatchConfig& cfg) {
  Tensor<Real> affine = add_bias(matmul(encoded, store.get(match_names::proj_w)),
                                 store.get(match_names::proj_b));
  return layer_norm(affine, store.get(match_names::proj_ln_gain),
                    store.get(match_names::proj_ln_bias),
                    static_cast<Real>(cfg.layer_norm_eps));
}

/// Query vector for the graph branch: static-embedding average over the
/// query text, in the node feature space. Returned as a 1 x d leaf.
template <typename Real>
Tensor<Real> encode_query(std::string_view query_text,
                          const EmbeddingTable<Real>& emb) {
  std::vector<Real> v = embed_text(query_text, emb);
  const std::size_t n = v.size();
  return Tensor<Real>::matrix(1, n, std::move(v));
}

/// [a || b || a-b || a.b] for two row blocks with equal width; `a` carries
/// the table side, `b` the query side, and `b` may have a single row that is
/// tiled up to a's rows.
template <typename Real>
Tensor<Real> fuse_pair(const Tensor<Real>& a, const Tensor<Real>& b) {
  Tensor<Real> bb = b;
  if (b.rows() == 1 && a.rows() > 1) bb = tile_rows(b, a.rows());
  return concat_cols<Real>({a, bb, sub(a, bb), hadamard(a, bb)});
}

/// h_i = tanh(W_2 [v_i || q || v_i - q || v_i . q] + b_2), per node.
template <typename Real>
Tensor<Real> match_nodes(const Tensor<Real>& projected, const Tensor<Real>& q,
                         const ParameterStore<Real>& store) {
  if (q.cols() != projected.cols()) {
    throw DimensionError(str_cat("match_nodes: node width ",
                                 shape_str(projected.shape()),
                                 " vs query width ", shape_str(q.shape())));
  }
  Tensor<Real> fused = fuse_pair(projected, q);
  return tanh_op(add_bias(matmul(fused, store.get(match_names::fuse_w)),
                          store.get(match_names::fuse_b)));
}

/// Max-pooling over node hidden states; the argmax records, per dimension,
/// the lowest node index attaining the maximum.
template <typename Real>
PoolResult<Real> pool(const Tensor<Real>& hidden) {
  return max_over_rows(hidden);
}

/// Default query-context matching ("static fusion"): embed the query and the
/// space-joined context fields, fuse the pair the same way as match_nodes,
/// and map through tanh to d_c. Output entries lie in (-1, 1), matching the
/// scale of the graph branch.
template <typename Real>
Tensor<Real> context_match(std::string_view query_text, const TableContext& ctx,
                           const EmbeddingTable<Real>& emb,
                           const ParameterStore<Real>& store) {
  std::vector<Real> cv = embed_text(ctx.joined(), emb);
  const std::size_t cn = cv.size();
  Tensor<Real> c = Tensor<Real>::matrix(1, cn, std::move(cv));
  Tensor<Real> q = encode_query(query_text, emb);
  Tensor<Real> fused = fuse_pair(c, q);
  return tanh_op(add_bias(matmul(fused, store.get(match_names::ctx_fuse_w)),
                          store.get(match_names::ctx_fuse_b)));
}

/// s = MLP([h_qd || h_qc]): one tanh hidden layer, linear scalar output.
/// Dropout applies to the concatenated input in training mode.
template <typename Real>
Tensor<Real> score_head(const Tensor<Real>& h_qd, const Tensor<Real>& h_qc,
                        const ParameterStore<Real>& store, double drop_rate,
                        bool training = false, Rng* drop_rng = nullptr) {
  Tensor<Real> h_qt = concat_cols<Real>({h_qd, h_qc});
  if (training && drop_rate > 0) {
    if (!drop_rng) throw ConfigError("score_head: training needs an rng");
    h_qt = dropout(h_qt, static_cast<Real>(drop_rate), true, *drop_rng);
  }
  Tensor<Real> hidden = tanh_op(add_bias(matmul(h_qt, store.get(match_names::mlp_w1)),
                                         store.get(match_names::mlp_b1)));
  return add_bias(matmul(hidden, store.get(match_names::mlp_w2)),
                  store.get(match_names::mlp_b2));
}

/// Pre-training head: affine d_m -> 1 on the pooled graph-branch vector.
/// Discarded after pre-training.
template <typename Real>
Tensor<Real> pretrain_score(const Tensor<Real>& h_qd,
                            const ParameterStore<Real>& store) {
  return add_bias(matmul(h_qd, store.get(match_names::pretrain_w)),
                  store.get(match_names::pretrain_b));
}

// ---------------------------------------------------------------------------
// Pooling attribution: how often each node wins a max-pool dimension.
// ---------------------------------------------------------------------------

struct NodeAttribution {
  NodeKind kind = NodeKind::Cell;
  long row = -1;         // grid anchor row (cells, ROW nodes)
  long col = -1;         // grid anchor column (cells, COL nodes)
  long cell_index = -1;  // flat cell id for cell nodes
  std::size_t frequency = 0;
};

/// frequency[n] = number of pooled dimensions won by node n; frequencies sum
/// to the match dimension.
inline std::vector<std::size_t> selection_frequency(
    const std::vector<std::size_t>& pool_argmax, std::size_t node_count) {
  std::vector<std::size_t> freq(node_count, 0);
  for (std::size_t winner : pool_argmax) {
    if (winner >= node_count) {
      throw ConfigError(str_cat("selection_frequency: node index ", winner,
                                " out of range (", node_count, " nodes)"));
    }
    ++freq[winner];
  }
  return freq;
}

inline std::vector<NodeAttribution> attribution_rows(
    const std::vector<std::size_t>& pool_argmax, const TabularGraph& graph,
    const std::vector<CellRect>& cell_rects) {
  const std::vector<std::size_t> freq =
      selection_frequency(pool_argmax, graph.node_count());
  std::vector<NodeAttribution> rows;
  rows.reserve(graph.node_count());
  for (std::size_t n = 0; n < graph.node_count(); ++n) {
    const GraphNode& node = graph.nodes[n];
    NodeAttribution a;
    a.kind = node.kind;
    a.frequency = freq[n];
    switch (node.kind) {
      case NodeKind::Cell: {
        const CellRect& rect = cell_rects[node.index];
        a.row = static_cast<long>(rect.row);
        a.col = static_cast<long>(rect.col);
        a.cell_index = static_cast<long>(node.index);
        break;
      }
      case NodeKind::Row:
        a.row = static_cast<long>(node.index);
        break;
      case NodeKind::Col:
        a.col = static_cast<long>(node.index);
        break;
    }
    rows.push_back(a);
  }
  return rows;
}

/// CSV dump: `node_kind,row,col,cell_index,frequency`, one line per node.
inline void write_attribution_csv(const std::vector<NodeAttribution>& rows,
                                  std::ostream& out) {
  out << "node_kind,row,col,cell_index,frequency\n";
  for (const NodeAttribution& a : rows) {
    out << node_kind_name(a.kind) << ',' << a.row << ',' << a.col << ','
        << a.cell_index << ',' << a.frequency << '\n';
  }
}

}  // namespace gtr
