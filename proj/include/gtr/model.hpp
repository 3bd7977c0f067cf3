#pragma once

#include <algorithm>
#include <map>
#include <memory>
#include <string>
#include <string_view>
#include <vector>

#include "gtr/common.hpp"
#include "gtr/embedding.hpp"
#include "gtr/encoder.hpp"
#include "gtr/graph.hpp"
#include "gtr/matcher.hpp"
#include "gtr/params.hpp"
#include "gtr/table.hpp"
#include "gtr/tensor.hpp"

namespace gtr {

/// A table made ready for scoring: resolved grid, tabular graph, neighbor
/// index and initial node features. Immutable after construction; shared
/// freely between queries and epochs.
template <typename Real>
struct PreparedTable {
  std::string id;
  GridIndex grid;
  TabularGraph graph;
  std::shared_ptr<const NeighborIndex> idx;
  Tensor<Real> features;  // leaf |V| x d
  TableContext context;
};

template <typename Real>
PreparedTable<Real> prepare_table(const Table& table,
                                  const EmbeddingTable<Real>& emb) {
  PreparedTable<Real> pt;
  pt.id = table.id;
  pt.grid = resolve_grid(table);
  pt.graph = build_graph(table, pt.grid);
  pt.idx = build_neighbor_index(pt.graph);
  pt.features = init_node_features(pt.graph, emb);
  pt.context = table.context;
  return pt;
}

template <typename Real>
std::map<std::string, PreparedTable<Real>> prepare_corpus(
    const std::map<std::string, Table>& corpus,
    const EmbeddingTable<Real>& emb) {
  std::map<std::string, PreparedTable<Real>> out;
  for (const auto& [id, table] : corpus) {
    out.emplace(id, prepare_table(table, emb));
  }
  return out;
}

// ---------------------------------------------------------------------------
// GtrModel: configuration plus the parameter store, with the end-to-end
// forward paths. The embedding table stays outside the model; it is a
// loadable resource, not a trainable parameter.
// ---------------------------------------------------------------------------

inline bool is_graph_branch_param(const std::string& name) {
  return name.starts_with("enc.") || name.starts_with("match.");
}

inline bool is_pretrain_param(const std::string& name) {
  return is_graph_branch_param(name) || name.starts_with("pretrain.");
}

template <typename Real>
struct GtrModel {
  GTConfig enc;
  MatchConfig match;
  ParameterStore<Real> store;
  std::shared_ptr<ContextEncoder<Real>> external_ctx;  // optional adapter

  /// Registers and Xavier-initializes every parameter. Deterministic per
  /// seed and independent of registration order.
  void init(std::uint64_t seed) {
    if (store.size() != 0) throw ConfigError("model already initialized");
    (void)enc.head_dim();  // validate config
    Rng master(seed);
    register_encoder_params(store, enc, master);
    register_matcher_params(store, enc, match, master,
                            /*with_builtin_context=*/external_ctx == nullptr);
    if (external_ctx && external_ctx->dim() != match.ctx_dim) {
      throw ConfigError(str_cat("context encoder dimension ",
                                external_ctx->dim(), " vs configured ctx_dim ",
                                match.ctx_dim));
    }
  }

  Tensor<Real> context_vector(std::string_view query_text,
                              const TableContext& ctx,
                              const EmbeddingTable<Real>& emb) const {
    if (external_ctx) {
      std::vector<Real> v = external_ctx->encode(query_text, ctx);
      if (v.size() != match.ctx_dim) {
        throw ConfigError(str_cat("context encoder returned ", v.size(),
                                  " dims, expected ", match.ctx_dim));
      }
      const std::size_t n = v.size();
      return Tensor<Real>::matrix(1, n, std::move(v));
    }
    return context_match(query_text, ctx, emb, store);
  }
};

/// Full scoring path for one (query, table) pair, on the tape.
template <typename Real>
struct PairForward {
  Tensor<Real> score;                 // 1 x 1
  std::vector<std::size_t> pool_argmax;
};

template <typename Real>
PairForward<Real> score_pair(const GtrModel<Real>& model,
                             const PreparedTable<Real>& pt,
                             std::string_view query_text,
                             const EmbeddingTable<Real>& emb,
                             bool training = false, Rng* drop_rng = nullptr) {
  Tensor<Real> encoded = encode_graph(pt.features, pt.idx, model.store,
                                      model.enc, training, drop_rng);
  Tensor<Real> projected = project_nodes(encoded, model.store, model.match);
  Tensor<Real> q = encode_query(query_text, emb);
  Tensor<Real> hidden = match_nodes(projected, q, model.store);
  PoolResult<Real> pooled = pool(hidden);
  Tensor<Real> h_qc = model.context_vector(query_text, pt.context, emb);
  Tensor<Real> s = score_head(pooled.pooled, h_qc, model.store,
                              model.enc.dropout, training, drop_rng);
  return {s, std::move(pooled.argmax)};
}

/// Graph-branch-only score used by graph-context pre-training: the context
/// text plays the query role and the pre-training head replaces the MLP.
template <typename Real>
Tensor<Real> graph_context_score(const GtrModel<Real>& model,
                                 const Tensor<Real>& projected,
                                 std::string_view context_text,
                                 const EmbeddingTable<Real>& emb) {
  Tensor<Real> q = encode_query(context_text, emb);
  Tensor<Real> hidden = match_nodes(projected, q, model.store);
  PoolResult<Real> pooled = pool(hidden);
  return pretrain_score(pooled.pooled, model.store);
}

// ---------------------------------------------------------------------------
// Inference. Graph encoding and node projection do not depend on the query,
// so each candidate table is encoded once and reused across queries.
// ---------------------------------------------------------------------------

template <typename Real>
struct EncodedTable {
  const PreparedTable<Real>* table = nullptr;
  std::vector<Real> projected;  // |V| x d, after project_nodes
};

template <typename Real>
EncodedTable<Real> encode_for_inference(const GtrModel<Real>& model,
                                        const PreparedTable<Real>& pt) {
  NoGradGuard ng;
  Tensor<Real> encoded = encode_graph(pt.features, pt.idx, model.store,
                                      model.enc, /*training=*/false);
  Tensor<Real> projected = project_nodes(encoded, model.store, model.match);
  return {&pt, std::move(projected.value())};
}

template <typename Real>
struct InferenceScore {
  double score = 0;
  std::vector<std::size_t> pool_argmax;
};

template <typename Real>
InferenceScore<Real> score_encoded(const GtrModel<Real>& model,
                                   const EncodedTable<Real>& enc_table,
                                   std::string_view query_text,
                                   const EmbeddingTable<Real>& emb) {
  NoGradGuard ng;
  const PreparedTable<Real>& pt = *enc_table.table;
  Tensor<Real> projected = Tensor<Real>::matrix(
      pt.graph.node_count(), model.enc.hidden,
      std::vector<Real>(enc_table.projected));
  Tensor<Real> q = encode_query(query_text, emb);
  Tensor<Real> hidden = match_nodes(projected, q, model.store);
  PoolResult<Real> pooled = pool(hidden);
  Tensor<Real> h_qc = model.context_vector(query_text, pt.context, emb);
  Tensor<Real> s = score_head(pooled.pooled, h_qc, model.store,
                              /*drop_rate=*/0.0, /*training=*/false);
  return {static_cast<double>(s.scalar_value()), std::move(pooled.argmax)};
}

/// Scores one query against candidate tables and returns (table_id, score)
/// sorted by descending score, ties broken by ascending table id.
template <typename Real>
std::vector<std::pair<std::string, double>> rank_candidates(
    const GtrModel<Real>& model,
    const std::vector<const EncodedTable<Real>*>& candidates,
    std::string_view query_text, const EmbeddingTable<Real>& emb) {
  std::vector<std::pair<std::string, double>> scored;
  scored.reserve(candidates.size());
  for (const EncodedTable<Real>* c : candidates) {
    scored.emplace_back(c->table->id,
                        score_encoded(model, *c, query_text, emb).score);
  }
  std::sort(scored.begin(), scored.end(), [](const auto& a, const auto& b) {
    if (a.second != b.second) return a.second > b.second;
    return a.first < b.first;
  });
  return scored;
}

}  // namespace gtr
