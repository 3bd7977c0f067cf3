#include "gtr/encoder.hpp"

#include <cmath>
#include <map>

#include <gtest/gtest.h>

#include "gtr/model.hpp"
#include "support/fixtures.hpp"
#include "support/oracles.hpp"
#include "support/toy.hpp"

using namespace gtr;
using T = Tensor<double>;

namespace {

EmbeddingTable<double> tiny_embeddings(std::size_t dim) {
  return toy::make_embeddings<double>(
      {"alpha", "beta", "gamma", "delta", "solo", "a", "b", "c", "d"}, dim,
      101);
}

GTConfig tiny_config(std::size_t d = 8, std::size_t heads = 2,
                     std::size_t layers = 2) {
  GTConfig cfg;
  cfg.hidden = d;
  cfg.heads = heads;
  cfg.layers = layers;
  cfg.dropout = 0.0;
  return cfg;
}

ParameterStore<double> make_params(const GTConfig& cfg, std::uint64_t seed) {
  ParameterStore<double> store;
  register_encoder_params(store, cfg, Rng(seed));
  return store;
}

oracle::DenseLayerParams dense_params(const ParameterStore<double>& store,
                                      const GTConfig& cfg, std::size_t layer) {
  oracle::DenseLayerParams p;
  p.d = cfg.hidden;
  p.dh = cfg.head_dim();
  p.heads = cfg.heads;
  p.slope = cfg.leaky_slope;
  p.eps = cfg.layer_norm_eps;
  p.w_res = store.get(enc_names::residual(layer)).value();
  for (std::size_t h = 0; h < cfg.heads; ++h) {
    p.w_att.push_back(store.get(enc_names::att_proj(layer, h)).value());
    p.w_msg.push_back(store.get(enc_names::msg_proj(layer, h)).value());
    p.a_vec.push_back(store.get(enc_names::att_vec(layer, h)).value());
  }
  p.ffnn_w = store.get(enc_names::ffnn_w(layer)).value();
  p.ffnn_b = store.get(enc_names::ffnn_b(layer)).value();
  p.ln_gain = store.get(enc_names::ln_gain(layer)).value();
  p.ln_bias = store.get(enc_names::ln_bias(layer)).value();
  return p;
}

T random_states(std::size_t n, std::size_t d, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<double> v(n * d);
  for (auto& x : v) x = rng.uniform(-1, 1);
  return T::matrix(n, d, std::move(v));
}

// ---------------------------------------------------------------------------

TEST(EmbedText, EmptyTextIsZeroVector) {
  const auto emb = tiny_embeddings(6);
  for (double v : embed_text<double>("", emb)) EXPECT_EQ(v, 0.0);
}

TEST(EmbedText, SingleTokenIsItsVector) {
  const auto emb = tiny_embeddings(6);
  EXPECT_EQ(embed_text<double>("alpha", emb), *emb.find("alpha"));
  // Tokenization lowercases and strips punctuation.
  EXPECT_EQ(embed_text<double>("  Alpha! ", emb), *emb.find("alpha"));
}

TEST(EmbedText, TwoTokensAverage) {
  const auto emb = tiny_embeddings(6);
  const auto& u = *emb.find("alpha");
  const auto& v = *emb.find("beta");
  const auto got = embed_text<double>("alpha beta", emb);
  for (std::size_t i = 0; i < got.size(); ++i) {
    EXPECT_NEAR(got[i], (u[i] + v[i]) / 2.0, 1e-12);
  }
}

TEST(EmbedText, OovTokensContributeNothing) {
  const auto emb = tiny_embeddings(6);
  EXPECT_EQ(embed_text<double>("alpha zzz-unknown", emb),
            *emb.find("alpha"));
  for (double v : embed_text<double>("zzz yyy", emb)) EXPECT_EQ(v, 0.0);
}

// ---------------------------------------------------------------------------

TEST(InitNodeFeatures, SingleCellTableRepeatsCellVector) {
  const auto emb = tiny_embeddings(6);
  const Table t = parse_table_json(fixtures::kSingleCellJson);
  const GridIndex grid = resolve_grid(t);
  const TabularGraph g = build_graph(t, grid);
  const T feats = init_node_features(g, emb);
  const auto& u = *emb.find("solo");
  ASSERT_EQ(feats.rows(), 3u);
  for (std::size_t n = 0; n < 3; ++n) {
    for (std::size_t i = 0; i < 6; ++i) EXPECT_NEAR(feats.at(n, i), u[i], 1e-12);
  }
}

TEST(InitNodeFeatures, ColumnNodeAveragesConstituents) {
  const Table t = parse_table_json(
      R"({"id":"col2","rows":[[{"text":"alpha"}],[{"text":"beta"}]]})");
  const auto emb = tiny_embeddings(6);
  const TabularGraph g = build_graph(t, resolve_grid(t));
  const T feats = init_node_features(g, emb);
  const auto& u = *emb.find("alpha");
  const auto& v = *emb.find("beta");
  const std::size_t col_node = g.col_node(0);
  for (std::size_t i = 0; i < 6; ++i) {
    EXPECT_NEAR(feats.at(col_node, i), (u[i] + v[i]) / 2.0, 1e-12);
  }
}

TEST(InitNodeFeatures, MergedCellCountedOncePerGlobalNode) {
  // A row_span=2 cell contributes once to each of the two ROW nodes it
  // spans, not twice to either.
  const Table t = parse_table_json(
      R"({"id":"m","rows":[[{"text":"alpha","row_span":2},{"text":"beta"}],)"
      R"([{"text":"gamma"}]]})");
  const auto emb = tiny_embeddings(6);
  const TabularGraph g = build_graph(t, resolve_grid(t));
  const T feats = init_node_features(g, emb);
  const auto& a = *emb.find("alpha");
  const auto& c = *emb.find("gamma");
  const std::size_t row1 = g.row_node(1);  // cells: alpha (span), gamma
  for (std::size_t i = 0; i < 6; ++i) {
    EXPECT_NEAR(feats.at(row1, i), (a[i] + c[i]) / 2.0, 1e-12);
  }
}

TEST(InitNodeFeatures, AllEmptyTextsGiveZeroMatrix) {
  const Table t = parse_table_json(
      R"({"id":"e","rows":[[{"text":""},{"text":""}]]})");
  const auto emb = tiny_embeddings(6);
  const T feats = init_node_features(build_graph(t, resolve_grid(t)), emb);
  for (double v : feats.value()) EXPECT_EQ(v, 0.0);
}

// ---------------------------------------------------------------------------

TEST(AttentionScores, IsolatedNodeAttendsOnlyToItself) {
  TabularGraph g;
  g.origin = "iso";
  g.nodes = {{NodeKind::Cell, 0, "x"}};
  g.n_cells = 1;
  const auto idx = build_neighbor_index(g);
  const GTConfig cfg = tiny_config();
  const auto store = make_params(cfg, 5);
  const auto alpha = attention_scores(store, cfg, 0, 0, idx,
                                      random_states(1, cfg.hidden, 1));
  ASSERT_EQ(alpha.size(), 1u);
  EXPECT_DOUBLE_EQ(alpha[0], 1.0);
}

TEST(AttentionScores, EqualStatesGiveUniformAttention) {
  TabularGraph g;
  g.origin = "tri";
  g.nodes = {{NodeKind::Cell, 0, ""}, {NodeKind::Cell, 1, ""},
             {NodeKind::Cell, 2, ""}};
  g.n_cells = 3;
  g.edges = {{1, 0}, {2, 0}};  // node 0 sees {self, 1, 2}
  const auto idx = build_neighbor_index(g);
  const GTConfig cfg = tiny_config();
  const auto store = make_params(cfg, 6);
  std::vector<double> same(cfg.hidden, 0.3);
  std::vector<double> states;
  for (int i = 0; i < 3; ++i) states.insert(states.end(), same.begin(), same.end());
  const auto alpha = attention_scores(store, cfg, 0, 0, idx,
                                      T::matrix(3, cfg.hidden, states));
  for (std::size_t k = idx->offsets[0]; k < idx->offsets[1]; ++k) {
    EXPECT_NEAR(alpha[k], 1.0 / 3.0, 1e-12);
  }
}

TEST(AttentionScores, RowsSumToOneAndMatchDenseOracle) {
  const Table t = parse_table_json(fixtures::kPlain2x2Json);
  const TabularGraph g = build_graph(t, resolve_grid(t));
  const auto idx = build_neighbor_index(g);
  const GTConfig cfg = tiny_config(12, 3, 1);
  const auto store = make_params(cfg, 7);
  const T states = random_states(g.node_count(), cfg.hidden, 2);

  const auto neigh = oracle::dense_neighborhoods(g);
  const auto dense = dense_params(store, cfg, 0);
  for (std::size_t h = 0; h < cfg.heads; ++h) {
    const auto alpha = attention_scores(store, cfg, 0, h, idx, states);
    for (std::size_t node = 0; node < g.node_count(); ++node) {
      double sum = 0;
      std::map<std::size_t, double> by_src;
      for (std::size_t k = idx->offsets[node]; k < idx->offsets[node + 1]; ++k) {
        sum += alpha[k];
        by_src[idx->src[k]] = alpha[k];
      }
      EXPECT_NEAR(sum, 1.0, 1e-10);
      const auto want = oracle::dense_attention(states.value(),
                                                g.node_count(), neigh, dense,
                                                h, node);
      std::size_t i = 0;
      for (std::size_t src : neigh[node]) {
        EXPECT_NEAR(by_src.at(src), want[i], 1e-10)
            << "head " << h << " node " << node << " src " << src;
        ++i;
      }
    }
  }
}

// ---------------------------------------------------------------------------

TEST(GtLayerForward, ZeroStatesGiveLayerNormBiasRows) {
  const Table t = parse_table_json(fixtures::kPlain2x2Json);
  const TabularGraph g = build_graph(t, resolve_grid(t));
  const auto idx = build_neighbor_index(g);
  const GTConfig cfg = tiny_config();
  auto store = make_params(cfg, 8);
  // Distinctive LayerNorm bias so the expectation is visible.
  auto& bias = store.all().at(enc_names::ln_bias(0));
  for (std::size_t i = 0; i < bias.tensor.size(); ++i) {
    bias.tensor.value()[i] = 0.1 * static_cast<double>(i + 1);
  }
  const T zero = T::zeros({g.node_count(), cfg.hidden});
  const T out = gt_layer_forward(zero, idx, store, cfg, 0);
  for (std::size_t n = 0; n < g.node_count(); ++n) {
    for (std::size_t j = 0; j < cfg.hidden; ++j) {
      EXPECT_NEAR(out.at(n, j), bias.tensor.value()[j], 1e-9);
    }
  }
}

TEST(GtLayerForward, MatchesDenseOracleOnRandomTable) {
  const Table t = parse_table_json(fixtures::kTaxingWagesJson);
  const TabularGraph g = build_graph(t, resolve_grid(t));
  const auto idx = build_neighbor_index(g);
  const GTConfig cfg = tiny_config(12, 4, 1);
  const auto store = make_params(cfg, 9);
  const T states = random_states(g.node_count(), cfg.hidden, 3);
  const T got = gt_layer_forward(states, idx, store, cfg, 0);
  const auto want = oracle::dense_gt_layer(states.value(), g,
                                           dense_params(store, cfg, 0));
  ASSERT_EQ(got.size(), want.size());
  for (std::size_t i = 0; i < want.size(); ++i) {
    EXPECT_NEAR(got.value()[i], want[i], 1e-10) << "entry " << i;
  }
}

TEST(EncodeGraph, SingleLayerEqualsOneForwardCall) {
  const Table t = parse_table_json(fixtures::kPlain2x2Json);
  const TabularGraph g = build_graph(t, resolve_grid(t));
  const auto idx = build_neighbor_index(g);
  const GTConfig cfg = tiny_config(8, 2, 1);
  const auto store = make_params(cfg, 10);
  const T states = random_states(g.node_count(), cfg.hidden, 4);
  EXPECT_EQ(encode_graph(states, idx, store, cfg).value(),
            gt_layer_forward(states, idx, store, cfg, 0).value());
}

TEST(EncodeGraph, DefaultConfigOutputShape) {
  const auto emb = toy::make_embeddings<double>({"a", "b", "c", "d"}, 300, 3);
  const Table t = parse_table_json(fixtures::kPlain2x2Json);
  const TabularGraph g = build_graph(t, resolve_grid(t));
  const auto idx = build_neighbor_index(g);
  GTConfig cfg;  // L=4, H=4, d=300
  const auto store = make_params(cfg, 11);
  const T out = encode_graph(init_node_features(g, emb), idx, store, cfg);
  EXPECT_EQ(out.rows(), g.node_count());
  EXPECT_EQ(out.cols(), 300u);
}

// Permutes a graph, its features, and its edge list consistently.
struct Permuted {
  TabularGraph graph;
  T features;
  std::vector<std::size_t> perm;  // old node id -> new node id
};

Permuted permute_graph(const TabularGraph& g, const T& feats, Rng& rng) {
  const std::size_t n = g.node_count();
  std::vector<std::size_t> perm(n);
  for (std::size_t i = 0; i < n; ++i) perm[i] = i;
  for (std::size_t i = n; i > 1; --i) {
    std::swap(perm[i - 1], perm[rng.next_below(i)]);
  }
  Permuted out;
  out.perm = perm;
  out.graph.origin = g.origin;
  out.graph.n_cells = g.n_cells;
  out.graph.n_rows = g.n_rows;
  out.graph.n_cols = g.n_cols;
  out.graph.nodes.resize(n);
  std::vector<double> fv(feats.size());
  const std::size_t d = feats.cols();
  for (std::size_t i = 0; i < n; ++i) {
    out.graph.nodes[perm[i]] = g.nodes[i];
    std::copy_n(feats.value().data() + i * d, d, fv.data() + perm[i] * d);
  }
  for (const auto& [src, dst] : g.edges) {
    out.graph.edges.emplace_back(perm[src], perm[dst]);
  }
  out.features = T::matrix(n, d, std::move(fv));
  return out;
}

TEST(EncodeGraph, PermutationEquivariantExactly) {
  Rng table_rng(2025);
  for (int trial = 0; trial < 5; ++trial) {
    const auto gen = oracle::random_span_table(table_rng, 3, 3, 2);
    const GridIndex grid = resolve_grid(gen.table);
    const TabularGraph g = build_graph(gen.table, grid);
    const GTConfig cfg = tiny_config(12, 2, 3);
    const auto store = make_params(cfg, 20 + trial);
    const T feats = random_states(g.node_count(), cfg.hidden, 30 + trial);

    const T base = encode_graph(feats, build_neighbor_index(g), store, cfg);
    Rng perm_rng(40 + trial);
    const Permuted p = permute_graph(g, feats, perm_rng);
    const T permuted = encode_graph(p.features, build_neighbor_index(p.graph),
                                    store, cfg);
    const std::size_t d = cfg.hidden;
    for (std::size_t i = 0; i < g.node_count(); ++i) {
      for (std::size_t j = 0; j < d; ++j) {
        // Bitwise equality: neighbor accumulation order is preserved.
        EXPECT_EQ(base.at(i, j), permuted.at(p.perm[i], j))
            << "trial " << trial << " node " << i;
      }
    }
  }
}

TEST(EncodeGraph, RowNodePerturbationNeverChangesCellOutputs) {
  const Table t = parse_table_json(fixtures::kTaxingWagesJson);
  const TabularGraph g = build_graph(t, resolve_grid(t));
  const auto idx = build_neighbor_index(g);
  const GTConfig cfg = tiny_config(8, 2, 3);
  const auto store = make_params(cfg, 13);
  const T feats = random_states(g.node_count(), cfg.hidden, 5);

  T bumped = T::matrix(g.node_count(), cfg.hidden,
                       std::vector<double>(feats.value()));
  const std::size_t row_node = g.row_node(1);
  for (std::size_t j = 0; j < cfg.hidden; ++j) {
    bumped.value()[row_node * cfg.hidden + j] += 10.0;
  }
  const T a = encode_graph(feats, idx, store, cfg);
  const T b = encode_graph(bumped, idx, store, cfg);
  for (std::size_t i = 0; i < g.n_cells; ++i) {
    for (std::size_t j = 0; j < cfg.hidden; ++j) {
      EXPECT_EQ(a.at(i, j), b.at(i, j)) << "cell " << i;
    }
  }
}

TEST(EncodeGraph, LocalityHorizonIsLayerCount) {
  // 1x6 strip: cells form a chain; cell 5 is 5 hops from cell 0, beyond the
  // reach of a 4-layer encoder.
  const Table t = parse_table_json(
      R"({"id":"strip","rows":[[{"text":"a"},{"text":"b"},{"text":"c"},)"
      R"({"text":"d"},{"text":"e"},{"text":"f"}]]})");
  const TabularGraph g = build_graph(t, resolve_grid(t));
  const auto idx = build_neighbor_index(g);
  GTConfig cfg = tiny_config(8, 2, 4);
  const auto store = make_params(cfg, 14);
  const T feats = random_states(g.node_count(), cfg.hidden, 6);

  T bumped = T::matrix(g.node_count(), cfg.hidden,
                       std::vector<double>(feats.value()));
  for (std::size_t j = 0; j < cfg.hidden; ++j) {
    bumped.value()[5 * cfg.hidden + j] += 3.0;  // cell 5
  }
  const T a = encode_graph(feats, idx, store, cfg);
  const T b = encode_graph(bumped, idx, store, cfg);
  for (std::size_t j = 0; j < cfg.hidden; ++j) {
    EXPECT_EQ(a.at(0, j), b.at(0, j));  // cell 0 unchanged
  }
  // Sanity: a node within reach does change.
  bool changed = false;
  for (std::size_t j = 0; j < cfg.hidden; ++j) {
    changed = changed || a.at(4, j) != b.at(4, j);
  }
  EXPECT_TRUE(changed);
}

TEST(GtLayerForward, DropoutAppliesOnlyInTraining) {
  const Table t = parse_table_json(fixtures::kPlain2x2Json);
  const TabularGraph g = build_graph(t, resolve_grid(t));
  const auto idx = build_neighbor_index(g);
  GTConfig cfg = tiny_config(8, 2, 1);
  cfg.dropout = 0.5;
  const auto store = make_params(cfg, 15);
  const T states = random_states(g.node_count(), cfg.hidden, 7);
  const T eval_out = gt_layer_forward(states, idx, store, cfg, 0);
  Rng drop(9);
  const T train_out = gt_layer_forward(states, idx, store, cfg, 0, true, &drop);
  std::size_t zeros = 0;
  for (double v : train_out.value()) zeros += v == 0.0;
  EXPECT_GT(zeros, 0u);
  // Eval path has no mask applied.
  EXPECT_EQ(eval_out.value(), gt_layer_forward(states, idx, store, cfg, 0).value());
}

}  // namespace
