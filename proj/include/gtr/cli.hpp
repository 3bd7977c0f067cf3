#pragma once

#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <mutex>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "gtr/bm25.hpp"
#include "gtr/common.hpp"
#include "gtr/embedding.hpp"
#include "gtr/metrics.hpp"
#include "gtr/model.hpp"
#include "gtr/run_io.hpp"
#include "gtr/table.hpp"
#include "gtr/training.hpp"

namespace gtr {

/// Everything a command needs, resolved from flags and the optional
/// key=value config file. Paths are validated by the commands that use
/// them; the seed is recorded in every output artifact.
struct RunConfig {
  std::filesystem::path corpus;
  std::filesystem::path queries;
  std::filesystem::path qrels;
  std::filesystem::path embeddings;
  std::filesystem::path checkpoint;  // model input for rank/inspect/train
  std::filesystem::path run;         // run file input for evaluate
  std::filesystem::path graph_dump;  // optional graph JSON input for inspect
  std::filesystem::path out = ".";

  std::string objective = "mse";
  std::string ranker = "neural";  // neural | bm25
  std::string pool = "corpus";    // corpus | qrels
  double lr = 1e-4;
  double dropout = 0.1;
  std::size_t epochs = 5;
  std::size_t batch_size = 16;
  std::size_t warmup = 100;
  std::size_t negatives = 9;
  std::size_t pretrain_epochs = 20;
  std::size_t pretrain_batch = 16;
  std::size_t folds = 0;
  std::size_t layers = 4;
  std::size_t heads = 4;
  std::size_t mlp_hidden = 128;
  std::size_t workers = 1;
  std::uint64_t seed = 0;

  std::string query_text;  // inspect
  std::string table_id;    // inspect
};

namespace cli_detail {

inline void require_file(const std::filesystem::path& p, const char* what) {
  if (p.empty()) throw ConfigError(str_cat("missing required ", what, " path"));
  if (!std::filesystem::exists(p)) {
    throw ConfigError(str_cat(what, " path does not exist: ", p.string()));
  }
}

inline std::filesystem::path ensure_out_dir(const RunConfig& cfg) {
  std::filesystem::create_directories(cfg.out);
  return cfg.out;
}

inline std::string sanitize_filename(std::string_view s) {
  std::string out;
  for (char c : s.substr(0, 100)) {
    const bool ok = (c >= 'a' && c <= 'z') || (c >= 'A' && c <= 'Z') ||
                    (c >= '0' && c <= '9') || c == '.' || c == '-' || c == '_';
    out.push_back(ok ? c : '_');
  }
  return out.empty() ? "_" : out;
}

/// Index-parallel loop; results must go into per-index slots. workers <= 1
/// runs inline.
inline void parallel_for(std::size_t n, std::size_t workers,
                         const std::function<void(std::size_t)>& fn) {
  if (workers <= 1 || n <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  const std::size_t t = std::min(workers, n);
  std::vector<std::thread> pool;
  std::exception_ptr first_error;
  std::mutex err_mutex;
  pool.reserve(t);
  for (std::size_t w = 0; w < t; ++w) {
    pool.emplace_back([&, w]() {
      try {
        for (std::size_t i = w; i < n; i += t) fn(i);
      } catch (...) {
        std::scoped_lock lock(err_mutex);
        if (!first_error) first_error = std::current_exception();
      }
    });
  }
  for (auto& th : pool) th.join();
  if (first_error) std::rethrow_exception(first_error);
}

template <typename Real>
GtrModel<Real> make_model(const RunConfig& cfg,
                          const EmbeddingTable<Real>& emb) {
  GtrModel<Real> model;
  model.enc.layers = cfg.layers;
  model.enc.heads = cfg.heads;
  model.enc.hidden = emb.dim();
  model.enc.dropout = cfg.dropout;
  model.match.match_dim = emb.dim();
  model.match.ctx_dim = emb.dim();
  model.match.mlp_hidden = cfg.mlp_hidden;
  model.init(cfg.seed);
  return model;
}

struct RankInputs {
  std::map<std::string, Table> corpus;
  std::vector<RetrievalInstance> instances;
};

inline RankInputs load_rank_inputs(const RunConfig& cfg) {
  require_file(cfg.corpus, "corpus");
  require_file(cfg.queries, "queries");
  RankInputs in;
  in.corpus = load_corpus(cfg.corpus);
  if (!cfg.qrels.empty()) {
    require_file(cfg.qrels, "qrels");
    InstanceLoadReport report;
    in.instances = load_instances(cfg.queries, cfg.qrels, in.corpus, &report);
    if (report.skipped_unknown_tables > 0) {
      std::cerr << "warning: skipped " << report.skipped_unknown_tables
                << " qrel candidate(s) missing from the corpus\n";
    }
  } else {
    in.instances = load_queries(cfg.queries);
  }
  return in;
}

/// Candidate table ids for one query under the configured pool policy.
inline std::vector<std::string> candidate_pool(
    const RunConfig& cfg, const RetrievalInstance& inst,
    const std::map<std::string, Table>& corpus) {
  std::vector<std::string> ids;
  if (cfg.pool == "qrels") {
    for (const auto& [tid, _] : inst.candidates) ids.push_back(tid);
  } else if (cfg.pool == "corpus") {
    for (const auto& [tid, _] : corpus) ids.push_back(tid);
  } else {
    throw ConfigError(str_cat("unknown pool policy '", cfg.pool,
                              "' (use corpus or qrels)"));
  }
  return ids;
}

inline TrainConfig train_config(const RunConfig& cfg) {
  TrainConfig tc;
  tc.objective = objective_from_string(cfg.objective);
  tc.lr = cfg.lr;
  tc.dropout = cfg.dropout;
  tc.epochs = cfg.epochs;
  tc.batch_size = cfg.batch_size;
  tc.warmup_steps = cfg.warmup;
  tc.seed = cfg.seed;
  tc.nll_negatives = cfg.negatives;
  tc.pretrain_epochs = cfg.pretrain_epochs;
  tc.pretrain_batch = cfg.pretrain_batch;
  return tc;
}

inline StepLogger jsonl_logger(std::ofstream& out) {
  return [&out](const StepLogEntry& e) {
    nlohmann::json j{{"epoch", e.epoch}, {"step", e.step}, {"lr", e.lr},
                     {"loss", e.loss}};
    out << j.dump() << '\n';
  };
}

}  // namespace cli_detail

// ---------------------------------------------------------------------------
// convert: corpus -> per-table graph dumps + aggregate statistics
// ---------------------------------------------------------------------------

template <typename Real = float>
void cmd_convert(const RunConfig& cfg) {
  cli_detail::require_file(cfg.corpus, "corpus");
  const auto out_dir = cli_detail::ensure_out_dir(cfg);
  const auto graph_dir = out_dir / "graphs";
  std::filesystem::create_directories(graph_dir);

  const auto corpus = load_corpus(cfg.corpus);
  std::size_t merged_tables = 0, node_total = 0, edge_total = 0,
              pad_total = 0;
  std::vector<std::string> failures;
  for (const auto& [id, table] : corpus) {
    try {
      const GridIndex grid = resolve_grid(table);
      const TabularGraph graph = build_graph(table, grid);
      const GraphStats stats = graph_stats(graph);
      if (stats.merged_cells > 0) ++merged_tables;
      node_total += graph.node_count();
      edge_total += stats.edge_count;
      pad_total += grid.pad_count;
      std::ofstream gout(graph_dir /
                         (cli_detail::sanitize_filename(id) + ".json"));
      gout << graph_to_json(graph, grid).dump(2) << '\n';
    } catch (const Error& e) {
      failures.push_back(str_cat("table '", id, "': ", e.what()));
    }
  }
  nlohmann::json stats{{"seed", cfg.seed},
                       {"table_count", corpus.size()},
                       {"merged_table_count", merged_tables},
                       {"node_total", node_total},
                       {"edge_total", edge_total},
                       {"pad_warning_total", pad_total},
                       {"failed_tables", failures.size()}};
  {
    std::ofstream sout(out_dir / "stats.json");
    sout << stats.dump(2) << '\n';
  }
  std::cout << stats.dump(2) << '\n';
  if (!failures.empty()) {
    throw DataError(str_cat(failures.size(), " table(s) failed:\n  ",
                            join(failures, "\n  ")));
  }
}

// ---------------------------------------------------------------------------
// pretrain: graph-context matching over the corpus
// ---------------------------------------------------------------------------

template <typename Real = float>
void cmd_pretrain(const RunConfig& cfg) {
  cli_detail::require_file(cfg.corpus, "corpus");
  cli_detail::require_file(cfg.embeddings, "embeddings");
  const auto out_dir = cli_detail::ensure_out_dir(cfg);

  const auto corpus = load_corpus(cfg.corpus);
  const auto emb = EmbeddingTable<Real>::load(cfg.embeddings);
  GtrModel<Real> model = cli_detail::make_model<Real>(cfg, emb);
  const auto prepared = prepare_corpus(corpus, emb);
  const TrainConfig tc = cli_detail::train_config(cfg);

  std::ofstream log_out(out_dir / "pretrain_log.jsonl");
  nlohmann::json header{{"command", "pretrain"},
                        {"seed", cfg.seed},
                        {"epochs", tc.pretrain_epochs},
                        {"batch_size", tc.pretrain_batch},
                        {"lr", tc.lr}};
  log_out << header.dump() << '\n';

  const PretrainResult result = pretrain(model, prepared, emb, tc,
                                         cli_detail::jsonl_logger(log_out));
  if (!result.ran) {
    std::cout << result.disabled_reason << '\n';
    return;
  }
  const auto ckpt = out_dir / "pretrain.ckpt";
  save_checkpoint(model.store, ckpt, cfg.seed);
  std::cout << "pretrained " << result.epoch_losses.size() << " epoch(s), "
            << "final loss " << result.epoch_losses.back() << ", checkpoint "
            << ckpt.string() << '\n';
}

// ---------------------------------------------------------------------------
// rank / evaluate helpers shared with train's cross-validation mode
// ---------------------------------------------------------------------------

namespace cli_detail {

template <typename Real>
RunFile rank_neural(const GtrModel<Real>& model,
                    const EmbeddingTable<Real>& emb, const RunConfig& cfg,
                    const std::map<std::string, Table>& corpus,
                    const std::vector<RetrievalInstance>& instances,
                    const std::map<std::string, PreparedTable<Real>>& prepared) {
  // Encode each candidate table once; scoring reuses the cached projection.
  std::vector<const PreparedTable<Real>*> tables;
  for (const auto& [_, pt] : prepared) tables.push_back(&pt);
  std::vector<EncodedTable<Real>> encoded(tables.size());
  parallel_for(tables.size(), cfg.workers, [&](std::size_t i) {
    encoded[i] = encode_for_inference(model, *tables[i]);
  });
  std::map<std::string, const EncodedTable<Real>*> by_id;
  for (const auto& e : encoded) by_id[e.table->id] = &e;

  RunFile run;
  run.tag = str_cat("gtr-seed", cfg.seed);
  std::vector<std::vector<std::pair<std::string, double>>> results(
      instances.size());
  parallel_for(instances.size(), cfg.workers, [&](std::size_t i) {
    const RetrievalInstance& inst = instances[i];
    std::vector<const EncodedTable<Real>*> candidates;
    for (const std::string& tid : candidate_pool(cfg, inst, corpus)) {
      auto it = by_id.find(tid);
      if (it == by_id.end()) {
        throw DataError(str_cat("no prepared table '", tid, "'"));
      }
      candidates.push_back(it->second);
    }
    results[i] = rank_candidates(model, candidates, inst.query_text, emb);
  });
  for (std::size_t i = 0; i < instances.size(); ++i) {
    auto& entries = run.queries[instances[i].query_id];
    for (auto& [tid, score] : results[i]) entries.push_back({tid, score});
  }
  return run;
}

inline RunFile rank_bm25(const RunConfig& cfg,
                         const std::map<std::string, Table>& corpus,
                         const std::vector<RetrievalInstance>& instances) {
  const Bm25Index index = Bm25Index::build(corpus);
  RunFile run;
  run.tag = str_cat("bm25-seed", cfg.seed);
  std::vector<std::vector<std::pair<std::string, double>>> results(
      instances.size());
  parallel_for(instances.size(), cfg.workers, [&](std::size_t i) {
    results[i] = bm25_rank(instances[i].query_text,
                           candidate_pool(cfg, instances[i], corpus), index);
  });
  for (std::size_t i = 0; i < instances.size(); ++i) {
    auto& entries = run.queries[instances[i].query_id];
    for (auto& [tid, score] : results[i]) entries.push_back({tid, score});
  }
  return run;
}

}  // namespace cli_detail

// ---------------------------------------------------------------------------
// train: objective training, optional k-fold cross-validation
// ---------------------------------------------------------------------------

template <typename Real = float>
void cmd_train(const RunConfig& cfg) {
  cli_detail::require_file(cfg.corpus, "corpus");
  cli_detail::require_file(cfg.queries, "queries");
  cli_detail::require_file(cfg.qrels, "qrels");
  cli_detail::require_file(cfg.embeddings, "embeddings");
  const auto out_dir = cli_detail::ensure_out_dir(cfg);

  const auto corpus = load_corpus(cfg.corpus);
  const auto emb = EmbeddingTable<Real>::load(cfg.embeddings);
  InstanceLoadReport report;
  const auto instances = load_instances(cfg.queries, cfg.qrels, corpus, &report);
  if (report.queries_without_candidates > 0) {
    std::cerr << "warning: " << report.queries_without_candidates
              << " query(ies) have no candidates\n";
  }
  const auto prepared = prepare_corpus(corpus, emb);
  const TrainConfig tc = cli_detail::train_config(cfg);

  auto run_one = [&](const std::vector<RetrievalInstance>& train_set,
                     const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir);
    GtrModel<Real> model = cli_detail::make_model<Real>(cfg, emb);
    if (!cfg.checkpoint.empty()) {
      cli_detail::require_file(cfg.checkpoint, "checkpoint");
      // Warm start: parameter values only, fresh optimizer state.
      load_checkpoint(model.store, cfg.checkpoint, /*apply_moments=*/false);
    }
    std::ofstream log_out(dir / "train_log.jsonl");
    nlohmann::json header{{"command", "train"},
                          {"seed", cfg.seed},
                          {"objective", cfg.objective},
                          {"epochs", tc.epochs},
                          {"batch_size", tc.batch_size},
                          {"lr", tc.lr},
                          {"warmup", tc.warmup_steps}};
    log_out << header.dump() << '\n';
    const auto ckpt_path = dir / "checkpoint.bin";
    train(model, train_set, prepared, emb, tc,
          cli_detail::jsonl_logger(log_out),
          [&](std::size_t, double) {
            save_checkpoint(model.store, ckpt_path, cfg.seed);
            return true;
          });
    if (tc.epochs == 0) save_checkpoint(model.store, ckpt_path, cfg.seed);
    return model;
  };

  if (cfg.folds == 0) {
    run_one(instances, out_dir);
    std::cout << "checkpoint " << (out_dir / "checkpoint.bin").string() << '\n';
    return;
  }

  // k-fold cross-validation: per-fold checkpoints and runs, pooled report.
  std::vector<std::string> qids;
  for (const auto& inst : instances) qids.push_back(inst.query_id);
  const std::vector<Fold> folds = kfold_split(qids, cfg.folds, cfg.seed);
  std::map<std::string, const RetrievalInstance*> by_qid;
  for (const auto& inst : instances) by_qid[inst.query_id] = &inst;
  const auto qrels = load_qrels(cfg.qrels);

  std::vector<std::pair<std::string, std::vector<int>>> pooled;
  for (std::size_t f = 0; f < folds.size(); ++f) {
    const auto fold_dir = out_dir / str_cat("fold", f);
    std::vector<RetrievalInstance> train_set, test_set;
    for (const auto& qid : folds[f].train_ids) train_set.push_back(*by_qid.at(qid));
    for (const auto& qid : folds[f].test_ids) test_set.push_back(*by_qid.at(qid));
    GtrModel<Real> model = run_one(train_set, fold_dir);

    const RunFile run = cli_detail::rank_neural(model, emb, cfg, corpus,
                                                test_set, prepared);
    write_run(run, fold_dir / "run.trec");
    const auto grades = run_to_grades(run, qrels);
    EvalReport fold_report = evaluate_rankings(grades);
    fold_report.seed = cfg.seed;
    {
      std::ofstream eout(fold_dir / "eval.json");
      eout << eval_report_to_json(fold_report).dump(2) << '\n';
    }
    pooled.insert(pooled.end(), grades.begin(), grades.end());
  }
  EvalReport cv = evaluate_rankings(pooled);
  cv.seed = cfg.seed;
  {
    std::ofstream cvout(out_dir / "cv_report.json");
    cvout << eval_report_to_json(cv).dump(2) << '\n';
  }
  {
    std::ofstream cvtxt(out_dir / "cv_report.txt");
    cvtxt << eval_report_to_text(cv);
  }
  std::cout << eval_report_to_text(cv);
}

// ---------------------------------------------------------------------------
// rank: produce a TREC run file (neural or BM25)
// ---------------------------------------------------------------------------

template <typename Real = float>
void cmd_rank(const RunConfig& cfg) {
  const auto out_dir = cli_detail::ensure_out_dir(cfg);
  cli_detail::RankInputs in = cli_detail::load_rank_inputs(cfg);
  if (cfg.pool == "qrels" && cfg.qrels.empty()) {
    throw ConfigError("pool=qrels needs --qrels");
  }

  RunFile run;
  if (cfg.ranker == "bm25") {
    run = cli_detail::rank_bm25(cfg, in.corpus, in.instances);
  } else if (cfg.ranker == "neural") {
    cli_detail::require_file(cfg.embeddings, "embeddings");
    cli_detail::require_file(cfg.checkpoint, "checkpoint");
    const auto emb = EmbeddingTable<Real>::load(cfg.embeddings);
    GtrModel<Real> model = cli_detail::make_model<Real>(cfg, emb);
    load_checkpoint(model.store, cfg.checkpoint, /*apply_moments=*/false);
    const auto prepared = prepare_corpus(in.corpus, emb);
    run = cli_detail::rank_neural(model, emb, cfg, in.corpus, in.instances,
                                  prepared);
  } else {
    throw ConfigError(str_cat("unknown ranker '", cfg.ranker,
                              "' (use neural or bm25)"));
  }
  const auto run_path = out_dir / "run.trec";
  write_run(run, run_path);
  std::cout << "run file " << run_path.string() << " (" << run.queries.size()
            << " queries)\n";
}

// ---------------------------------------------------------------------------
// evaluate: score a run file against qrels
// ---------------------------------------------------------------------------

template <typename Real = float>
void cmd_evaluate(const RunConfig& cfg) {
  cli_detail::require_file(cfg.run, "run");
  cli_detail::require_file(cfg.qrels, "qrels");
  const auto out_dir = cli_detail::ensure_out_dir(cfg);

  const RunFile run = read_run(cfg.run);
  const auto qrels = load_qrels(cfg.qrels);
  EvalReport report = evaluate_rankings(run_to_grades(run, qrels));
  report.seed = cfg.seed;
  {
    std::ofstream jout(out_dir / "eval.json");
    jout << eval_report_to_json(report).dump(2) << '\n';
  }
  {
    std::ofstream tout(out_dir / "eval.txt");
    tout << eval_report_to_text(report);
  }
  std::cout << eval_report_to_text(report);
}

// ---------------------------------------------------------------------------
// inspect: pooling attribution for one (query, table) pair
// ---------------------------------------------------------------------------

template <typename Real = float>
void cmd_inspect(const RunConfig& cfg) {
  cli_detail::require_file(cfg.embeddings, "embeddings");
  cli_detail::require_file(cfg.checkpoint, "checkpoint");
  if (cfg.query_text.empty()) throw ConfigError("inspect needs --query");
  const auto out_dir = cli_detail::ensure_out_dir(cfg);

  const auto emb = EmbeddingTable<Real>::load(cfg.embeddings);
  GtrModel<Real> model = cli_detail::make_model<Real>(cfg, emb);
  load_checkpoint(model.store, cfg.checkpoint, /*apply_moments=*/false);

  PreparedTable<Real> pt;
  std::vector<CellRect> rects;
  if (!cfg.graph_dump.empty()) {
    // Inspect a dumped graph directly (context fields are not part of the
    // dump and stay empty).
    cli_detail::require_file(cfg.graph_dump, "graph dump");
    std::ifstream gin(cfg.graph_dump);
    nlohmann::json j;
    gin >> j;
    GraphDump dump = graph_from_json(j);
    pt.id = dump.graph.origin;
    pt.graph = std::move(dump.graph);
    pt.idx = build_neighbor_index(pt.graph);
    pt.features = init_node_features(pt.graph, emb);
    rects = std::move(dump.cell_rects);
  } else {
    cli_detail::require_file(cfg.corpus, "corpus");
    if (cfg.table_id.empty()) throw ConfigError("inspect needs --table");
    const auto corpus = load_corpus(cfg.corpus);
    auto it = corpus.find(cfg.table_id);
    if (it == corpus.end()) {
      throw DataError(str_cat("table '", cfg.table_id, "' not in corpus"));
    }
    pt = prepare_table(it->second, emb);
    rects = pt.grid.rects;
  }

  const EncodedTable<Real> encoded = encode_for_inference(model, pt);
  const InferenceScore<Real> result =
      score_encoded(model, encoded, cfg.query_text, emb);
  const auto rows = attribution_rows(result.pool_argmax, pt.graph, rects);

  const auto csv_path =
      out_dir / str_cat("attribution_",
                        cli_detail::sanitize_filename(cfg.query_text), "_",
                        cli_detail::sanitize_filename(pt.id), ".csv");
  {
    std::ofstream csv(csv_path);
    write_attribution_csv(rows, csv);
  }
  std::cout << "score " << result.score << ", attribution " << csv_path.string()
            << '\n';
}

}  // namespace gtr
