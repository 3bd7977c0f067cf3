// gtr: graph-based table retrieval toolchain.
//
// Subcommands: convert, pretrain, train, rank, evaluate, inspect. Every
// subcommand accepts --config FILE with flat key=value lines; explicit flags
// override config values. Exit codes: 0 success, 1 data error, 2 config
// error.

#include <exception>
#include <functional>
#include <iostream>

#include <CLI11.hpp>

#include "gtr/gtr.hpp"

namespace {

void add_common_flags(CLI::App* cmd, gtr::RunConfig& cfg) {
  cmd->set_config("--config", "", "flat key=value config file");
  cmd->add_option("--seed", cfg.seed, "random seed, recorded in outputs");
  cmd->add_option("--out", cfg.out, "output directory");
  cmd->add_option("--workers", cfg.workers,
                  "parallel workers for per-table/per-query work");
}

void add_model_flags(CLI::App* cmd, gtr::RunConfig& cfg) {
  cmd->add_option("--embeddings", cfg.embeddings, "embedding text file");
  cmd->add_option("--layers", cfg.layers, "graph transformer layers");
  cmd->add_option("--heads", cfg.heads, "attention heads");
  cmd->add_option("--mlp-hidden", cfg.mlp_hidden, "scorer hidden width");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"graph-based natural-language table retrieval"};
  app.require_subcommand(1);
  gtr::RunConfig cfg;
  std::function<void()> action;

  auto* convert = app.add_subcommand(
      "convert", "build tabular graphs and corpus statistics");
  convert->add_option("--corpus", cfg.corpus, "table JSON-lines file")
      ->required();
  add_common_flags(convert, cfg);
  convert->callback([&]() { action = [&]() { gtr::cmd_convert(cfg); }; });

  auto* pretrain = app.add_subcommand(
      "pretrain", "graph-context matching pre-training");
  pretrain->add_option("--corpus", cfg.corpus, "table JSON-lines file")
      ->required();
  pretrain->add_option("--epochs", cfg.pretrain_epochs, "pre-training epochs");
  pretrain->add_option("--batch-size", cfg.pretrain_batch,
                       "pre-training batch size");
  pretrain->add_option("--lr", cfg.lr, "learning rate");
  pretrain->add_option("--warmup", cfg.warmup, "warmup steps");
  pretrain->add_option("--dropout", cfg.dropout, "dropout rate");
  add_model_flags(pretrain, cfg);
  add_common_flags(pretrain, cfg);
  pretrain->callback([&]() { action = [&]() { gtr::cmd_pretrain(cfg); }; });

  auto* train = app.add_subcommand("train", "train the retrieval model");
  train->add_option("--corpus", cfg.corpus, "table JSON-lines file")
      ->required();
  train->add_option("--queries", cfg.queries, "query TSV")->required();
  train->add_option("--qrels", cfg.qrels, "TREC qrels")->required();
  train->add_option("--checkpoint", cfg.checkpoint,
                    "warm-start checkpoint (e.g. from pretrain)");
  train->add_option("--objective", cfg.objective, "mse or nll")
      ->check(CLI::IsMember({"mse", "nll"}));
  train->add_option("--epochs", cfg.epochs, "training epochs");
  train->add_option("--batch-size", cfg.batch_size, "batch size");
  train->add_option("--lr", cfg.lr, "learning rate");
  train->add_option("--warmup", cfg.warmup, "warmup steps");
  train->add_option("--dropout", cfg.dropout, "dropout rate");
  train->add_option("--negatives", cfg.negatives,
                    "sampled negatives per query per epoch (NLL, "
                    "positive-only qrels)");
  train->add_option("--folds", cfg.folds,
                    "k-fold cross-validation (0 = plain training)");
  train->add_option("--pool", cfg.pool, "ranking pool for CV: corpus|qrels")
      ->check(CLI::IsMember({"corpus", "qrels"}));
  add_model_flags(train, cfg);
  add_common_flags(train, cfg);
  train->callback([&]() { action = [&]() { gtr::cmd_train(cfg); }; });

  auto* rank = app.add_subcommand("rank", "write a TREC run file");
  rank->add_option("--corpus", cfg.corpus, "table JSON-lines file")
      ->required();
  rank->add_option("--queries", cfg.queries, "query TSV")->required();
  rank->add_option("--qrels", cfg.qrels, "TREC qrels (for pool=qrels)");
  rank->add_option("--checkpoint", cfg.checkpoint, "model checkpoint");
  rank->add_option("--ranker", cfg.ranker, "neural or bm25")
      ->check(CLI::IsMember({"neural", "bm25"}));
  rank->add_option("--pool", cfg.pool, "candidate pool: corpus|qrels")
      ->check(CLI::IsMember({"corpus", "qrels"}));
  add_model_flags(rank, cfg);
  add_common_flags(rank, cfg);
  rank->callback([&]() { action = [&]() { gtr::cmd_rank(cfg); }; });

  auto* evaluate = app.add_subcommand(
      "evaluate", "score a run file against qrels");
  evaluate->add_option("--run", cfg.run, "TREC run file")->required();
  evaluate->add_option("--qrels", cfg.qrels, "TREC qrels")->required();
  add_common_flags(evaluate, cfg);
  evaluate->callback([&]() { action = [&]() { gtr::cmd_evaluate(cfg); }; });

  auto* inspect = app.add_subcommand(
      "inspect", "max-pooling attribution for one (query, table) pair");
  inspect->add_option("--query", cfg.query_text, "query text")->required();
  inspect->add_option("--table", cfg.table_id, "table id in the corpus");
  inspect->add_option("--corpus", cfg.corpus, "table JSON-lines file");
  inspect->add_option("--graph", cfg.graph_dump,
                      "graph dump JSON (alternative to --corpus/--table)");
  inspect->add_option("--checkpoint", cfg.checkpoint, "model checkpoint")
      ->required();
  add_model_flags(inspect, cfg);
  add_common_flags(inspect, cfg);
  inspect->callback([&]() { action = [&]() { gtr::cmd_inspect(cfg); }; });

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  try {
    action();
  } catch (const gtr::ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return 2;
  } catch (const gtr::Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
