#include "gtr/cli.hpp"

#include <cstdlib>
#include <fstream>
#include <sstream>

#include <gtest/gtest.h>

#include <json.hpp>

#include "support/toy.hpp"

using namespace gtr;

namespace {

std::string read_bytes(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream out;
  out << in.rdbuf();
  return out.str();
}

nlohmann::json read_json(const std::filesystem::path& p) {
  std::ifstream in(p);
  nlohmann::json j;
  in >> j;
  return j;
}

int run_cli(const std::string& args, const std::filesystem::path& log) {
  const std::string cmd = str_cat(GTR_CLI_BINARY, " ", args, " > ",
                                  log.string(), " 2>&1");
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

/// Tiny on-disk corpus shared by the command tests: 8 tables, 6 queries,
/// 16-dimensional embeddings.
class CliTest : public ::testing::Test {
 protected:
  void SetUp() override {
    corpus_ = toy::make_corpus(8, 6, 21);
    emb_ = toy::make_embeddings<float>(corpus_.vocabulary, 16, 22);
    files_ = toy::write_files(corpus_, emb_, tmp_.path / "data");
  }

  RunConfig base_config(const std::string& out_name) {
    RunConfig cfg;
    cfg.corpus = files_.corpus;
    cfg.queries = files_.queries;
    cfg.qrels = files_.qrels;
    cfg.embeddings = files_.embeddings;
    cfg.out = tmp_.path / out_name;
    cfg.layers = 2;
    cfg.heads = 2;
    cfg.mlp_hidden = 8;
    cfg.epochs = 1;
    cfg.batch_size = 2;
    cfg.warmup = 2;
    cfg.negatives = 3;
    cfg.objective = "nll";
    cfg.pretrain_epochs = 1;
    cfg.pretrain_batch = 4;
    cfg.seed = 5;
    return cfg;
  }

  toy::TempDir tmp_{"cli"};
  toy::ToyCorpus corpus_;
  EmbeddingTable<float> emb_;
  toy::ToyFiles files_;
};

TEST_F(CliTest, ConvertWritesGraphsAndStats) {
  RunConfig cfg = base_config("convert_out");
  cmd_convert(cfg);
  const auto stats = read_json(cfg.out / "stats.json");
  EXPECT_EQ(stats.at("table_count").get<std::size_t>(), 8u);
  // Shapes 2 and 3 of the generator carry merged cells: 4 of 8 tables.
  EXPECT_EQ(stats.at("merged_table_count").get<std::size_t>(), 4u);
  EXPECT_EQ(stats.at("seed").get<std::uint64_t>(), 5u);
  std::size_t graph_files = 0;
  for (const auto& entry :
       std::filesystem::directory_iterator(cfg.out / "graphs")) {
    ++graph_files;
    const auto dump = graph_from_json(read_json(entry.path()));
    EXPECT_GT(dump.graph.node_count(), 0u);
  }
  EXPECT_EQ(graph_files, 8u);
}

TEST_F(CliTest, ConvertFailsOnCorruptLine) {
  const auto bad = tmp_.path / "bad.jsonl";
  {
    std::ofstream out(bad);
    out << R"({"id":"ok","rows":[[{"text":"x"}]]})" << '\n';
    out << "{corrupt" << '\n';
  }
  RunConfig cfg = base_config("convert_bad");
  cfg.corpus = bad;
  EXPECT_THROW(cmd_convert(cfg), DataError);
}

TEST_F(CliTest, PretrainTrainRankEvaluatePipeline) {
  RunConfig pre = base_config("pipe");
  cmd_pretrain(pre);
  const auto pre_ckpt = pre.out / "pretrain.ckpt";
  ASSERT_TRUE(std::filesystem::exists(pre_ckpt));
  // The log header records the pre-training schedule.
  {
    std::ifstream log(pre.out / "pretrain_log.jsonl");
    std::string header_line;
    ASSERT_TRUE(std::getline(log, header_line));
    const auto header = nlohmann::json::parse(header_line);
    EXPECT_EQ(header.at("epochs").get<std::size_t>(), 1u);
    EXPECT_EQ(header.at("batch_size").get<std::size_t>(), 4u);
  }

  RunConfig train_cfg = base_config("pipe");
  train_cfg.checkpoint = pre_ckpt;
  cmd_train(train_cfg);
  const auto ckpt = train_cfg.out / "checkpoint.bin";
  ASSERT_TRUE(std::filesystem::exists(ckpt));

  RunConfig rank_cfg = base_config("pipe");
  rank_cfg.checkpoint = ckpt;
  cmd_rank(rank_cfg);
  const auto run_path = rank_cfg.out / "run.trec";
  ASSERT_TRUE(std::filesystem::exists(run_path));
  const RunFile run = read_run(run_path);
  EXPECT_EQ(run.queries.size(), 6u);
  for (const auto& [qid, entries] : run.queries) {
    EXPECT_EQ(entries.size(), 8u);  // pool=corpus
  }

  RunConfig eval_cfg = base_config("pipe");
  eval_cfg.run = run_path;
  cmd_evaluate(eval_cfg);
  const auto report = read_json(eval_cfg.out / "eval.json");
  EXPECT_EQ(report.at("query_count").get<std::size_t>(), 6u);
  EXPECT_TRUE(report.at("mean").contains("map"));
}

TEST_F(CliTest, EvaluatePerfectRunScoresMapOne) {
  const auto run_path = tmp_.path / "perfect.trec";
  {
    RunFile run;
    for (const auto& q : corpus_.queries) {
      // Put the relevant table first, then one irrelevant.
      const std::string pos = q.candidates[0].first;
      run.queries[q.query_id] = {{pos, 2.0},
                                 {pos == "t7" ? "t6" : "t7", 1.0}};
    }
    write_run(run, run_path);
  }
  RunConfig cfg = base_config("eval_perfect");
  cfg.run = run_path;
  cmd_evaluate(cfg);
  const auto report = read_json(cfg.out / "eval.json");
  EXPECT_DOUBLE_EQ(report.at("mean").at("map").get<double>(), 1.0);
  EXPECT_DOUBLE_EQ(report.at("mean").at("p@1").get<double>(), 1.0);
}

TEST_F(CliTest, Bm25RankerNeedsNoCheckpoint) {
  RunConfig cfg = base_config("bm25_out");
  cfg.ranker = "bm25";
  cmd_rank(cfg);
  const RunFile run = read_run(cfg.out / "run.trec");
  EXPECT_EQ(run.queries.size(), 6u);
  // Keyword match is lexical: every query's table must rank first.
  for (const auto& q : corpus_.queries) {
    EXPECT_EQ(run.queries.at(q.query_id).front().table_id,
              q.candidates[0].first);
  }
}

TEST_F(CliTest, TrainTwiceSameSeedGivesIdenticalArtifacts) {
  RunConfig a = base_config("det_a");
  RunConfig b = base_config("det_b");
  cmd_train(a);
  cmd_train(b);
  EXPECT_EQ(read_bytes(a.out / "checkpoint.bin"),
            read_bytes(b.out / "checkpoint.bin"));
  EXPECT_EQ(read_bytes(a.out / "train_log.jsonl"),
            read_bytes(b.out / "train_log.jsonl"));

  RunConfig ra = base_config("det_a");
  ra.checkpoint = a.out / "checkpoint.bin";
  RunConfig rb = base_config("det_b");
  rb.checkpoint = b.out / "checkpoint.bin";
  cmd_rank(ra);
  cmd_rank(rb);
  EXPECT_EQ(read_bytes(ra.out / "run.trec"), read_bytes(rb.out / "run.trec"));
}

TEST_F(CliTest, CrossValidationEmitsFoldArtifactsAndPooledReport) {
  RunConfig cfg = base_config("cv_out");
  cfg.folds = 2;
  cmd_train(cfg);
  for (int f = 0; f < 2; ++f) {
    EXPECT_TRUE(std::filesystem::exists(cfg.out / str_cat("fold", f) /
                                        "checkpoint.bin"));
    EXPECT_TRUE(std::filesystem::exists(cfg.out / str_cat("fold", f) /
                                        "run.trec"));
  }
  const auto report = read_json(cfg.out / "cv_report.json");
  EXPECT_EQ(report.at("query_count").get<std::size_t>(), 6u);
}

TEST_F(CliTest, InspectFrequenciesSumToMatchDim) {
  RunConfig train_cfg = base_config("inspect_out");
  cmd_train(train_cfg);
  RunConfig cfg = base_config("inspect_out");
  cfg.checkpoint = train_cfg.out / "checkpoint.bin";
  cfg.query_text = corpus_.queries[0].query_text;
  cfg.table_id = "t0";
  cmd_inspect(cfg);
  const auto csv_path = cfg.out / str_cat("attribution_",
                                          cfg.query_text, "_t0.csv");
  ASSERT_TRUE(std::filesystem::exists(csv_path));
  std::ifstream in(csv_path);
  std::string line;
  std::getline(in, line);  // header
  EXPECT_EQ(line, "node_kind,row,col,cell_index,frequency");
  std::size_t total = 0, rows = 0;
  while (std::getline(in, line)) {
    const auto comma = line.rfind(',');
    total += std::stoul(line.substr(comma + 1));
    ++rows;
  }
  EXPECT_EQ(total, 16u);  // match_dim follows the 16-d embeddings here
  const auto& pt = corpus_.tables.at("t0");
  EXPECT_EQ(rows, resolve_grid(pt).cells.size() + resolve_grid(pt).n_rows +
                      resolve_grid(pt).n_cols);
}

// ---------------------------------------------------------------------------
// Binary-level checks (exit codes, config file, flag overrides)
// ---------------------------------------------------------------------------

TEST_F(CliTest, BinaryExitCodes) {
  const auto log = tmp_.path / "cli.log";
  EXPECT_EQ(run_cli("definitely-not-a-command", log), 2);
  EXPECT_EQ(run_cli("rank --corpus missing.jsonl --queries also-missing.tsv",
                    log),
            2);
  // Corrupt corpus data -> exit 1.
  const auto bad = tmp_.path / "bad.jsonl";
  std::ofstream(bad) << "{corrupt\n";
  EXPECT_EQ(run_cli(str_cat("convert --corpus ", bad.string(), " --out ",
                            (tmp_.path / "bad_out").string()),
                    log),
            1);
  // Success path.
  EXPECT_EQ(run_cli(str_cat("convert --corpus ", files_.corpus.string(),
                            " --out ", (tmp_.path / "ok_out").string()),
                    log),
            0);
}

TEST_F(CliTest, ConfigFileSuppliesFlagsAndCliOverrides) {
  const auto cfg_file = tmp_.path / "run.cfg";
  {
    std::ofstream out(cfg_file);
    out << "corpus=" << files_.corpus.string() << '\n';
    out << "out=" << (tmp_.path / "cfg_out").string() << '\n';
    out << "seed=9\n";
  }
  const auto log = tmp_.path / "cfg.log";
  ASSERT_EQ(run_cli(str_cat("convert --config ", cfg_file.string()), log), 0);
  EXPECT_EQ(read_json(tmp_.path / "cfg_out" / "stats.json")
                .at("seed")
                .get<std::uint64_t>(),
            9u);
  // Explicit flag beats the config file.
  ASSERT_EQ(run_cli(str_cat("convert --config ", cfg_file.string(),
                            " --seed 12 --out ",
                            (tmp_.path / "cfg_out2").string()),
                    log),
            0);
  EXPECT_EQ(read_json(tmp_.path / "cfg_out2" / "stats.json")
                .at("seed")
                .get<std::uint64_t>(),
            12u);
}

TEST_F(CliTest, BinaryEndToEndPipeline) {
  const auto log = tmp_.path / "e2e.log";
  const auto out = (tmp_.path / "e2e").string();
  ASSERT_EQ(run_cli(str_cat("train --corpus ", files_.corpus.string(),
                            " --queries ", files_.queries.string(),
                            " --qrels ", files_.qrels.string(),
                            " --embeddings ", files_.embeddings.string(),
                            " --objective nll --epochs 1 --batch-size 2",
                            " --negatives 3 --layers 2 --heads 2",
                            " --mlp-hidden 8 --warmup 2 --seed 5 --out ", out),
                    log),
            0)
      << read_bytes(log);
  ASSERT_EQ(run_cli(str_cat("rank --corpus ", files_.corpus.string(),
                            " --queries ", files_.queries.string(),
                            " --embeddings ", files_.embeddings.string(),
                            " --checkpoint ", out, "/checkpoint.bin",
                            " --layers 2 --heads 2 --mlp-hidden 8",
                            " --seed 5 --out ", out),
                    log),
            0)
      << read_bytes(log);
  ASSERT_EQ(run_cli(str_cat("evaluate --run ", out, "/run.trec --qrels ",
                            files_.qrels.string(), " --out ", out),
                    log),
            0)
      << read_bytes(log);
  EXPECT_TRUE(std::filesystem::exists(tmp_.path / "e2e" / "eval.json"));
}

}  // namespace
