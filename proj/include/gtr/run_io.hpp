#pragma once

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "gtr/common.hpp"
#include "gtr/metrics.hpp"

namespace gtr {

// ---------------------------------------------------------------------------
// TREC run files: `query_id Q0 table_id rank score tag`, ranks 1-based,
// scores non-increasing within a query. Scores are serialized with 9
// significant digits so round-trips preserve rankings.
// ---------------------------------------------------------------------------

struct RunEntry {
  std::string table_id;
  double score = 0;
};

struct RunFile {
  // query id -> entries in rank order
  std::map<std::string, std::vector<RunEntry>> queries;
  std::string tag = "gtr";
};

inline void write_run(const RunFile& run, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw DataError(str_cat("cannot write run file: ", path.string()));
  char buf[48];
  for (const auto& [qid, entries] : run.queries) {
    for (std::size_t i = 0; i < entries.size(); ++i) {
      if (i > 0 && entries[i].score > entries[i - 1].score) {
        throw DataError(str_cat("run for query '", qid,
                                "' has increasing scores at rank ", i + 1));
      }
      std::snprintf(buf, sizeof(buf), "%.9g", entries[i].score);
      out << qid << " Q0 " << entries[i].table_id << ' ' << (i + 1) << ' '
          << buf << ' ' << run.tag << '\n';
    }
  }
}

inline RunFile read_run(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError(str_cat("cannot open run file: ", path.string()));
  RunFile run;
  std::map<std::string, std::vector<std::pair<long, RunEntry>>> staged;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::istringstream ls(line);
    std::string qid, q0, tid, tag;
    long rank = 0;
    double score = 0;
    if (!(ls >> qid >> q0 >> tid >> rank >> score >> tag) || rank < 1) {
      throw DataError(str_cat("run file ", path.string(), " line ", lineno,
                              ": expected `query_id Q0 table_id rank score "
                              "tag`"));
    }
    staged[qid].emplace_back(rank, RunEntry{tid, score});
    run.tag = tag;
  }
  for (auto& [qid, entries] : staged) {
    std::sort(entries.begin(), entries.end(),
              [](const auto& a, const auto& b) { return a.first < b.first; });
    auto& out = run.queries[qid];
    for (auto& [rank, entry] : entries) {
      for (const RunEntry& seen : out) {
        if (seen.table_id == entry.table_id) {
          throw DataError(str_cat("run file ", path.string(),
                                  ": duplicate table '", entry.table_id,
                                  "' for query '", qid, "'"));
        }
      }
      out.push_back(std::move(entry));
    }
  }
  return run;
}

/// Grades of a run's rankings looked up in qrels (absent pairs grade 0),
/// ready for evaluate_rankings.
inline std::vector<std::pair<std::string, std::vector<int>>> run_to_grades(
    const RunFile& run,
    const std::map<std::string, std::map<std::string, int>>& qrels) {
  std::vector<std::pair<std::string, std::vector<int>>> out;
  for (const auto& [qid, entries] : run.queries) {
    std::vector<int> grades;
    grades.reserve(entries.size());
    auto qit = qrels.find(qid);
    for (const RunEntry& e : entries) {
      int g = 0;
      if (qit != qrels.end()) {
        auto git = qit->second.find(e.table_id);
        if (git != qit->second.end()) g = git->second;
      }
      grades.push_back(g);
    }
    out.emplace_back(qid, std::move(grades));
  }
  return out;
}

/// Loads TREC qrels as query id -> (table id -> grade).
inline std::map<std::string, std::map<std::string, int>> load_qrels(
    const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError(str_cat("cannot open qrels file: ", path.string()));
  std::map<std::string, std::map<std::string, int>> qrels;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::istringstream ls(line);
    std::string qid, zero, tid;
    long grade = -1;
    if (!(ls >> qid >> zero >> tid >> grade) || grade < 0) {
      throw DataError(str_cat("qrels line ", lineno,
                              ": expected `query_id 0 table_id grade`"));
    }
    qrels[qid][tid] = static_cast<int>(grade);
  }
  return qrels;
}

}  // namespace gtr
