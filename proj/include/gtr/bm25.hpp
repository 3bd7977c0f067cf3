#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <string>
#include <unordered_map>
#include <vector>

#include "gtr/common.hpp"
#include "gtr/table.hpp"

namespace gtr {

/// Flattened lexical view of a table: all cell texts plus the context
/// fields, whitespace-joined, in grid-independent declaration order.
inline std::string flatten_table_text(const Table& table) {
  std::string out;
  for (const auto& row : table.rows) {
    for (const Cell& c : row) {
      if (c.text.empty()) continue;
      if (!out.empty()) out += ' ';
      out += c.text;
    }
  }
  const std::string ctx = table.context.joined();
  if (!ctx.empty()) {
    if (!out.empty()) out += ' ';
    out += ctx;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Okapi BM25 with plus-one IDF smoothing:
//   score(q, D) = sum over query token occurrences t of
//     ln((N - df + 0.5) / (df + 0.5) + 1)
//       * tf * (k1 + 1) / (tf + k1 * (1 - b + b * |D| / avgdl))
// ---------------------------------------------------------------------------

class Bm25Index {
 public:
  static constexpr double kDefaultK1 = 1.2;
  static constexpr double kDefaultB = 0.75;

  static Bm25Index build(const std::map<std::string, Table>& corpus,
                         double k1 = kDefaultK1, double b = kDefaultB) {
    Bm25Index index;
    index.k1_ = k1;
    index.b_ = b;
    double total_len = 0;
    for (const auto& [id, table] : corpus) {
      Doc doc;
      const std::vector<std::string> tokens =
          tokenize(flatten_table_text(table));
      doc.length = static_cast<double>(tokens.size());
      for (const std::string& t : tokens) ++doc.tf[t];
      for (const auto& [term, _] : doc.tf) ++index.df_[term];
      total_len += doc.length;
      index.docs_.emplace(id, std::move(doc));
    }
    index.avgdl_ = index.docs_.empty()
                       ? 0.0
                       : total_len / static_cast<double>(index.docs_.size());
    return index;
  }

  std::size_t doc_count() const { return docs_.size(); }
  double k1() const { return k1_; }
  double b() const { return b_; }

  double score(const std::vector<std::string>& query_tokens,
               const std::string& doc_id) const {
    auto dit = docs_.find(doc_id);
    if (dit == docs_.end()) {
      throw DataError(str_cat("bm25: unknown document '", doc_id, "'"));
    }
    const Doc& doc = dit->second;
    const double n = static_cast<double>(docs_.size());
    double total = 0;
    for (const std::string& t : query_tokens) {
      auto tit = doc.tf.find(t);
      if (tit == doc.tf.end()) continue;
      const double tf = static_cast<double>(tit->second);
      const double df = static_cast<double>(df_.at(t));
      const double idf = std::log((n - df + 0.5) / (df + 0.5) + 1.0);
      const double norm = doc.length / (avgdl_ > 0 ? avgdl_ : 1.0);
      total += idf * tf * (k1_ + 1.0) /
               (tf + k1_ * (1.0 - b_ + b_ * norm));
    }
    return total;
  }

  /// Ranks candidate documents for a query; descending score, ties broken by
  /// ascending document id.
  std::vector<std::pair<std::string, double>> rank(
      const std::string& query_text,
      const std::vector<std::string>& candidate_ids) const {
    const std::vector<std::string> tokens = tokenize(query_text);
    std::vector<std::pair<std::string, double>> scored;
    scored.reserve(candidate_ids.size());
    for (const std::string& id : candidate_ids) {
      scored.emplace_back(id, score(tokens, id));
    }
    std::sort(scored.begin(), scored.end(), [](const auto& a, const auto& b) {
      if (a.second != b.second) return a.second > b.second;
      return a.first < b.first;
    });
    return scored;
  }

 private:
  struct Doc {
    std::unordered_map<std::string, std::size_t> tf;
    double length = 0;
  };
  std::map<std::string, Doc> docs_;
  std::unordered_map<std::string, std::size_t> df_;
  double avgdl_ = 0;
  double k1_ = kDefaultK1;
  double b_ = kDefaultB;
};

/// Ranks candidates for one query with BM25 over the flattened table text.
inline std::vector<std::pair<std::string, double>> bm25_rank(
    const std::string& query_text, const std::vector<std::string>& candidates,
    const Bm25Index& index) {
  return index.rank(query_text, candidates);
}

}  // namespace gtr
