#pragma once

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "gtr/common.hpp"

namespace gtr {

// ---------------------------------------------------------------------------
// Ranking metrics over graded relevance. NDCG uses exponential gain
// (2^g - 1) with a log2(i+1) discount, the graded-variant convention of the
// standard TREC tooling; MAP and P@1 binarize at grade >= 1.
// ---------------------------------------------------------------------------

inline double dcg_at_k(const std::vector<int>& grades, std::size_t k) {
  double dcg = 0;
  const std::size_t n = std::min(k, grades.size());
  for (std::size_t i = 0; i < n; ++i) {
    dcg += (std::exp2(static_cast<double>(grades[i])) - 1.0) /
           std::log2(static_cast<double>(i) + 2.0);
  }
  return dcg;
}

/// NDCG@k of a ranking given its grades in rank order. The ideal ranking
/// sorts the same grades descending; all-zero grades give 0 by convention.
inline double ndcg_at_k(const std::vector<int>& ranked_grades, std::size_t k) {
  if (k == 0) throw ConfigError("ndcg_at_k: k must be positive");
  std::vector<int> ideal(ranked_grades);
  std::sort(ideal.begin(), ideal.end(), std::greater<int>());
  const double idcg = dcg_at_k(ideal, k);
  if (idcg == 0.0) return 0.0;
  return dcg_at_k(ranked_grades, k) / idcg;
}

/// Average precision with binary relevance (grade >= 1): mean over relevant
/// ranks of precision at that rank. 0 when nothing is relevant.
inline double average_precision(const std::vector<int>& ranked_grades) {
  double sum = 0;
  std::size_t relevant = 0;
  for (std::size_t i = 0; i < ranked_grades.size(); ++i) {
    if (ranked_grades[i] >= 1) {
      ++relevant;
      sum += static_cast<double>(relevant) / static_cast<double>(i + 1);
    }
  }
  return relevant == 0 ? 0.0 : sum / static_cast<double>(relevant);
}

/// 1 if the top-ranked candidate is relevant, 0 otherwise (including for an
/// empty ranking).
inline double p_at_1(const std::vector<int>& ranked_grades) {
  return !ranked_grades.empty() && ranked_grades.front() >= 1 ? 1.0 : 0.0;
}

// ---------------------------------------------------------------------------
// Evaluation report
// ---------------------------------------------------------------------------

inline const std::vector<std::size_t>& ndcg_cutoffs() {
  static const std::vector<std::size_t> ks = {5, 10, 15, 20};
  return ks;
}

struct QueryMetrics {
  std::string query_id;
  std::map<std::string, double> values;  // metric name -> value
};

struct EvalReport {
  std::vector<QueryMetrics> per_query;
  std::map<std::string, double> mean;
  std::size_t query_count = 0;
  std::size_t map_query_count = 0;  // queries with >= 1 relevant candidate
  std::uint64_t seed = 0;
};

/// Computes NDCG@{5,10,15,20}, AP and P@1 per query from rank-ordered grade
/// lists. MAP averages only over queries with at least one relevant
/// candidate; the other means include every query.
inline EvalReport evaluate_rankings(
    const std::vector<std::pair<std::string, std::vector<int>>>& ranked_grades) {
  EvalReport report;
  report.query_count = ranked_grades.size();
  std::map<std::string, double> totals;
  for (const auto& [qid, grades] : ranked_grades) {
    QueryMetrics qm;
    qm.query_id = qid;
    for (std::size_t k : ndcg_cutoffs()) {
      qm.values[str_cat("ndcg@", k)] = ndcg_at_k(grades, k);
    }
    const bool has_relevant =
        std::any_of(grades.begin(), grades.end(), [](int g) { return g >= 1; });
    qm.values["ap"] = average_precision(grades);
    qm.values["p@1"] = p_at_1(grades);
    for (const auto& [name, v] : qm.values) {
      if (name == "ap" && !has_relevant) continue;
      totals[name] += v;
    }
    if (has_relevant) ++report.map_query_count;
    report.per_query.push_back(std::move(qm));
  }
  if (report.query_count > 0) {
    for (const auto& [name, total] : totals) {
      const double denom = name == "ap"
                               ? static_cast<double>(report.map_query_count)
                               : static_cast<double>(report.query_count);
      report.mean[name] = denom > 0 ? total / denom : 0.0;
    }
    report.mean["map"] = report.mean.count("ap") ? report.mean["ap"] : 0.0;
  }
  return report;
}

inline nlohmann::json eval_report_to_json(const EvalReport& report) {
  nlohmann::json per_query = nlohmann::json::array();
  for (const auto& qm : report.per_query) {
    nlohmann::json jq{{"query_id", qm.query_id}};
    for (const auto& [name, v] : qm.values) jq[name] = v;
    per_query.push_back(std::move(jq));
  }
  nlohmann::json mean;
  for (const auto& [name, v] : report.mean) mean[name] = v;
  return {{"seed", report.seed},
          {"query_count", report.query_count},
          {"map_query_count", report.map_query_count},
          {"mean", std::move(mean)},
          {"per_query", std::move(per_query)}};
}

/// Aligned plain-text table of the mean metrics.
inline std::string eval_report_to_text(const EvalReport& report) {
  std::ostringstream out;
  out << std::fixed << std::setprecision(4);
  out << std::left << std::setw(10) << "metric" << "mean\n";
  for (const char* name : {"ndcg@5", "ndcg@10", "ndcg@15", "ndcg@20", "map",
                           "p@1"}) {
    auto it = report.mean.find(name);
    out << std::left << std::setw(10) << name
        << (it == report.mean.end() ? 0.0 : it->second) << '\n';
  }
  out << "queries   " << report.query_count << '\n';
  return out.str();
}

// ---------------------------------------------------------------------------
// k-fold cross-validation split
// ---------------------------------------------------------------------------

struct Fold {
  std::vector<std::string> train_ids;
  std::vector<std::string> test_ids;
};

/// Seeded shuffle, then contiguous folds of near-equal size (the first
/// `n % k` folds get one extra query). Every query lands in exactly one
/// test fold.
inline std::vector<Fold> kfold_split(const std::vector<std::string>& query_ids,
                                     std::size_t k, std::uint64_t seed) {
  if (k == 0) throw ConfigError("kfold_split: k must be positive");
  if (query_ids.size() < k) {
    throw ConfigError(str_cat("kfold_split: ", query_ids.size(),
                              " queries cannot fill ", k, " folds"));
  }
  std::vector<std::string> shuffled(query_ids);
  Rng rng(seed);
  for (std::size_t i = shuffled.size(); i > 1; --i) {
    std::swap(shuffled[i - 1], shuffled[rng.next_below(i)]);
  }
  const std::size_t base = shuffled.size() / k;
  const std::size_t extra = shuffled.size() % k;
  std::vector<Fold> folds(k);
  std::size_t pos = 0;
  for (std::size_t f = 0; f < k; ++f) {
    const std::size_t size = base + (f < extra ? 1 : 0);
    for (std::size_t i = 0; i < size; ++i) {
      folds[f].test_ids.push_back(shuffled[pos + i]);
    }
    pos += size;
  }
  for (std::size_t f = 0; f < k; ++f) {
    for (std::size_t g = 0; g < k; ++g) {
      if (g == f) continue;
      folds[f].train_ids.insert(folds[f].train_ids.end(),
                                folds[g].test_ids.begin(),
                                folds[g].test_ids.end());
    }
  }
  return folds;
}

}  // namespace gtr
