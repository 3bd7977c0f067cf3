#pragma once

#include <algorithm>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include "gtr/common.hpp"

namespace gtr {

// ---------------------------------------------------------------------------
// Static word embeddings. File format: one line per token,
//   token v1 v2 ... vD
// with an optional first header line `vocab_size dim` (the common
// distribution format for pretrained static vectors). Out-of-vocabulary
// tokens contribute nothing to averages.
// ---------------------------------------------------------------------------

template <typename Real>
class EmbeddingTable {
 public:
  EmbeddingTable() = default;
  explicit EmbeddingTable(std::size_t dim) : dim_(dim) {}

  std::size_t dim() const { return dim_; }
  std::size_t size() const { return vectors_.size(); }

  void insert(const std::string& token, std::vector<Real> vec) {
    if (dim_ == 0) dim_ = vec.size();
    if (vec.size() != dim_) {
      throw DataError(str_cat("embedding for '", token, "' has dimension ",
                              vec.size(), ", table dimension is ", dim_));
    }
    vectors_[token] = std::move(vec);
  }

  const std::vector<Real>* find(const std::string& token) const {
    auto it = vectors_.find(token);
    return it == vectors_.end() ? nullptr : &it->second;
  }

  static EmbeddingTable load(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) {
      throw DataError(str_cat("cannot open embedding file: ", path.string()));
    }
    EmbeddingTable table;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      if (line.empty()) continue;
      std::istringstream ls(line);
      std::string token;
      ls >> token;
      std::vector<Real> vec;
      double v;
      while (ls >> v) vec.push_back(static_cast<Real>(v));
      if (lineno == 1 && vec.size() == 1) {
        // `vocab_size dim` header: both fields are integers.
        char* end = nullptr;
        std::strtoull(token.c_str(), &end, 10);
        if (end && *end == '\0') continue;
      }
      if (vec.empty()) {
        throw DataError(str_cat("embedding file line ", lineno,
                                ": no vector values"));
      }
      if (table.dim_ != 0 && vec.size() != table.dim_) {
        throw DataError(str_cat("embedding file line ", lineno, ": dimension ",
                                vec.size(), " differs from ", table.dim_));
      }
      table.insert(token, std::move(vec));
    }
    return table;
  }

  void save(const std::filesystem::path& path) const {
    std::ofstream out(path);
    if (!out) {
      throw DataError(str_cat("cannot write embedding file: ", path.string()));
    }
    out << vectors_.size() << ' ' << dim_ << '\n';
    // Sorted for reproducible files.
    std::vector<const std::string*> keys;
    keys.reserve(vectors_.size());
    for (const auto& [k, _] : vectors_) keys.push_back(&k);
    std::sort(keys.begin(), keys.end(),
              [](const std::string* a, const std::string* b) { return *a < *b; });
    for (const std::string* k : keys) {
      out << *k;
      for (Real v : vectors_.at(*k)) out << ' ' << v;
      out << '\n';
    }
  }

 private:
  std::size_t dim_ = 0;
  std::unordered_map<std::string, std::vector<Real>> vectors_;
};

/// Average of in-vocabulary token embeddings after tokenization; empty text
/// or an all-OOV text maps to the zero vector.
template <typename Real>
std::vector<Real> embed_text(std::string_view text,
                             const EmbeddingTable<Real>& table) {
  std::vector<Real> acc(table.dim(), Real(0));
  std::size_t hits = 0;
  for (const std::string& token : tokenize(text)) {
    const std::vector<Real>* vec = table.find(token);
    if (!vec) continue;
    for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += (*vec)[i];
    ++hits;
  }
  if (hits > 1) {
    for (Real& v : acc) v /= Real(hits);
  }
  return acc;
}

}  // namespace gtr
