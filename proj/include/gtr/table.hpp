#pragma once

#include <cstddef>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "gtr/common.hpp"

namespace gtr {

// ---------------------------------------------------------------------------
// Core table model. Tables arrive as row-major cell lists with explicit
// row/col spans (HTML-like); complex layouts with nested merged cells are not
// representable as rectangular dataframes, so spans are first-class here.
// ---------------------------------------------------------------------------

struct Cell {
  std::string text;
  int row_span = 1;  // >= 1
  int col_span = 1;  // >= 1
  bool is_header = false;

  bool merged() const { return row_span > 1 || col_span > 1; }
  bool operator==(const Cell&) const = default;
};

struct TableContext {
  std::string caption;
  std::string page_title;
  std::string section_title;

  bool empty() const {
    return caption.empty() && page_title.empty() && section_title.empty();
  }
  /// Space-joined non-empty fields, used by the static context encoder and
  /// the BM25 document text.
  std::string joined() const {
    std::string out;
    for (const std::string* s : {&caption, &page_title, &section_title}) {
      if (s->empty()) continue;
      if (!out.empty()) out += ' ';
      out += *s;
    }
    return out;
  }
  bool operator==(const TableContext&) const = default;
};

struct Table {
  std::string id;
  std::vector<std::vector<Cell>> rows;  // ragged allowed before resolution
  TableContext context;

  bool operator==(const Table&) const = default;

  std::size_t cell_count() const {
    std::size_t n = 0;
    for (const auto& r : rows) n += r.size();
    return n;
  }
};

/// Rectangle of grid slots covered by one cell after span resolution.
struct CellRect {
  std::size_t row = 0, col = 0;
  std::size_t row_span = 1, col_span = 1;

  std::size_t row_end() const { return row + row_span; }  // exclusive
  std::size_t col_end() const { return col + col_span; }  // exclusive
  bool covers(std::size_t r, std::size_t c) const {
    return r >= row && r < row_end() && c >= col && c < col_end();
  }
};

/// Resolved occupancy grid: every slot maps to exactly one cell id. Cell ids
/// index `cells`, which holds the table's cells flattened row-major followed
/// by any synthetic padding cells.
struct GridIndex {
  std::size_t n_rows = 0;
  std::size_t n_cols = 0;
  std::vector<std::vector<std::size_t>> occupancy;  // [n_rows][n_cols] -> cell id
  std::vector<Cell> cells;
  std::vector<CellRect> rects;        // aligned with `cells`
  std::size_t table_cell_count = 0;   // ids below this come from the table
  std::size_t pad_count = 0;          // synthetic cells added to cover gaps

  std::size_t cell_at(std::size_t r, std::size_t c) const {
    return occupancy[r][c];
  }
};

struct RetrievalInstance {
  std::string query_id;
  std::string query_text;
  std::vector<std::pair<std::string, int>> candidates;  // (table_id, grade)
};

// ---------------------------------------------------------------------------
// JSON parsing
// ---------------------------------------------------------------------------

namespace detail {

inline Cell cell_from_json(const nlohmann::json& j, std::size_t row,
                           std::size_t pos) {
  Cell cell;
  cell.text = j.value("text", std::string());
  cell.row_span = j.value("row_span", 1);
  cell.col_span = j.value("col_span", 1);
  cell.is_header = j.value("is_header", false);
  if (cell.row_span < 1 || cell.col_span < 1) {
    throw DataError(str_cat("table cell (", row, ",", pos,
                            "): spans must be >= 1, got row_span=",
                            cell.row_span, " col_span=", cell.col_span));
  }
  return cell;
}

}  // namespace detail

/// Parses one table from its canonical JSON form:
///   {"id": str,
///    "rows": [[{"text": str, "row_span": int?, "col_span": int?,
///               "is_header": bool?}, ...], ...],
///    "context": {"caption": str, "page_title": str, "section_title": str}}
/// Absent span fields default to 1. Cell order is preserved.
inline Table parse_table_json(std::string_view bytes) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(bytes);
  } catch (const nlohmann::json::parse_error& e) {
    throw DataError(str_cat("table JSON parse error at byte ", e.byte, ": ",
                            e.what()));
  }
  Table table;
  table.id = j.value("id", std::string());
  if (!j.contains("rows") || !j["rows"].is_array() || j["rows"].empty()) {
    throw DataError(str_cat("table '", table.id, "': missing or empty rows"));
  }
  std::size_t r = 0;
  for (const auto& jrow : j["rows"]) {
    if (!jrow.is_array() || jrow.empty()) {
      throw DataError(str_cat("table '", table.id, "': row ", r,
                              " is not a non-empty array"));
    }
    std::vector<Cell> row;
    row.reserve(jrow.size());
    std::size_t pos = 0;
    for (const auto& jcell : jrow) {
      row.push_back(detail::cell_from_json(jcell, r, pos));
      ++pos;
    }
    table.rows.push_back(std::move(row));
    ++r;
  }
  if (j.contains("context")) {
    const auto& jc = j["context"];
    table.context.caption = jc.value("caption", std::string());
    table.context.page_title = jc.value("page_title", std::string());
    table.context.section_title = jc.value("section_title", std::string());
  }
  return table;
}

inline nlohmann::json table_to_json(const Table& table) {
  nlohmann::json jrows = nlohmann::json::array();
  for (const auto& row : table.rows) {
    nlohmann::json jrow = nlohmann::json::array();
    for (const Cell& c : row) {
      jrow.push_back({{"text", c.text},
                      {"row_span", c.row_span},
                      {"col_span", c.col_span},
                      {"is_header", c.is_header}});
    }
    jrows.push_back(std::move(jrow));
  }
  return {{"id", table.id},
          {"rows", std::move(jrows)},
          {"context",
           {{"caption", table.context.caption},
            {"page_title", table.context.page_title},
            {"section_title", table.context.section_title}}}};
}

inline std::string serialize_table(const Table& table) {
  return table_to_json(table).dump();
}

// ---------------------------------------------------------------------------
// Span resolution
// ---------------------------------------------------------------------------

/// First-fit placement with HTML table semantics: cells of each declared row
/// are placed left to right at the first slot not already claimed by an
/// earlier span, then claim their full row_span x col_span rectangle.
/// Uncovered slots (ragged rows, span gaps) are padded with synthetic empty
/// cells; the count is reported in GridIndex::pad_count.
/// A rectangle landing on an already-claimed slot is a layout error.
inline GridIndex resolve_grid(const Table& table) {
  if (table.rows.empty()) {
    throw DataError(str_cat("table '", table.id, "': no rows"));
  }
  constexpr std::size_t kFree = static_cast<std::size_t>(-1);
  std::vector<std::vector<std::size_t>> grid;  // grows on demand
  auto slot = [&](std::size_t r, std::size_t c) -> std::size_t& {
    if (grid.size() <= r) grid.resize(r + 1);
    if (grid[r].size() <= c) grid[r].resize(c + 1, kFree);
    return grid[r][c];
  };

  GridIndex out;
  std::size_t cell_id = 0;
  for (std::size_t r = 0; r < table.rows.size(); ++r) {
    std::size_t cursor = 0;
    for (const Cell& cell : table.rows[r]) {
      while (slot(r, cursor) != kFree) ++cursor;
      const auto rs = static_cast<std::size_t>(cell.row_span);
      const auto cs = static_cast<std::size_t>(cell.col_span);
      for (std::size_t rr = r; rr < r + rs; ++rr) {
        for (std::size_t cc = cursor; cc < cursor + cs; ++cc) {
          std::size_t& s = slot(rr, cc);
          if (s != kFree) {
            throw DataError(str_cat("table '", table.id, "': cell ", cell_id,
                                    " overlaps cell ", s, " at slot (", rr,
                                    ",", cc, ")"));
          }
          s = cell_id;
        }
      }
      out.cells.push_back(cell);
      out.rects.push_back({r, cursor, rs, cs});
      cursor += cs;
      ++cell_id;
    }
  }
  out.table_cell_count = cell_id;

  out.n_rows = grid.size();
  for (const auto& row : grid) out.n_cols = std::max(out.n_cols, row.size());
  out.occupancy.assign(out.n_rows, std::vector<std::size_t>(out.n_cols, kFree));
  for (std::size_t r = 0; r < grid.size(); ++r) {
    for (std::size_t c = 0; c < grid[r].size(); ++c) {
      out.occupancy[r][c] = grid[r][c];
    }
  }
  // Pad whatever is still uncovered with 1x1 empty cells, row-major.
  for (std::size_t r = 0; r < out.n_rows; ++r) {
    for (std::size_t c = 0; c < out.n_cols; ++c) {
      if (out.occupancy[r][c] == kFree) {
        out.occupancy[r][c] = out.cells.size();
        out.cells.push_back(Cell{});
        out.rects.push_back({r, c, 1, 1});
        ++out.pad_count;
      }
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Dataset loading
// ---------------------------------------------------------------------------

/// Loads a JSON-lines corpus, one table object per line. Per-line parse
/// failures are aggregated into one error; duplicate ids are an error naming
/// the offending lines.
inline std::map<std::string, Table> load_corpus(
    const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError(str_cat("cannot open corpus file: ", path.string()));

  std::map<std::string, Table> corpus;
  std::map<std::string, std::size_t> first_line;
  std::vector<std::string> errors;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      Table t = parse_table_json(line);
      if (t.id.empty()) {
        errors.push_back(str_cat("line ", lineno, ": table has empty id"));
        continue;
      }
      auto [it, inserted] = corpus.emplace(t.id, std::move(t));
      if (!inserted) {
        errors.push_back(str_cat("line ", lineno, ": duplicate table id '",
                                 it->first, "' (first seen on line ",
                                 first_line[it->first], ")"));
      } else {
        first_line[it->first] = lineno;
      }
    } catch (const DataError& e) {
      errors.push_back(str_cat("line ", lineno, ": ", e.what()));
    }
  }
  if (!errors.empty()) {
    throw DataError(str_cat("corpus ", path.string(), ": ", errors.size(),
                            " error(s):\n  ", join(errors, "\n  ")));
  }
  return corpus;
}

struct InstanceLoadReport {
  std::size_t skipped_unknown_tables = 0;
  std::size_t queries_without_candidates = 0;
};

/// Loads a query TSV (`query_id<TAB>query_text`) into instances with empty
/// candidate lists.
inline std::vector<RetrievalInstance> load_queries(
    const std::filesystem::path& query_path) {
  std::ifstream qin(query_path);
  if (!qin) {
    throw DataError(str_cat("cannot open query file: ", query_path.string()));
  }
  std::vector<RetrievalInstance> instances;
  std::map<std::string, bool> seen;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(qin, line)) {
    ++lineno;
    if (line.empty()) continue;
    auto tab = line.find('\t');
    if (tab == std::string::npos) {
      throw DataError(str_cat("query file line ", lineno,
                              ": expected query_id<TAB>query_text"));
    }
    RetrievalInstance inst;
    inst.query_id = line.substr(0, tab);
    inst.query_text = line.substr(tab + 1);
    if (inst.query_id.empty()) {
      throw DataError(str_cat("query file line ", lineno, ": empty query id"));
    }
    if (seen.count(inst.query_id)) {
      throw DataError(str_cat("query file line ", lineno,
                              ": duplicate query id '", inst.query_id, "'"));
    }
    seen[inst.query_id] = true;
    instances.push_back(std::move(inst));
  }
  return instances;
}

/// Loads retrieval instances from a query TSV (`query_id<TAB>query_text`)
/// and TREC qrels (`query_id 0 table_id grade`). Candidates referencing
/// tables absent from the corpus are skipped with a warning count; qrels
/// referencing unknown query ids are an error.
inline std::vector<RetrievalInstance> load_instances(
    const std::filesystem::path& query_path,
    const std::filesystem::path& qrel_path,
    const std::map<std::string, Table>& corpus,
    InstanceLoadReport* report = nullptr) {
  std::vector<RetrievalInstance> instances = load_queries(query_path);
  std::map<std::string, std::size_t> index_of;
  for (std::size_t i = 0; i < instances.size(); ++i) {
    index_of[instances[i].query_id] = i;
  }
  std::string line;
  std::size_t lineno = 0;

  std::ifstream rin(qrel_path);
  if (!rin) {
    throw DataError(str_cat("cannot open qrels file: ", qrel_path.string()));
  }
  InstanceLoadReport local;
  lineno = 0;
  while (std::getline(rin, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::istringstream ls(line);
    std::string qid, zero, tid;
    long grade = -1;
    if (!(ls >> qid >> zero >> tid >> grade) || grade < 0) {
      throw DataError(str_cat("qrels line ", lineno,
                              ": expected `query_id 0 table_id grade`"));
    }
    auto it = index_of.find(qid);
    if (it == index_of.end()) {
      throw DataError(str_cat("qrels line ", lineno, ": unknown query id '",
                              qid, "'"));
    }
    if (!corpus.count(tid)) {
      ++local.skipped_unknown_tables;
      continue;
    }
    auto& cands = instances[it->second].candidates;
    for (const auto& [existing, g] : cands) {
      if (existing == tid) {
        throw DataError(str_cat("qrels line ", lineno, ": duplicate candidate '",
                                tid, "' for query '", qid, "'"));
      }
    }
    cands.emplace_back(tid, static_cast<int>(grade));
  }
  for (const auto& inst : instances) {
    if (inst.candidates.empty()) ++local.queries_without_candidates;
  }
  if (report) *report = local;
  return instances;
}

}  // namespace gtr
