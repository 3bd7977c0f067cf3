#pragma once

#include <algorithm>
#include <cstddef>
#include <map>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "gtr/common.hpp"
#include "gtr/table.hpp"

namespace gtr {

// ---------------------------------------------------------------------------
// Multi-granular tabular graph: one node per cell plus one global node per
// grid row and per grid column. Adjacent cells are connected in both
// directions; every global node receives a directed edge from each of its
// constituent cells. Global nodes have no out-edges, so information flows
// cell -> global only. Self-loops are not stored; the encoder injects them
// at attention time.
// ---------------------------------------------------------------------------

enum class NodeKind { Cell, Row, Col };

inline const char* node_kind_name(NodeKind k) {
  switch (k) {
    case NodeKind::Cell: return "cell";
    case NodeKind::Row: return "row";
    case NodeKind::Col: return "col";
  }
  return "?";
}

struct GraphNode {
  NodeKind kind = NodeKind::Cell;
  std::size_t index = 0;  // cell id, grid row, or grid column
  std::string text;       // display payload; features come from the encoder
};

struct TabularGraph {
  std::string origin;  // table id
  std::vector<GraphNode> nodes;  // cells first, then ROW nodes, then COL nodes
  std::vector<std::pair<std::size_t, std::size_t>> edges;  // directed (src, dst)
  std::size_t n_cells = 0;
  std::size_t n_rows = 0;
  std::size_t n_cols = 0;
  std::size_t merged_cells = 0;  // cells with row_span > 1 or col_span > 1

  std::size_t node_count() const { return nodes.size(); }
  std::size_t row_node(std::size_t r) const { return n_cells + r; }
  std::size_t col_node(std::size_t c) const { return n_cells + n_rows + c; }
};

/// Cells whose occupancy rectangles share a horizontal or vertical boundary
/// segment of positive length with `cell_id` (4-neighborhood generalized to
/// spans). Never contains `cell_id` itself. Sorted ascending.
inline std::vector<std::size_t> adjacent_cells(const GridIndex& grid,
                                               std::size_t cell_id) {
  if (cell_id >= grid.rects.size()) {
    throw ConfigError(str_cat("adjacent_cells: cell id ", cell_id,
                              " out of range (", grid.rects.size(), " cells)"));
  }
  const CellRect& a = grid.rects[cell_id];
  std::vector<std::size_t> out;
  for (std::size_t b_id = 0; b_id < grid.rects.size(); ++b_id) {
    if (b_id == cell_id) continue;
    const CellRect& b = grid.rects[b_id];
    const bool rows_overlap = std::max(a.row, b.row) <
                              std::min(a.row_end(), b.row_end());
    const bool cols_overlap = std::max(a.col, b.col) <
                              std::min(a.col_end(), b.col_end());
    const bool share_vertical =
        (a.col_end() == b.col || b.col_end() == a.col) && rows_overlap;
    const bool share_horizontal =
        (a.row_end() == b.row || b.row_end() == a.row) && cols_overlap;
    if (share_vertical || share_horizontal) out.push_back(b_id);
  }
  return out;
}

/// Builds the tabular graph from a resolved grid. Node order: all cells in
/// id order, then ROW nodes by grid row, then COL nodes by grid column.
inline TabularGraph build_graph(const Table& table, const GridIndex& grid) {
  TabularGraph g;
  g.origin = table.id;
  g.n_cells = grid.cells.size();
  g.n_rows = grid.n_rows;
  g.n_cols = grid.n_cols;

  for (std::size_t i = 0; i < grid.cells.size(); ++i) {
    g.nodes.push_back({NodeKind::Cell, i, grid.cells[i].text});
    if (grid.cells[i].merged()) ++g.merged_cells;
  }
  // Global node text: constituent cell texts in grid order, each distinct
  // cell once, empties skipped. Display only.
  auto line_text = [&](bool is_row, std::size_t index) {
    std::vector<std::string> parts;
    std::set<std::size_t> seen;
    const std::size_t extent = is_row ? grid.n_cols : grid.n_rows;
    for (std::size_t k = 0; k < extent; ++k) {
      const std::size_t id = is_row ? grid.cell_at(index, k)
                                    : grid.cell_at(k, index);
      if (!seen.insert(id).second) continue;
      if (!grid.cells[id].text.empty()) parts.push_back(grid.cells[id].text);
    }
    return join(parts, " ");
  };
  for (std::size_t r = 0; r < grid.n_rows; ++r) {
    g.nodes.push_back({NodeKind::Row, r, line_text(true, r)});
  }
  for (std::size_t c = 0; c < grid.n_cols; ++c) {
    g.nodes.push_back({NodeKind::Col, c, line_text(false, c)});
  }

  for (std::size_t a = 0; a < grid.cells.size(); ++a) {
    for (std::size_t b : adjacent_cells(grid, a)) {
      g.edges.emplace_back(a, b);  // (b, a) added when the loop reaches b
    }
  }
  for (std::size_t a = 0; a < grid.cells.size(); ++a) {
    const CellRect& rect = grid.rects[a];
    for (std::size_t r = rect.row; r < rect.row_end(); ++r) {
      g.edges.emplace_back(a, g.row_node(r));
    }
  }
  for (std::size_t a = 0; a < grid.cells.size(); ++a) {
    const CellRect& rect = grid.rects[a];
    for (std::size_t c = rect.col; c < rect.col_end(); ++c) {
      g.edges.emplace_back(a, g.col_node(c));
    }
  }
  return g;
}

struct GraphStats {
  std::size_t cell_nodes = 0;
  std::size_t row_nodes = 0;
  std::size_t col_nodes = 0;
  std::size_t edge_count = 0;
  std::size_t merged_cells = 0;
};

inline GraphStats graph_stats(const TabularGraph& g) {
  GraphStats s;
  for (const GraphNode& n : g.nodes) {
    switch (n.kind) {
      case NodeKind::Cell: ++s.cell_nodes; break;
      case NodeKind::Row: ++s.row_nodes; break;
      case NodeKind::Col: ++s.col_nodes; break;
    }
  }
  s.edge_count = g.edges.size();
  s.merged_cells = g.merged_cells;
  return s;
}

// ---------------------------------------------------------------------------
// Graph dump format (consumed by the CLI `inspect` command)
// ---------------------------------------------------------------------------

/// Graph plus the cell rectangles needed to anchor attribution output back
/// to grid coordinates.
struct GraphDump {
  TabularGraph graph;
  std::vector<CellRect> cell_rects;  // aligned with cell ids
};

inline nlohmann::json graph_to_json(const TabularGraph& g,
                                    const GridIndex& grid) {
  nlohmann::json jnodes = nlohmann::json::array();
  for (const GraphNode& n : g.nodes) {
    nlohmann::json jn{{"kind", node_kind_name(n.kind)},
                      {"index", n.index},
                      {"text", n.text}};
    if (n.kind == NodeKind::Cell) {
      const CellRect& r = grid.rects[n.index];
      jn["row"] = r.row;
      jn["col"] = r.col;
      jn["row_span"] = r.row_span;
      jn["col_span"] = r.col_span;
    }
    jnodes.push_back(std::move(jn));
  }
  nlohmann::json jedges = nlohmann::json::array();
  for (const auto& [src, dst] : g.edges) {
    jedges.push_back({src, dst});
  }
  return {{"table_id", g.origin}, {"nodes", std::move(jnodes)},
          {"edges", std::move(jedges)}, {"n_cells", g.n_cells},
          {"n_rows", g.n_rows}, {"n_cols", g.n_cols},
          {"merged_cells", g.merged_cells}};
}

inline GraphDump graph_from_json(const nlohmann::json& j) {
  GraphDump dump;
  TabularGraph& g = dump.graph;
  g.origin = j.value("table_id", std::string());
  g.n_cells = j.at("n_cells").get<std::size_t>();
  g.n_rows = j.at("n_rows").get<std::size_t>();
  g.n_cols = j.at("n_cols").get<std::size_t>();
  g.merged_cells = j.value("merged_cells", std::size_t{0});
  for (const auto& jn : j.at("nodes")) {
    GraphNode n;
    const std::string kind = jn.at("kind").get<std::string>();
    if (kind == "cell") {
      n.kind = NodeKind::Cell;
    } else if (kind == "row") {
      n.kind = NodeKind::Row;
    } else if (kind == "col") {
      n.kind = NodeKind::Col;
    } else {
      throw DataError(str_cat("graph JSON: unknown node kind '", kind, "'"));
    }
    n.index = jn.at("index").get<std::size_t>();
    n.text = jn.value("text", std::string());
    if (n.kind == NodeKind::Cell) {
      dump.cell_rects.push_back({jn.value("row", std::size_t{0}),
                                 jn.value("col", std::size_t{0}),
                                 jn.value("row_span", std::size_t{1}),
                                 jn.value("col_span", std::size_t{1})});
    }
    g.nodes.push_back(std::move(n));
  }
  for (const auto& je : j.at("edges")) {
    g.edges.emplace_back(je.at(0).get<std::size_t>(),
                         je.at(1).get<std::size_t>());
  }
  return dump;
}

}  // namespace gtr
