#pragma once

// Shared hand-built fixtures.

namespace fixtures {

// Taxing-wages style table: 11 cells, 4 of them merged.
// Occupancy (4 columns):
//   row 0: [ 0  0  0  1]   title colspan 3, note
//   row 1: [ 2  3  3  4]   country rowspan 2, 2019 colspan 2, 2020 rowspan 2
//   row 2: [ 2  5  6  4]   rate, wedge
//   row 3: [ 7  8  9 10]   united states, 24.8, 28.3, 24.4
inline const char* kTaxingWagesJson = R"({
  "id": "taxing",
  "rows": [
    [{"text": "Taxing wages", "col_span": 3, "is_header": true},
     {"text": "Note", "is_header": true}],
    [{"text": "Country", "row_span": 2, "is_header": true},
     {"text": "2019", "col_span": 2, "is_header": true},
     {"text": "2020", "row_span": 2, "is_header": true}],
    [{"text": "Rate", "is_header": true}, {"text": "Wedge", "is_header": true}],
    [{"text": "United States"}, {"text": "24.8"}, {"text": "28.3"},
     {"text": "24.4"}]
  ],
  "context": {"caption": "Taxing wages in the United States",
              "page_title": "Tax", "section_title": ""}
})";

// Plain 2x2 table "a b / c d".
inline const char* kPlain2x2Json =
    R"({"id":"p22","rows":[[{"text":"a"},{"text":"b"}],)"
    R"([{"text":"c"},{"text":"d"}]],)"
    R"("context":{"caption":"","page_title":"","section_title":""}})";

// Single-cell table.
inline const char* kSingleCellJson =
    R"({"id":"one","rows":[[{"text":"solo"}]],)"
    R"("context":{"caption":"","page_title":"","section_title":""}})";

}  // namespace fixtures
