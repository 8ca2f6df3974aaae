// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <span>
#include <string>
#include <vector>

#include "eval.hpp"

namespace sg {

// Self-contained SVG renderers; deterministic output, no external renderer.
struct Series {
    std::string label;
    std::vector<double> x;
    std::vector<double> y;
};

void write_line_chart_svg(const std::string &path, const std::string &title,
                          const std::string &x_label, const std::string &y_label,
                          std::span<const Series> series);

// rows x cols heat map (row 0 drawn at the bottom); optionally each column is
// scaled to its own maximum.
void write_heatmap_svg(const std::string &path, const std::string &title,
                       const std::string &x_label, const std::string &y_label,
                       const std::vector<std::vector<double>> &cells,
                       std::span<const std::string> col_labels,
                       std::span<const std::string> row_labels, bool normalize_columns);

// Report files: JSON with per-checkpoint records and the companion CSV with
// columns step, match_sps, mismatch_sps, G, R2.
void write_grounding_report_json(const std::string &path, const GroundingReport &report);
void write_grounding_report_csv(const std::string &path, const GroundingReport &report);
GroundingReport load_grounding_report_json(const std::string &path);

}  // namespace sg
