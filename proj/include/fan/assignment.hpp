#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <vector>

#include "fan/geometry.hpp"

namespace fan {

enum class AnchorLabel : std::uint8_t { background, ignore, positive };

// Per-anchor assignment labels plus encoded regression targets and the
// per-level normalizer counts used by the loss.
struct AnchorAssignment {
    std::vector<AnchorLabel> labels;           // one per anchor, grid order
    std::vector<int> gt_index;                 // valid where label == positive, else -1
    std::vector<std::array<double, 4>> delta;  // valid where label == positive
    struct LevelCounts {
        int n_classification = 0;  // anchors participating in the classification loss
        int n_positive = 0;        // positively assigned anchors
    };
    std::vector<LevelCounts> per_level;
    std::vector<std::vector<int>> matched_gt_per_level;  // sorted unique gt indices
};

// (dx, dy, dw, dh) center/log-size deltas of gt relative to anchor.
std::array<double, 4> encode_box(const Box& anchor, const Box& gt);

// Inverse of encode_box; dw/dh clamped to ln(1000) before exponentiation.
Box decode_box(const Box& anchor, const std::array<double, 4>& delta);

// IoU-threshold assignment: max IoU >= pos_thresh -> positive (argmax gt,
// ties to the lowest index), max IoU < bg_thresh -> background, else ignore.
// The positive comparison is closed at the threshold.
AnchorAssignment assign(const AnchorGrid& grid, const std::vector<Box>& gt,
                        double pos_thresh = 0.5, double bg_thresh = 0.4);

// Best IoU achieved by any anchor of the grid against `query`. The search is
// pruned to cells near the query center; exhaustive over scales and ratios.
double best_iou_over_grid(const AnchorGrid& grid, const Box& query);

struct CoverageRow {
    double side = 0.0;
    double mean_best_iou = 0.0;
    double min_best_iou = 0.0;
    double frac_ge_05 = 0.0;
    double frac_ge_06 = 0.0;
};

// Monte-Carlo anchor-coverage statistics for square boxes of the given sides
// placed uniformly at random inside an image_size x image_size canvas.
std::vector<CoverageRow> coverage_report(const AnchorSpec& spec, const std::vector<double>& sides,
                                         int placements, std::uint64_t rng_seed,
                                         int image_size = 512);

std::string coverage_csv(const std::vector<CoverageRow>& rows);

}  // namespace fan
