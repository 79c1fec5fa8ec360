#pragma once

#include <cstdint>
#include <utility>
#include <vector>

#include "fan/assignment.hpp"
#include "fan/attention.hpp"
#include "fan/geometry.hpp"
#include "fan/tensor.hpp"

namespace fan {

struct LossConfig {
    double focal_alpha = 0.25;
    double focal_gamma = 2.0;
    double smooth_l1_beta = 1.0;
    double lambda1 = 1.0;
    double lambda2 = 1.0;
    void validate() const;
};

struct LossReport {
    struct Level {
        int k = 0;
        double cls = 0.0, reg = 0.0, att = 0.0;
        int n_classification = 0, n_positive = 0;
    };
    double total = 0.0;
    std::vector<Level> per_level;
};

// Per-anchor labels in tensor layout [A,H,W]: 1 positive, 0 background,
// -1 ignored. Regression targets in tensor layout [4A,H,W], defined at
// positives only. Converts from the anchor grid's (cell, anchor) order.
struct LevelTargets {
    std::vector<std::int8_t> labels;
    std::vector<double> reg_targets;
};
LevelTargets level_targets(const AnchorAssignment& assignment, const AnchorGrid& grid,
                           std::size_t level_index);

// Focal loss over sigmoid scores, summed over non-ignored anchors and divided
// by n_classification. Numerically stable log-sigmoid evaluation.
Tensor focal_loss(const Tensor& logits, const std::vector<std::int8_t>& labels,
                  const LossConfig& cfg, int n_classification);

// Smooth L1 over the 4 delta coordinates of positive anchors, / n_positive.
Tensor smooth_l1(const Tensor& reg_deltas, const std::vector<double>& targets,
                 const std::vector<std::int8_t>& labels, double beta, int n_positive);

// Pixel-wise sigmoid cross-entropy against a binary mask, mean over pixels.
Tensor attention_loss(const Tensor& logits, const std::vector<std::uint8_t>& mask);

struct LevelPrediction {
    Tensor cls_logits;  // [A,H,W]
    Tensor reg_deltas;  // [4A,H,W]
    Tensor att_logits;  // [1,H,W]
};

// The three-term multi-task loss summed over pyramid levels with per-level
// normalizers. Returns the differentiable scalar and a per-level breakdown.
std::pair<Tensor, LossReport> total_loss(const std::vector<LevelPrediction>& preds,
                                         const AnchorGrid& grid,
                                         const AnchorAssignment& assignment,
                                         const AttentionTarget& att_targets,
                                         const LossConfig& cfg);

}  // namespace fan
