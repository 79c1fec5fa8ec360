#pragma once

// Independent reference implementations and statistical utilities shared by
// the test suites. These deliberately avoid reusing library internals so they
// can serve as oracles.

#include <algorithm>
#include <cmath>
#include <random>
#include <vector>

#include "fan/data.hpp"
#include "fan/geometry.hpp"
#include "fan/inference.hpp"

namespace testutil {

inline double urand(std::mt19937_64& rng) { return double(rng() >> 11) * 0x1.0p-53; }

inline fan::Box random_box(std::mt19937_64& rng, double span = 256.0, double min_size = 1.0,
                           double max_size = 128.0) {
    const double w = min_size + urand(rng) * (max_size - min_size);
    const double h = min_size + urand(rng) * (max_size - min_size);
    const double x0 = urand(rng) * (span - w);
    const double y0 = urand(rng) * (span - h);
    return {x0, y0, x0 + w, y0 + h};
}

// Exhaustive greedy NMS: repeatedly take the max-score remaining box (ties by
// lower index), discard everything overlapping it above the threshold.
inline std::vector<int> reference_nms(const std::vector<fan::Box>& boxes,
                                      const std::vector<double>& scores, double thr) {
    std::vector<char> alive(boxes.size(), 1);
    std::vector<int> kept;
    for (;;) {
        int best = -1;
        for (std::size_t i = 0; i < boxes.size(); ++i)
            if (alive[i] && (best < 0 || scores[i] > scores[std::size_t(best)])) best = int(i);
        if (best < 0) break;
        kept.push_back(best);
        alive[std::size_t(best)] = 0;
        for (std::size_t i = 0; i < boxes.size(); ++i)
            if (alive[i] && fan::iou(boxes[std::size_t(best)], boxes[i]) > thr) alive[i] = 0;
    }
    return kept;
}

// Per-anchor labels recomputed from scratch, no pruning or shared state.
enum class RefLabel { background, ignore, positive };
inline std::vector<RefLabel> reference_assign(const fan::AnchorGrid& grid,
                                              const std::vector<fan::Box>& gt, double pos_thresh,
                                              double bg_thresh, std::vector<int>* gt_out = nullptr) {
    std::vector<RefLabel> labels;
    if (gt_out) gt_out->clear();
    for (const auto& lvl : grid.levels)
        for (const fan::Box& a : lvl.anchors) {
            double best = 0.0;
            int bg = -1;
            for (std::size_t g = 0; g < gt.size(); ++g) {
                const double v = fan::iou(a, gt[g]);
                if (v > best) {
                    best = v;
                    bg = int(g);
                }
            }
            if (bg >= 0 && best >= pos_thresh)
                labels.push_back(RefLabel::positive);
            else if (best < bg_thresh)
                labels.push_back(RefLabel::background);
            else
                labels.push_back(RefLabel::ignore);
            if (gt_out) gt_out->push_back(labels.back() == RefLabel::positive ? bg : -1);
        }
    return labels;
}

// Best IoU over every anchor of the grid, exhaustively.
inline double reference_best_iou(const fan::AnchorGrid& grid, const fan::Box& q) {
    double best = 0.0;
    for (const auto& lvl : grid.levels)
        for (const fan::Box& a : lvl.anchors) best = std::max(best, fan::iou(a, q));
    return best;
}

// Independent greedy-matching all-points AP for a single gt subset.
// Detections must already carry their image index.
struct RefDet {
    int image;
    fan::Box box;
    double score;
};
inline double reference_ap(std::vector<RefDet> dets,
                           const std::vector<fan::SceneAnnotation>& anns,
                           const std::vector<std::vector<char>>& subset_mask, double match_iou) {
    std::stable_sort(dets.begin(), dets.end(), [](const RefDet& a, const RefDet& b) {
        if (a.score != b.score) return a.score > b.score;
        return std::tie(a.box.x_min, a.box.y_min, a.box.x_max, a.box.y_max) <
               std::tie(b.box.x_min, b.box.y_min, b.box.x_max, b.box.y_max);
    });
    std::vector<std::vector<char>> taken;
    int n_gt = 0;
    for (std::size_t i = 0; i < anns.size(); ++i) {
        taken.emplace_back(anns[i].boxes.size(), 0);
        for (char m : subset_mask[i]) n_gt += m ? 1 : 0;
    }
    if (n_gt == 0) return 0.0;
    int tp = 0, fp = 0;
    std::vector<std::pair<double, double>> curve;  // recall, precision
    for (const auto& d : dets) {
        const auto& boxes = anns[std::size_t(d.image)].boxes;
        double best = -1.0;
        int bg = -1;
        for (std::size_t g = 0; g < boxes.size(); ++g) {
            if (taken[std::size_t(d.image)][g]) continue;
            const double v = fan::iou(d.box, boxes[g]);
            if (v > best) {
                best = v;
                bg = int(g);
            }
        }
        if (bg >= 0 && best >= match_iou) {
            taken[std::size_t(d.image)][std::size_t(bg)] = 1;
            if (!subset_mask[std::size_t(d.image)][std::size_t(bg)]) continue;
            ++tp;
        } else {
            ++fp;
        }
        curve.emplace_back(double(tp) / n_gt, double(tp) / (tp + fp));
    }
    double ap = 0.0, prev_r = 0.0;
    for (std::size_t i = 0; i < curve.size(); ++i) {
        double env = 0.0;
        for (std::size_t j = i; j < curve.size(); ++j) env = std::max(env, curve[j].second);
        ap += (curve[i].first - prev_r) * env;
        prev_r = curve[i].first;
    }
    return ap;
}

// Two-sided Kolmogorov-Smirnov p-value against U[0,1].
inline double ks_uniform_pvalue(std::vector<double> xs) {
    std::sort(xs.begin(), xs.end());
    const double n = double(xs.size());
    double d = 0.0;
    for (std::size_t i = 0; i < xs.size(); ++i) {
        d = std::max(d, std::abs(double(i + 1) / n - xs[i]));
        d = std::max(d, std::abs(xs[i] - double(i) / n));
    }
    const double lambda = (std::sqrt(n) + 0.12 + 0.11 / std::sqrt(n)) * d;
    double p = 0.0;
    for (int k = 1; k <= 100; ++k)
        p += 2.0 * (k % 2 == 1 ? 1.0 : -1.0) * std::exp(-2.0 * k * k * lambda * lambda);
    return std::clamp(p, 0.0, 1.0);
}

}  // namespace testutil
