#include "fan/assignment.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <sstream>

namespace fan {

std::array<double, 4> encode_box(const Box& anchor, const Box& gt) {
    const double wa = anchor.width(), ha = anchor.height();
    return {(gt.cx() - anchor.cx()) / wa, (gt.cy() - anchor.cy()) / ha,
            std::log(gt.width() / wa), std::log(gt.height() / ha)};
}

Box decode_box(const Box& anchor, const std::array<double, 4>& delta) {
    const double log_cap = std::log(1000.0);
    const double cx = anchor.cx() + delta[0] * anchor.width();
    const double cy = anchor.cy() + delta[1] * anchor.height();
    const double w = anchor.width() * std::exp(std::min(delta[2], log_cap));
    const double h = anchor.height() * std::exp(std::min(delta[3], log_cap));
    return Box(cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h);
}

AnchorAssignment assign(const AnchorGrid& grid, const std::vector<Box>& gt, double pos_thresh,
                        double bg_thresh) {
    if (!(0.0 <= bg_thresh && bg_thresh <= pos_thresh && pos_thresh <= 1.0))
        throw std::invalid_argument("assign: need 0 <= bg_thresh <= pos_thresh <= 1");

    const std::size_t n = grid.total_anchors();
    AnchorAssignment out;
    out.labels.assign(n, AnchorLabel::background);
    out.gt_index.assign(n, -1);
    out.delta.assign(n, {0, 0, 0, 0});
    out.per_level.resize(grid.levels.size());
    out.matched_gt_per_level.resize(grid.levels.size());

    std::size_t flat = 0;
    for (std::size_t li = 0; li < grid.levels.size(); ++li) {
        auto& counts = out.per_level[li];
        std::vector<int>& matched = out.matched_gt_per_level[li];
        for (const Box& a : grid.levels[li].anchors) {
            double best = 0.0;
            int best_gt = -1;
            for (std::size_t g = 0; g < gt.size(); ++g) {
                const double v = iou(a, gt[g]);
                if (v > best) {  // strict: ties keep the lowest gt index
                    best = v;
                    best_gt = int(g);
                }
            }
            if (best_gt >= 0 && best >= pos_thresh) {
                out.labels[flat] = AnchorLabel::positive;
                out.gt_index[flat] = best_gt;
                out.delta[flat] = encode_box(a, gt[best_gt]);
                counts.n_positive++;
                counts.n_classification++;
                matched.push_back(best_gt);
            } else if (best < bg_thresh) {
                out.labels[flat] = AnchorLabel::background;
                counts.n_classification++;
            } else {
                out.labels[flat] = AnchorLabel::ignore;
            }
            ++flat;
        }
        std::sort(matched.begin(), matched.end());
        matched.erase(std::unique(matched.begin(), matched.end()), matched.end());
    }
    return out;
}

double best_iou_over_grid(const AnchorGrid& grid, const Box& query) {
    // For a fixed anchor shape the IoU is separable and monotone in the
    // per-axis center offset, so only the cell nearest the query center can
    // achieve the per-shape maximum.
    double best = 0.0;
    const AnchorSpec& spec = grid.spec;
    for (std::size_t li = 0; li < grid.levels.size(); ++li) {
        const auto& lvl = grid.levels[li];
        const int stride = 1 << lvl.k;
        int col = int(std::floor(query.cx() / stride - 0.5 + 0.5));
        int row = int(std::floor(query.cy() / stride - 0.5 + 0.5));
        col = std::clamp(col, 0, lvl.width - 1);
        row = std::clamp(row, 0, lvl.height - 1);
        const double cx = (col + 0.5) * stride, cy = (row + 0.5) * stride;
        for (double scale : spec.scale_multipliers) {
            const double side = spec.base_sides[li] * scale;
            for (double ratio : spec.aspect_ratios) {
                const double w = side / std::sqrt(ratio);
                const double h = side * std::sqrt(ratio);
                best = std::max(
                    best, iou(Box(cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h), query));
            }
        }
    }
    return best;
}

namespace {
double next_uniform(std::mt19937_64& rng) { return double(rng() >> 11) * 0x1.0p-53; }
}  // namespace

std::vector<CoverageRow> coverage_report(const AnchorSpec& spec, const std::vector<double>& sides,
                                         int placements, std::uint64_t rng_seed, int image_size) {
    if (placements < 1) throw std::invalid_argument("coverage_report: placements must be >= 1");
    for (double s : sides)
        if (!(s > 0.0) || s > image_size)
            throw std::invalid_argument("coverage_report: side must be in (0, image_size]");

    const AnchorGrid grid = generate_anchors(image_size, image_size, spec);
    std::vector<CoverageRow> rows;
    for (std::size_t si = 0; si < sides.size(); ++si) {
        const double side = sides[si];
        std::mt19937_64 rng(rng_seed + 0x9e3779b97f4a7c15ull * (si + 1));
        double sum = 0.0, lo = 1.0;
        int ge5 = 0, ge6 = 0;
        for (int p = 0; p < placements; ++p) {
            const double cx = 0.5 * side + next_uniform(rng) * (image_size - side);
            const double cy = 0.5 * side + next_uniform(rng) * (image_size - side);
            const double v = best_iou_over_grid(
                grid, Box(cx - 0.5 * side, cy - 0.5 * side, cx + 0.5 * side, cy + 0.5 * side));
            sum += v;
            lo = std::min(lo, v);
            if (v >= 0.5) ++ge5;
            if (v >= 0.6) ++ge6;
        }
        rows.push_back({side, sum / placements, lo, double(ge5) / placements,
                        double(ge6) / placements});
    }
    return rows;
}

std::string coverage_csv(const std::vector<CoverageRow>& rows) {
    std::ostringstream os;
    os.precision(9);
    os << "side,mean_best_iou,min_best_iou,frac_ge_0.5,frac_ge_0.6\n";
    for (const auto& r : rows)
        os << r.side << ',' << r.mean_best_iou << ',' << r.min_best_iou << ',' << r.frac_ge_05
           << ',' << r.frac_ge_06 << '\n';
    return os.str();
}

}  // namespace fan
