#include "fan/geometry.hpp"

#include <algorithm>
#include <numeric>

namespace fan {

double iou(const Box& a, const Box& b) {
    const double ix = std::min(a.x_max, b.x_max) - std::max(a.x_min, b.x_min);
    const double iy = std::min(a.y_max, b.y_max) - std::max(a.y_min, b.y_min);
    if (ix <= 0.0 || iy <= 0.0) return 0.0;
    const double inter = ix * iy;
    return inter / (a.area() + b.area() - inter);
}

int AnchorSpec::max_stride() const {
    int m = 0;
    for (int k : levels) m = std::max(m, 1 << k);
    return m;
}

void AnchorSpec::validate() const {
    if (levels.empty()) throw std::invalid_argument("AnchorSpec: no pyramid levels");
    if (base_sides.size() != levels.size())
        throw std::invalid_argument("AnchorSpec: base_sides must match levels");
    if (scale_multipliers.empty() || aspect_ratios.empty())
        throw std::invalid_argument("AnchorSpec: empty scales or ratios");
    for (double s : base_sides)
        if (!(s > 0.0)) throw std::invalid_argument("AnchorSpec: base side must be positive");
    for (double s : scale_multipliers)
        if (!(s > 0.0)) throw std::invalid_argument("AnchorSpec: scale must be positive");
    for (double r : aspect_ratios)
        if (!(r > 0.0)) throw std::invalid_argument("AnchorSpec: ratio must be positive");
    for (std::size_t i = 1; i < levels.size(); ++i)
        if (levels[i] <= levels[i - 1])
            throw std::invalid_argument("AnchorSpec: levels must be strictly increasing");
}

AnchorSpec AnchorSpec::preset(const std::string& name) {
    AnchorSpec s;
    const double c3 = std::cbrt(2.0);  // scale step 2^(1/3)
    if (name == "fan") {
        s.levels = {3, 4, 5, 6, 7};
        for (int k : s.levels) s.base_sides.push_back(double(1 << (k + 1)));  // 16..256
        s.scale_multipliers = {1.0, c3, c3 * c3};
        s.aspect_ratios = {1.0, 1.5};
    } else if (name == "retinanet") {
        s.levels = {3, 4, 5, 6, 7};
        for (int k : s.levels) s.base_sides.push_back(double(1 << (k + 2)));  // 32..512
        s.scale_multipliers = {1.0, c3, c3 * c3};
        s.aspect_ratios = {0.5, 1.0, 2.0};
    } else if (name == "dense") {
        // 4 consecutive rungs of the 2^(1/3) ladder per level, starting at
        // side 8 on level 3 and spanning up to ~645 on level 7.
        s.levels = {3, 4, 5, 6, 7};
        for (std::size_t i = 0; i < s.levels.size(); ++i)
            s.base_sides.push_back(8.0 * std::pow(2.0, 4.0 * double(i) / 3.0));
        s.scale_multipliers = {1.0, c3, c3 * c3, 2.0};
        s.aspect_ratios = {1.0, 1.5};
    } else {
        throw std::invalid_argument("unknown anchor preset: " + name);
    }
    return s;
}

std::size_t AnchorGrid::total_anchors() const {
    std::size_t n = 0;
    for (const auto& l : levels) n += l.anchors.size();
    return n;
}

std::size_t AnchorGrid::flat_index(std::size_t li, int row, int col, int a) const {
    const auto& l = levels.at(li);
    std::size_t base = 0;
    for (std::size_t i = 0; i < li; ++i) base += levels[i].anchors.size();
    const int A = spec.anchors_per_location();
    return base + (std::size_t(row) * l.width + col) * A + a;
}

const Box& AnchorGrid::anchor(std::size_t flat) const {
    for (const auto& l : levels) {
        if (flat < l.anchors.size()) return l.anchors[flat];
        flat -= l.anchors.size();
    }
    throw std::out_of_range("AnchorGrid::anchor: index out of range");
}

std::pair<std::size_t, std::size_t> AnchorGrid::locate(std::size_t flat) const {
    for (std::size_t li = 0; li < levels.size(); ++li) {
        if (flat < levels[li].anchors.size()) return {li, flat};
        flat -= levels[li].anchors.size();
    }
    throw std::out_of_range("AnchorGrid::locate: index out of range");
}

AnchorGrid generate_anchors(int image_w, int image_h, const AnchorSpec& spec) {
    spec.validate();
    const int ms = spec.max_stride();
    if (image_w <= 0 || image_h <= 0 || image_w % ms != 0 || image_h % ms != 0)
        throw std::invalid_argument("generate_anchors: image dims must be positive multiples of " +
                                    std::to_string(ms));

    AnchorGrid grid;
    grid.spec = spec;
    grid.image_w = image_w;
    grid.image_h = image_h;
    for (std::size_t li = 0; li < spec.levels.size(); ++li) {
        const int k = spec.levels[li];
        const int stride = 1 << k;
        AnchorGrid::Level lvl;
        lvl.k = k;
        lvl.width = image_w / stride;
        lvl.height = image_h / stride;
        lvl.anchors.reserve(std::size_t(lvl.width) * lvl.height * spec.anchors_per_location());
        for (int i = 0; i < lvl.height; ++i) {
            const double cy = (i + 0.5) * stride;
            for (int j = 0; j < lvl.width; ++j) {
                const double cx = (j + 0.5) * stride;
                for (double scale : spec.scale_multipliers) {
                    const double side = spec.base_sides[li] * scale;
                    for (double ratio : spec.aspect_ratios) {
                        // Area-preserving ratio: w*h == side^2 for every ratio.
                        const double w = side / std::sqrt(ratio);
                        const double h = side * std::sqrt(ratio);
                        lvl.anchors.emplace_back(cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w,
                                                 cy + 0.5 * h);
                    }
                }
            }
        }
        grid.levels.push_back(std::move(lvl));
    }
    return grid;
}

std::vector<int> nms(const std::vector<Box>& boxes, const std::vector<double>& scores,
                     double iou_threshold) {
    if (boxes.size() != scores.size())
        throw std::invalid_argument("nms: boxes and scores must have equal length");
    for (double s : scores)
        if (!std::isfinite(s)) throw std::invalid_argument("nms: scores must be finite");

    std::vector<int> order(boxes.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&](int a, int b) { return scores[a] > scores[b]; });

    std::vector<int> kept;
    std::vector<char> suppressed(boxes.size(), 0);
    for (std::size_t oi = 0; oi < order.size(); ++oi) {
        const int i = order[oi];
        if (suppressed[i]) continue;
        kept.push_back(i);
        for (std::size_t oj = oi + 1; oj < order.size(); ++oj) {
            const int j = order[oj];
            if (!suppressed[j] && iou(boxes[i], boxes[j]) > iou_threshold) suppressed[j] = 1;
        }
    }
    return kept;
}

}  // namespace fan
