#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace fan {

// Axis-aligned rectangle in image pixel coordinates (x right, y down).
// Construction enforces strictly positive area and finite coordinates.
struct Box {
    double x_min = 0.0;
    double y_min = 0.0;
    double x_max = 0.0;
    double y_max = 0.0;

    Box() = default;
    Box(double x0, double y0, double x1, double y1) : x_min(x0), y_min(y0), x_max(x1), y_max(y1) {
        if (!(std::isfinite(x0) && std::isfinite(y0) && std::isfinite(x1) && std::isfinite(y1)))
            throw std::invalid_argument("Box: coordinates must be finite");
        if (!(x1 > x0 && y1 > y0))
            throw std::invalid_argument("Box: requires x_max > x_min and y_max > y_min");
    }

    double width() const { return x_max - x_min; }
    double height() const { return y_max - y_min; }
    double area() const { return width() * height(); }
    double cx() const { return 0.5 * (x_min + x_max); }
    double cy() const { return 0.5 * (y_min + y_max); }

    bool operator==(const Box& o) const = default;
};

// Intersection-over-union; 0 for disjoint boxes, 1 for identical.
double iou(const Box& a, const Box& b);

// Declarative anchor design: which pyramid levels exist, the base anchor
// side per level, and the scale/ratio fan-out per grid cell.
struct AnchorSpec {
    std::vector<int> levels;             // pyramid indices k; stride at level k is 2^k
    std::vector<double> base_sides;      // one per level
    std::vector<double> scale_multipliers;
    std::vector<double> aspect_ratios;   // h/w; area is preserved across ratios

    int anchors_per_location() const {
        return static_cast<int>(scale_multipliers.size() * aspect_ratios.size());
    }
    int stride(std::size_t level_index) const { return 1 << levels.at(level_index); }
    int max_stride() const;

    void validate() const;

    static AnchorSpec preset(const std::string& name);  // "fan", "retinanet", "dense"
};

// Anchors materialized over one image: per level, boxes laid out row-major
// over the H_k x W_k feature map with A anchors per cell.
struct AnchorGrid {
    AnchorSpec spec;
    int image_w = 0, image_h = 0;
    struct Level {
        int k = 0;       // pyramid index
        int width = 0;   // W_k
        int height = 0;  // H_k
        std::vector<Box> anchors;  // H_k * W_k * A, row-major, A per cell
    };
    std::vector<Level> levels;

    std::size_t total_anchors() const;
    // Flat index of anchor a at cell (row, col) of level li.
    std::size_t flat_index(std::size_t li, int row, int col, int a) const;
    const Box& anchor(std::size_t flat) const;
    // Level index and within-level offset for a flat anchor index.
    std::pair<std::size_t, std::size_t> locate(std::size_t flat) const;
};

AnchorGrid generate_anchors(int image_w, int image_h, const AnchorSpec& spec);

// Greedy NMS. Kept indices in descending score order; ties broken by lower index.
std::vector<int> nms(const std::vector<Box>& boxes, const std::vector<double>& scores,
                     double iou_threshold);

}  // namespace fan
