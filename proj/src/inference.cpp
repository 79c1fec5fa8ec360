#include "fan/inference.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <stdexcept>

namespace fan {

std::vector<Detection> decode_predictions(const PyramidOutput& output, const AnchorGrid& grid,
                                          const DecodeConfig& cfg) {
    if (output.levels.size() != grid.levels.size())
        throw std::invalid_argument("decode_predictions: output/grid level mismatch");

    std::vector<Box> boxes;
    std::vector<double> scores;
    const int A = grid.spec.anchors_per_location();
    for (std::size_t li = 0; li < output.levels.size(); ++li) {
        const auto& lvl = grid.levels[li];
        const auto& cls = output.levels[li].cls_logits.values();
        const auto& reg = output.levels[li].reg_deltas.values();
        const std::size_t plane = std::size_t(lvl.height) * lvl.width;
        if (cls.size() != std::size_t(A) * plane || reg.size() != std::size_t(4 * A) * plane)
            throw std::invalid_argument("decode_predictions: prediction shape mismatch");

        // candidates above threshold, then per-level top-k
        std::vector<std::pair<double, std::size_t>> cand;  // score, tensor index
        for (std::size_t i = 0; i < cls.size(); ++i) {
            const double s = 1.0 / (1.0 + std::exp(-cls[i]));
            if (s > cfg.score_thresh) cand.emplace_back(s, i);
        }
        if (int(cand.size()) > cfg.pre_nms_topk) {
            std::partial_sort(cand.begin(), cand.begin() + cfg.pre_nms_topk, cand.end(),
                              [](const auto& a, const auto& b) {
                                  return a.first != b.first ? a.first > b.first
                                                            : a.second < b.second;
                              });
            cand.resize(std::size_t(cfg.pre_nms_topk));
        }
        for (const auto& [s, idx] : cand) {
            const int a = int(idx / plane);
            const std::size_t cell = idx % plane;
            const int y = int(cell / lvl.width), x = int(cell % lvl.width);
            const Box& anchor = grid.levels[li].anchors[(std::size_t(y) * lvl.width + x) * A + a];
            std::array<double, 4> delta;
            for (int j = 0; j < 4; ++j) delta[j] = reg[std::size_t(a * 4 + j) * plane + cell];
            Box b = decode_box(anchor, delta);
            const double x0 = std::clamp(b.x_min, 0.0, double(grid.image_w));
            const double y0 = std::clamp(b.y_min, 0.0, double(grid.image_h));
            const double x1 = std::clamp(b.x_max, 0.0, double(grid.image_w));
            const double y1 = std::clamp(b.y_max, 0.0, double(grid.image_h));
            if (x1 <= x0 || y1 <= y0) continue;  // fully outside after clipping
            boxes.emplace_back(x0, y0, x1, y1);
            scores.push_back(s);
        }
    }

    std::vector<Detection> out;
    for (int i : nms(boxes, scores, cfg.nms_iou)) {
        out.push_back({boxes[std::size_t(i)], scores[std::size_t(i)]});
        if (int(out.size()) >= cfg.max_det) break;
    }
    return out;
}

std::vector<Detection> detect(const FanModel& model, const Image& image,
                              const DecodeConfig& cfg) {
    const int stride = 1 << model.config().pyramid_levels.back();
    const Image padded = pad_to_multiple(image, stride);
    NoGradGuard ng;
    const PyramidOutput out = model.forward(image_to_tensor(padded));
    const AnchorSpec spec = AnchorSpec::preset(model.config().anchor_preset);
    const AnchorGrid grid = generate_anchors(padded.width, padded.height, spec);
    std::vector<Detection> dets = decode_predictions(out, grid, cfg);
    // Drop padding region, clip to the true image bounds.
    std::vector<Detection> kept;
    for (const auto& d : dets) {
        const double x1 = std::min(d.box.x_max, double(image.width));
        const double y1 = std::min(d.box.y_max, double(image.height));
        if (x1 <= d.box.x_min || y1 <= d.box.y_min) continue;
        kept.push_back({Box(d.box.x_min, d.box.y_min, x1, y1), d.score});
    }
    return kept;
}

std::vector<Detection> multi_scale_detect(const FanModel& model, const Image& image,
                                          const std::vector<int>& scales, double merge_nms_iou,
                                          const DecodeConfig& cfg) {
    if (scales.empty()) throw std::invalid_argument("multi_scale_detect: no scales");
    for (int s : scales)
        if (s <= 0) throw std::invalid_argument("multi_scale_detect: scales must be positive");

    std::vector<Box> boxes;
    std::vector<double> scores;
    for (int s : scales) {
        const int short_edge = std::min(image.width, image.height);
        const double f = double(s) / short_edge;
        const int nw = std::max(1, int(std::lround(image.width * f)));
        const int nh = std::max(1, int(std::lround(image.height * f)));
        const Image resized = resize_bilinear(image, nw, nh);
        const double fx = double(nw) / image.width, fy = double(nh) / image.height;
        for (const auto& d : detect(model, resized, cfg)) {
            const double x0 = std::clamp(d.box.x_min / fx, 0.0, double(image.width));
            const double y0 = std::clamp(d.box.y_min / fy, 0.0, double(image.height));
            const double x1 = std::clamp(d.box.x_max / fx, 0.0, double(image.width));
            const double y1 = std::clamp(d.box.y_max / fy, 0.0, double(image.height));
            if (x1 <= x0 || y1 <= y0) continue;
            boxes.emplace_back(x0, y0, x1, y1);
            scores.push_back(d.score);
        }
    }
    std::vector<Detection> out;
    for (int i : nms(boxes, scores, merge_nms_iou)) {
        out.push_back({boxes[std::size_t(i)], scores[std::size_t(i)]});
        if (int(out.size()) >= cfg.max_det) break;
    }
    return out;
}

// --- evaluation --------------------------------------------------------------

namespace {

struct FlatDet {
    int image = 0;
    Box box;
    double score = 0.0;
    int matched_gt = -1;  // global gt index, -1 if unmatched
};

bool box_less(const Box& a, const Box& b) {
    return std::tie(a.x_min, a.y_min, a.x_max, a.y_max) <
           std::tie(b.x_min, b.y_min, b.x_max, b.y_max);
}

double ap_from_matches(const std::vector<FlatDet>& dets, const std::vector<char>& in_subset,
                       int n_gt, SubsetReport& out) {
    int tp = 0, fp = 0;
    std::vector<PRPoint> curve;
    for (const auto& d : dets) {
        if (d.matched_gt >= 0) {
            if (!in_subset[std::size_t(d.matched_gt)]) continue;  // credited elsewhere
            ++tp;
        } else {
            ++fp;
        }
        if (n_gt > 0)
            curve.push_back({double(tp) / n_gt, double(tp) / (tp + fp)});
    }
    out.n_det = tp + fp;
    out.curve = curve;
    if (n_gt == 0 || curve.empty()) return 0.0;
    // monotone precision envelope, all-points area
    std::vector<double> env(curve.size());
    double best = 0.0;
    for (std::size_t i = curve.size(); i-- > 0;) {
        best = std::max(best, curve[i].precision);
        env[i] = best;
    }
    double ap = 0.0, prev_r = 0.0;
    for (std::size_t i = 0; i < curve.size(); ++i) {
        ap += (curve[i].recall - prev_r) * env[i];
        prev_r = curve[i].recall;
    }
    return ap;
}

}  // namespace

const SubsetReport& EvalReport::subset(const std::string& name) const {
    for (const auto& s : subsets)
        if (s.name == name) return s;
    throw std::out_of_range("EvalReport: no subset " + name);
}

EvalReport evaluate(const std::vector<std::vector<Detection>>& detections_per_image,
                    const std::vector<SceneAnnotation>& annotations, double match_iou,
                    double occluded_thresh) {
    if (detections_per_image.size() != annotations.size())
        throw std::invalid_argument("evaluate: detections/annotations image count mismatch");

    // Flatten gt with global indices.
    std::vector<std::pair<int, int>> gt_ref;  // image, local index
    std::vector<int> gt_base(annotations.size() + 1, 0);
    for (std::size_t i = 0; i < annotations.size(); ++i) {
        gt_base[i + 1] = gt_base[i] + int(annotations[i].boxes.size());
        for (std::size_t g = 0; g < annotations[i].boxes.size(); ++g)
            gt_ref.emplace_back(int(i), int(g));
    }

    std::vector<FlatDet> dets;
    for (std::size_t i = 0; i < detections_per_image.size(); ++i)
        for (const auto& d : detections_per_image[i]) dets.push_back({int(i), d.box, d.score, -1});
    std::stable_sort(dets.begin(), dets.end(), [](const FlatDet& a, const FlatDet& b) {
        if (a.score != b.score) return a.score > b.score;
        return box_less(a.box, b.box);
    });

    std::vector<char> gt_taken(gt_ref.size(), 0);
    for (auto& d : dets) {
        const auto& ann = annotations[std::size_t(d.image)];
        double best = -1.0;
        int best_g = -1;
        for (std::size_t g = 0; g < ann.boxes.size(); ++g) {
            const int global = gt_base[std::size_t(d.image)] + int(g);
            if (gt_taken[std::size_t(global)]) continue;
            const double v = iou(d.box, ann.boxes[g]);
            if (v > best) {  // ties keep the lowest gt index
                best = v;
                best_g = global;
            }
        }
        if (best_g >= 0 && best >= match_iou) {
            d.matched_gt = best_g;
            gt_taken[std::size_t(best_g)] = 1;
        }
    }

    auto side_bucket = [](const Box& b) {
        const double s = std::sqrt(b.area());
        return s < 32 ? 0 : s < 64 ? 1 : s < 128 ? 2 : s < 256 ? 3 : 4;
    };
    const char* bucket_names[] = {"size_0_32", "size_32_64", "size_64_128", "size_128_256",
                                  "size_256_inf"};

    EvalReport report;
    auto add_subset = [&](const std::string& name, auto pred) {
        std::vector<char> in_subset(gt_ref.size(), 0);
        int n_gt = 0;
        for (std::size_t gi = 0; gi < gt_ref.size(); ++gi) {
            const auto& ann = annotations[std::size_t(gt_ref[gi].first)];
            const Box& b = ann.boxes[std::size_t(gt_ref[gi].second)];
            const double occ = ann.occlusion[std::size_t(gt_ref[gi].second)];
            if (pred(b, occ)) {
                in_subset[gi] = 1;
                ++n_gt;
            }
        }
        SubsetReport sr;
        sr.name = name;
        sr.n_gt = n_gt;
        sr.ap = ap_from_matches(dets, in_subset, n_gt, sr);
        report.subsets.push_back(std::move(sr));
    };

    add_subset("all", [](const Box&, double) { return true; });
    add_subset("occluded", [&](const Box&, double occ) { return occ >= occluded_thresh; });
    add_subset("unoccluded", [&](const Box&, double occ) { return occ < occluded_thresh; });
    for (int bucket = 0; bucket < 5; ++bucket)
        add_subset(bucket_names[bucket],
                   [&, bucket](const Box& b, double) { return side_bucket(b) == bucket; });
    return report;
}

std::string eval_report_csv(const EvalReport& report) {
    std::ostringstream os;
    os.precision(9);
    os << "subset,AP,n_gt,n_det\n";
    for (const auto& s : report.subsets)
        os << s.name << ',' << s.ap << ',' << s.n_gt << ',' << s.n_det << '\n';
    return os.str();
}

std::string pr_curve_csv(const SubsetReport& subset) {
    std::ostringstream os;
    os.precision(9);
    os << "recall,precision\n";
    for (const auto& p : subset.curve) os << p.recall << ',' << p.precision << '\n';
    return os.str();
}

}  // namespace fan
