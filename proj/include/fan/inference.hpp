#pragma once

#include <string>
#include <vector>

#include "fan/data.hpp"
#include "fan/geometry.hpp"
#include "fan/model.hpp"

namespace fan {

struct Detection {
    Box box;
    double score = 0.0;
};

struct DecodeConfig {
    double score_thresh = 0.05;
    int pre_nms_topk = 1000;  // per level
    double nms_iou = 0.5;
    int max_det = 100;
};

// Sigmoid scores, per-level thresholding and top-k, delta decoding, clipping
// to image bounds, cross-level NMS. Output in descending score order.
std::vector<Detection> decode_predictions(const PyramidOutput& output, const AnchorGrid& grid,
                                          const DecodeConfig& cfg = {});

// Single-scale detection on an image (padded to the pyramid stride).
std::vector<Detection> detect(const FanModel& model, const Image& image,
                              const DecodeConfig& cfg = {});

// Resize shortest side to each scale, detect, map back to original
// coordinates, and merge with a final NMS.
std::vector<Detection> multi_scale_detect(const FanModel& model, const Image& image,
                                          const std::vector<int>& scales,
                                          double merge_nms_iou = 0.5,
                                          const DecodeConfig& cfg = {});

struct PRPoint {
    double recall = 0.0, precision = 0.0;
};

struct SubsetReport {
    std::string name;
    double ap = 0.0;
    int n_gt = 0;
    int n_det = 0;  // detections counted for this subset (TP + FP)
    std::vector<PRPoint> curve;
};

struct EvalReport {
    std::vector<SubsetReport> subsets;
    const SubsetReport& subset(const std::string& name) const;
};

// Greedy score-ordered matching at match_iou; continuous (all-points) AP
// under the monotone precision envelope. Subsets partition the ground truth
// by occlusion and size; unmatched detections count as false positives in
// every subset.
EvalReport evaluate(const std::vector<std::vector<Detection>>& detections_per_image,
                    const std::vector<SceneAnnotation>& annotations, double match_iou = 0.5,
                    double occluded_thresh = 0.3);

std::string eval_report_csv(const EvalReport& report);
std::string pr_curve_csv(const SubsetReport& subset);

}  // namespace fan
