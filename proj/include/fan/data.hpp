#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "fan/geometry.hpp"
#include "fan/image.hpp"

namespace fan {

struct SceneAnnotation {
    std::string image_path;
    std::vector<Box> boxes;
    std::vector<double> occlusion;  // exact covered-area fraction per box
    int distractor_count = 0;
};

struct SceneParams {
    int width = 256, height = 256;
    int min_faces = 1, max_faces = 4;
    double min_side = 16.0, max_side = 192.0;  // log-uniform face side; must fit the scene
    double occluded_fraction_target = 0.3;     // probability a face gets an occluder
    double distractor_rate = 2.0;              // expected distractors per scene
    void validate() const;
};

// Deterministic synthetic scene: low-frequency noise background, structured
// glyph "faces" (filled square, two eye dots, mouth bar), rectangle occluders
// with exactly recorded coverage, and glyph-free skin-colored distractors.
std::pair<Image, SceneAnnotation> generate_scene(std::uint64_t seed, const SceneParams& params);

struct AugmentConfig {
    double crop_min = 0.3, crop_max = 1.0;  // fraction of the short edge
    double flip_prob = 0.5;
    double brightness = 0.1;  // additive jitter, fraction of full range
    double contrast = 0.1;    // multiplicative jitter around 1
    int target_train_size = 256;
    void validate() const;
};

struct Sample {
    Image image;
    std::vector<Box> boxes;
    std::vector<double> occlusion;
};

// Square patch, side uniform in [crop_min, crop_max] * short_edge. Boxes whose
// centers fall inside the patch are clipped and kept; the patch is then
// resized to target_train_size.
Sample random_crop(const Sample& in, const AugmentConfig& cfg, std::mt19937_64& rng);

Sample flip_and_jitter(const Sample& in, const AugmentConfig& cfg, std::mt19937_64& rng);

// --- dataset on disk ---------------------------------------------------
// <dir>/images/NNNNNN.png, <dir>/annotations.jsonl, <dir>/stats.csv

void write_dataset(const std::string& dir, int count, std::uint64_t base_seed,
                   const SceneParams& params);
std::vector<SceneAnnotation> load_annotations(const std::string& dir);
Image load_scene_image(const std::string& dir, const SceneAnnotation& ann);

std::string annotation_to_jsonl(const SceneAnnotation& ann);
SceneAnnotation annotation_from_jsonl(const std::string& line);

double uniform_real(std::mt19937_64& rng);  // [0,1), 53-bit

}  // namespace fan
