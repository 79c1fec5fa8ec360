#include "fan/data.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <stdexcept>

#include "json.hpp"

namespace fan {

double uniform_real(std::mt19937_64& rng) { return double(rng() >> 11) * 0x1.0p-53; }

namespace {

int uniform_int(std::mt19937_64& rng, int lo, int hi) {  // inclusive
    return lo + int(rng() % std::uint64_t(hi - lo + 1));
}

std::uint8_t clamp_u8(double v) { return std::uint8_t(std::clamp(v, 0.0, 255.0)); }

struct Rgb {
    double r, g, b;
};

Rgb skin_color(std::mt19937_64& rng) {
    return {190.0 + uniform_real(rng) * 50.0, 130.0 + uniform_real(rng) * 50.0,
            95.0 + uniform_real(rng) * 45.0};
}

void fill_noisy_rect(Image& img, int x0, int y0, int x1, int y1, Rgb c, double noise,
                     std::mt19937_64& rng) {
    x0 = std::max(x0, 0);
    y0 = std::max(y0, 0);
    x1 = std::min(x1, img.width);
    y1 = std::min(y1, img.height);
    for (int y = y0; y < y1; ++y)
        for (int x = x0; x < x1; ++x) {
            const double n = (uniform_real(rng) * 2.0 - 1.0) * noise;
            img.at(x, y, 0) = clamp_u8(c.r + n);
            img.at(x, y, 1) = clamp_u8(c.g + n);
            img.at(x, y, 2) = clamp_u8(c.b + n);
        }
}

void draw_face_glyph(Image& img, int x0, int y0, int side, std::mt19937_64& rng) {
    const Rgb skin = skin_color(rng);
    fill_noisy_rect(img, x0, y0, x0 + side, y0 + side, skin, 8.0, rng);
    const double dark = 30.0 + uniform_real(rng) * 30.0;
    const int eye = std::max(1, int(std::lround(0.14 * side)));
    auto dot = [&](double fx, double fy, int w, int h) {
        const int cx = x0 + int(std::lround(fx * side));
        const int cy = y0 + int(std::lround(fy * side));
        fill_noisy_rect(img, cx - w / 2, cy - h / 2, cx - w / 2 + w, cy - h / 2 + h,
                        {dark, dark, dark}, 5.0, rng);
    };
    dot(0.32, 0.36, eye, eye);
    dot(0.68, 0.36, eye, eye);
    dot(0.50, 0.73, std::max(2, int(std::lround(0.5 * side))),
        std::max(1, int(std::lround(0.10 * side))));
}

double overlap_frac(const Box& inner, const Box& outer) {  // |inner ∩ outer| / |inner|
    const double ix = std::min(inner.x_max, outer.x_max) - std::max(inner.x_min, outer.x_min);
    const double iy = std::min(inner.y_max, outer.y_max) - std::max(inner.y_min, outer.y_min);
    if (ix <= 0 || iy <= 0) return 0.0;
    return ix * iy / inner.area();
}

}  // namespace

void SceneParams::validate() const {
    if (width <= 0 || height <= 0) throw std::invalid_argument("SceneParams: bad dims");
    if (min_faces < 0 || max_faces < min_faces)
        throw std::invalid_argument("SceneParams: bad face count range");
    if (!(min_side >= 4.0 && max_side >= min_side))
        throw std::invalid_argument("SceneParams: bad side range");
    if (max_side > std::min(width, height))
        throw std::invalid_argument("SceneParams: max_side exceeds image dims");
    if (!(occluded_fraction_target >= 0.0 && occluded_fraction_target <= 1.0))
        throw std::invalid_argument("SceneParams: occluded_fraction_target in [0,1]");
    if (distractor_rate < 0.0) throw std::invalid_argument("SceneParams: distractor_rate >= 0");
}

std::pair<Image, SceneAnnotation> generate_scene(std::uint64_t seed, const SceneParams& params) {
    params.validate();
    std::mt19937_64 rng(seed);
    Image img(params.width, params.height);
    SceneAnnotation ann;

    // Low-frequency background: coarse random grid, bilinearly interpolated.
    // Cool tones, away from the skin color range used by faces/distractors.
    constexpr int G = 9;
    double grid[G][G][3];
    for (int gy = 0; gy < G; ++gy)
        for (int gx = 0; gx < G; ++gx) {
            grid[gy][gx][0] = 40.0 + uniform_real(rng) * 90.0;
            grid[gy][gx][1] = 50.0 + uniform_real(rng) * 110.0;
            grid[gy][gx][2] = 60.0 + uniform_real(rng) * 120.0;
        }
    for (int y = 0; y < params.height; ++y)
        for (int x = 0; x < params.width; ++x) {
            const double fx = double(x) / params.width * (G - 1);
            const double fy = double(y) / params.height * (G - 1);
            const int gx = std::min(int(fx), G - 2), gy = std::min(int(fy), G - 2);
            const double wx = fx - gx, wy = fy - gy;
            for (int c = 0; c < 3; ++c) {
                const double v = (1 - wy) * ((1 - wx) * grid[gy][gx][c] + wx * grid[gy][gx + 1][c]) +
                                 wy * ((1 - wx) * grid[gy + 1][gx][c] + wx * grid[gy + 1][gx + 1][c]);
                img.at(x, y, c) = clamp_u8(v);
            }
        }

    // Place faces with bounded retries; overlapping placements are rejected.
    const int want = uniform_int(rng, params.min_faces, params.max_faces);
    std::vector<std::array<int, 3>> face_geom;  // x0, y0, side
    const double log_lo = std::log(params.min_side), log_hi = std::log(params.max_side);
    for (int f = 0; f < want; ++f) {
        for (int attempt = 0; attempt < 100; ++attempt) {
            const int side =
                std::max(int(params.min_side),
                         int(std::lround(std::exp(log_lo + uniform_real(rng) * (log_hi - log_lo)))));
            if (side > std::min(params.width, params.height)) continue;
            const int x0 = uniform_int(rng, 0, params.width - side);
            const int y0 = uniform_int(rng, 0, params.height - side);
            const Box cand(x0, y0, x0 + side, y0 + side);
            bool clash = false;
            for (const Box& b : ann.boxes)
                if (iou(cand, b) > 0.02 || overlap_frac(b, cand) > 0.2 ||
                    overlap_frac(cand, b) > 0.2)
                    clash = true;
            if (clash) continue;
            ann.boxes.push_back(cand);
            face_geom.push_back({x0, y0, side});
            break;
        }
    }
    ann.occlusion.assign(ann.boxes.size(), 0.0);

    // Distractors: skin-colored textured patches without the glyph structure.
    int n_distract = int(params.distractor_rate);
    if (uniform_real(rng) < params.distractor_rate - n_distract) ++n_distract;
    for (int d = 0; d < n_distract; ++d) {
        for (int attempt = 0; attempt < 100; ++attempt) {
            const int w = uniform_int(rng, 12, std::min(96, params.width));
            const int h = uniform_int(rng, 12, std::min(96, params.height));
            const int x0 = uniform_int(rng, 0, params.width - w);
            const int y0 = uniform_int(rng, 0, params.height - h);
            const Box cand(x0, y0, x0 + w, y0 + h);
            bool clash = false;
            for (const Box& b : ann.boxes)
                if (overlap_frac(b, cand) > 0.05 || overlap_frac(cand, b) > 0.05) clash = true;
            if (clash) continue;
            fill_noisy_rect(img, x0, y0, x0 + w, y0 + h, skin_color(rng), 20.0, rng);
            ann.distractor_count++;
            break;
        }
    }

    for (const auto& [x0, y0, side] : face_geom) draw_face_glyph(img, x0, y0, side, rng);

    // Occluders: a strip over one side of the face; the recorded fraction is
    // the exact rasterized coverage.
    for (std::size_t f = 0; f < ann.boxes.size(); ++f) {
        if (uniform_real(rng) >= params.occluded_fraction_target) continue;
        const auto& [x0, y0, side] = face_geom[f];
        const double frac = 0.25 + uniform_real(rng) * 0.35;
        const int edge = uniform_int(rng, 0, 3);  // left/right/top/bottom
        int ox0 = x0, oy0 = y0, ox1 = x0 + side, oy1 = y0 + side;
        const int depth = std::max(1, int(std::lround(frac * side)));
        if (edge == 0) ox1 = x0 + depth;
        else if (edge == 1) ox0 = x0 + side - depth;
        else if (edge == 2) oy1 = y0 + depth;
        else oy0 = y0 + side - depth;
        const Rgb col = uniform_real(rng) < 0.5
                            ? skin_color(rng)
                            : Rgb{40.0 + uniform_real(rng) * 180.0,
                                  40.0 + uniform_real(rng) * 180.0,
                                  40.0 + uniform_real(rng) * 180.0};
        fill_noisy_rect(img, ox0, oy0, ox1, oy1, col, 15.0, rng);
        ann.occlusion[f] = overlap_frac(ann.boxes[f], Box(ox0, oy0, ox1, oy1));
    }

    return {std::move(img), std::move(ann)};
}

void AugmentConfig::validate() const {
    if (!(crop_min > 0.0 && crop_min <= crop_max && crop_max <= 1.0))
        throw std::invalid_argument("AugmentConfig: need 0 < crop_min <= crop_max <= 1");
    if (!(flip_prob >= 0.0 && flip_prob <= 1.0))
        throw std::invalid_argument("AugmentConfig: flip_prob in [0,1]");
    if (brightness < 0.0 || contrast < 0.0)
        throw std::invalid_argument("AugmentConfig: jitter ranges must be >= 0");
    if (target_train_size <= 0) throw std::invalid_argument("AugmentConfig: bad train size");
}

Sample random_crop(const Sample& in, const AugmentConfig& cfg, std::mt19937_64& rng) {
    cfg.validate();
    const int short_edge = std::min(in.image.width, in.image.height);
    if (short_edge < 1) throw std::invalid_argument("random_crop: empty image");
    const double ratio = cfg.crop_min + uniform_real(rng) * (cfg.crop_max - cfg.crop_min);
    const int side = std::max(1, int(std::lround(ratio * short_edge)));
    const int x0 = uniform_int(rng, 0, in.image.width - side);
    const int y0 = uniform_int(rng, 0, in.image.height - side);

    Sample out;
    out.image = Image(side, side);
    for (int y = 0; y < side; ++y)
        std::copy_n(in.image.pixels.data() + (std::size_t(y0 + y) * in.image.width + x0) * 3,
                    std::size_t(side) * 3,
                    out.image.pixels.data() + std::size_t(y) * side * 3);

    const double s = double(cfg.target_train_size) / side;
    for (std::size_t i = 0; i < in.boxes.size(); ++i) {
        const Box& b = in.boxes[i];
        if (!(b.cx() >= x0 && b.cx() < x0 + side && b.cy() >= y0 && b.cy() < y0 + side)) continue;
        const double cx0 = std::max(b.x_min - x0, 0.0), cy0 = std::max(b.y_min - y0, 0.0);
        const double cx1 = std::min(b.x_max - x0, double(side));
        const double cy1 = std::min(b.y_max - y0, double(side));
        out.boxes.emplace_back(cx0 * s, cy0 * s, cx1 * s, cy1 * s);
        out.occlusion.push_back(i < in.occlusion.size() ? in.occlusion[i] : 0.0);
    }
    out.image = resize_bilinear(out.image, cfg.target_train_size, cfg.target_train_size);
    return out;
}

Sample flip_and_jitter(const Sample& in, const AugmentConfig& cfg, std::mt19937_64& rng) {
    cfg.validate();
    // Draw order is fixed regardless of which transforms fire.
    const bool flip = uniform_real(rng) < cfg.flip_prob;
    const double delta = (uniform_real(rng) * 2.0 - 1.0) * cfg.brightness * 255.0;
    const double fac = 1.0 + (uniform_real(rng) * 2.0 - 1.0) * cfg.contrast;

    Sample out;
    out.occlusion = in.occlusion;
    const int W = in.image.width, H = in.image.height;
    out.image = Image(W, H);
    for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x)
            for (int c = 0; c < 3; ++c) {
                const std::uint8_t v = in.image.at(flip ? W - 1 - x : x, y, c);
                out.image.at(x, y, c) = clamp_u8((v - 127.5) * fac + 127.5 + delta);
            }
    for (const Box& b : in.boxes)
        out.boxes.push_back(flip ? Box(W - b.x_max, b.y_min, W - b.x_min, b.y_max) : b);
    return out;
}

// --- dataset I/O -------------------------------------------------------------

std::string annotation_to_jsonl(const SceneAnnotation& ann) {
    nlohmann::json j;
    j["image"] = ann.image_path;
    auto boxes = nlohmann::json::array();
    for (const Box& b : ann.boxes) boxes.push_back({b.x_min, b.y_min, b.x_max, b.y_max});
    j["boxes"] = boxes;
    j["occ"] = ann.occlusion;
    j["distractors"] = ann.distractor_count;
    return j.dump();
}

SceneAnnotation annotation_from_jsonl(const std::string& line) {
    const auto j = nlohmann::json::parse(line);
    SceneAnnotation ann;
    ann.image_path = j.at("image").get<std::string>();
    for (const auto& b : j.at("boxes"))
        ann.boxes.emplace_back(b.at(0).get<double>(), b.at(1).get<double>(),
                               b.at(2).get<double>(), b.at(3).get<double>());
    ann.occlusion = j.at("occ").get<std::vector<double>>();
    ann.distractor_count = j.value("distractors", 0);
    if (ann.occlusion.size() != ann.boxes.size())
        throw std::runtime_error("annotation: occ/boxes length mismatch");
    return ann;
}

void write_dataset(const std::string& dir, int count, std::uint64_t base_seed,
                   const SceneParams& params) {
    namespace fs = std::filesystem;
    fs::create_directories(fs::path(dir) / "images");
    std::ofstream jsonl(fs::path(dir) / "annotations.jsonl");
    if (!jsonl) throw std::runtime_error("write_dataset: cannot open annotations in " + dir);

    std::vector<int> side_hist(5, 0);
    std::vector<int> occ_hist(4, 0);
    for (int i = 0; i < count; ++i) {
        // Per-index seed derivation; worker-count independent by construction.
        const std::uint64_t seed = base_seed + 0x9e3779b97f4a7c15ull * std::uint64_t(i + 1);
        auto [img, ann] = generate_scene(seed, params);
        char name[32];
        std::snprintf(name, sizeof name, "images/%06d.png", i);
        ann.image_path = name;
        write_png((fs::path(dir) / name).string(), img);
        jsonl << annotation_to_jsonl(ann) << '\n';
        for (const Box& b : ann.boxes) {
            const double side = std::sqrt(b.area());
            side_hist[side < 32 ? 0 : side < 64 ? 1 : side < 128 ? 2 : side < 256 ? 3 : 4]++;
        }
        for (double o : ann.occlusion)
            occ_hist[o == 0.0 ? 0 : o < 0.3 ? 1 : o < 0.5 ? 2 : 3]++;
    }

    std::ofstream stats(fs::path(dir) / "stats.csv");
    stats << "metric,bucket,count\n";
    const char* side_names[] = {"[0,32)", "[32,64)", "[64,128)", "[128,256)", "[256,inf)"};
    for (int i = 0; i < 5; ++i) stats << "face_side," << side_names[i] << ',' << side_hist[i] << '\n';
    const char* occ_names[] = {"0", "(0,0.3)", "[0.3,0.5)", "[0.5,1]"};
    for (int i = 0; i < 4; ++i) stats << "occlusion," << occ_names[i] << ',' << occ_hist[i] << '\n';
}

std::vector<SceneAnnotation> load_annotations(const std::string& dir) {
    std::ifstream f(std::filesystem::path(dir) / "annotations.jsonl");
    if (!f) throw std::runtime_error("load_annotations: no annotations.jsonl in " + dir);
    std::vector<SceneAnnotation> out;
    std::string line;
    while (std::getline(f, line))
        if (!line.empty()) out.push_back(annotation_from_jsonl(line));
    return out;
}

Image load_scene_image(const std::string& dir, const SceneAnnotation& ann) {
    return read_png((std::filesystem::path(dir) / ann.image_path).string());
}

}  // namespace fan
