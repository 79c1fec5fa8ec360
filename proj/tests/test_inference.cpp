#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <algorithm>
#include <array>
#include <cmath>
#include <random>

#include "fan/inference.hpp"
#include "helpers.hpp"

using namespace fan;

namespace {

AnchorSpec micro_spec() {
    AnchorSpec s;
    s.levels = {3, 4};
    s.base_sides = {16.0, 32.0};
    s.scale_multipliers = {1.0};
    s.aspect_ratios = {1.0};
    return s;
}

ModelConfig small_config() {
    ModelConfig c;
    c.backbone_channels = 8;
    c.subnet_channels = 8;
    c.subnet_depth = 1;
    return c;
}

PyramidOutput constant_output(const AnchorGrid& grid, double cls_logit) {
    PyramidOutput out;
    const int A = grid.spec.anchors_per_location();
    for (const auto& lvl : grid.levels) {
        LevelPrediction p;
        const std::size_t plane = std::size_t(lvl.height) * lvl.width;
        p.cls_logits = Tensor::from_data({A, lvl.height, lvl.width},
                                         std::vector<real>(std::size_t(A) * plane, cls_logit));
        p.reg_deltas = Tensor::zeros({4 * A, lvl.height, lvl.width});
        p.att_logits = Tensor::zeros({1, lvl.height, lvl.width});
        out.levels.push_back(std::move(p));
    }
    return out;
}

// Exhaustive decoder: per level threshold + top-k, decode, clip, then greedy
// NMS over everything via the reference implementation.
std::vector<Detection> reference_decode(const PyramidOutput& out, const AnchorGrid& grid,
                                        const DecodeConfig& cfg) {
    std::vector<Box> boxes;
    std::vector<double> scores;
    const int A = grid.spec.anchors_per_location();
    for (std::size_t li = 0; li < grid.levels.size(); ++li) {
        const auto& lvl = grid.levels[li];
        const auto& cls = out.levels[li].cls_logits.values();
        const auto& reg = out.levels[li].reg_deltas.values();
        const std::size_t plane = std::size_t(lvl.height) * lvl.width;
        std::vector<std::pair<double, std::size_t>> cand;
        for (std::size_t i = 0; i < cls.size(); ++i) {
            const double s = 1.0 / (1.0 + std::exp(-cls[i]));
            if (s > cfg.score_thresh) cand.emplace_back(s, i);
        }
        std::stable_sort(cand.begin(), cand.end(), [](const auto& a, const auto& b) {
            return a.first != b.first ? a.first > b.first : a.second < b.second;
        });
        if (int(cand.size()) > cfg.pre_nms_topk) cand.resize(std::size_t(cfg.pre_nms_topk));
        for (const auto& [s, idx] : cand) {
            const int a = int(idx / plane);
            const std::size_t cell = idx % plane;
            const int y = int(cell / lvl.width), x = int(cell % lvl.width);
            const Box& anchor = lvl.anchors[(std::size_t(y) * lvl.width + x) * A + a];
            std::array<double, 4> delta;
            for (int j = 0; j < 4; ++j) delta[j] = reg[std::size_t(a * 4 + j) * plane + cell];
            const Box b = decode_box(anchor, delta);
            const double x0 = std::clamp(b.x_min, 0.0, double(grid.image_w));
            const double y0 = std::clamp(b.y_min, 0.0, double(grid.image_h));
            const double x1 = std::clamp(b.x_max, 0.0, double(grid.image_w));
            const double y1 = std::clamp(b.y_max, 0.0, double(grid.image_h));
            if (x1 <= x0 || y1 <= y0) continue;
            boxes.emplace_back(x0, y0, x1, y1);
            scores.push_back(s);
        }
    }
    std::vector<Detection> result;
    for (int i : testutil::reference_nms(boxes, scores, cfg.nms_iou)) {
        result.push_back({boxes[std::size_t(i)], scores[std::size_t(i)]});
        if (int(result.size()) >= cfg.max_det) break;
    }
    return result;
}

}  // namespace

TEST_CASE("prior-level scores produce zero detections") {
    const AnchorGrid g = generate_anchors(256, 256, AnchorSpec::preset("fan"));
    // score sigmoid(-4.595) ~ 0.01, below the 0.05 threshold
    const PyramidOutput out = constant_output(g, -std::log(99.0));
    CHECK(decode_predictions(out, g).empty());
}

TEST_CASE("one hot anchor decodes to exactly that anchor box") {
    const AnchorGrid g = generate_anchors(256, 256, AnchorSpec::preset("fan"));
    PyramidOutput out = constant_output(g, -10.0);
    // level 4, interior cell (5, 7), anchor 2; tensor layout [A,H,W]
    const auto& lvl = g.levels[1];
    const std::size_t plane = std::size_t(lvl.height) * lvl.width;
    out.levels[1].cls_logits.values()[2 * plane + 5 * std::size_t(lvl.width) + 7] = 10.0;

    const auto dets = decode_predictions(out, g);
    REQUIRE(dets.size() == 1);
    CHECK(dets[0].score == doctest::Approx(1.0 / (1.0 + std::exp(-10.0))).epsilon(1e-12));
    const Box& anchor = lvl.anchors[(std::size_t(5) * lvl.width + 7) * 6 + 2];
    CHECK(dets[0].box.x_min == doctest::Approx(anchor.x_min).epsilon(1e-12));
    CHECK(dets[0].box.y_min == doctest::Approx(anchor.y_min).epsilon(1e-12));
    CHECK(dets[0].box.x_max == doctest::Approx(anchor.x_max).epsilon(1e-12));
    CHECK(dets[0].box.y_max == doctest::Approx(anchor.y_max).epsilon(1e-12));
}

TEST_CASE("decode matches the exhaustive reference on random outputs") {
    const AnchorGrid g = generate_anchors(64, 64, micro_spec());
    std::mt19937_64 rng(31);
    for (int trial = 0; trial < 20; ++trial) {
        PyramidOutput out;
        for (const auto& lvl : g.levels) {
            LevelPrediction p;
            const std::size_t plane = std::size_t(lvl.height) * lvl.width;
            std::vector<real> cls(plane), reg(4 * plane), att(plane, 0.0);
            for (auto& v : cls) v = -6.0 + 8.0 * testutil::urand(rng);
            for (auto& v : reg) v = -0.5 + testutil::urand(rng);
            p.cls_logits = Tensor::from_data({1, lvl.height, lvl.width}, std::move(cls));
            p.reg_deltas = Tensor::from_data({4, lvl.height, lvl.width}, std::move(reg));
            p.att_logits = Tensor::from_data({1, lvl.height, lvl.width}, std::move(att));
            out.levels.push_back(std::move(p));
        }
        DecodeConfig cfg;
        cfg.pre_nms_topk = 20;
        cfg.max_det = 15;
        const auto got = decode_predictions(out, g, cfg);
        const auto want = reference_decode(out, g, cfg);
        REQUIRE(got.size() == want.size());
        for (std::size_t i = 0; i < got.size(); ++i) {
            CHECK(got[i].box == want[i].box);
            CHECK(got[i].score == want[i].score);
        }
        // descending score order
        for (std::size_t i = 1; i < got.size(); ++i) CHECK(got[i].score <= got[i - 1].score);
    }
}

TEST_CASE("detect pads odd image sizes and clips to the original bounds") {
    FanModel m = FanModel::build(small_config(), 3);
    for (auto& v : m.param("cls.head.b").value.values()) v = 2.0;  // fire everywhere
    Image img(200, 150);
    for (auto& p : img.pixels) p = 127;
    const auto dets = detect(m, img);
    CHECK(!dets.empty());
    for (const auto& d : dets) {
        CHECK(d.box.x_max <= 200.0);
        CHECK(d.box.y_max <= 150.0);
        CHECK(d.box.x_min >= 0.0);
        CHECK(d.score > 0.0);
        CHECK(d.score < 1.0);
    }
}

TEST_CASE("multi-scale at the native scale equals single-scale detect") {
    FanModel m = FanModel::build(small_config(), 5);
    for (auto& v : m.param("cls.head.b").value.values()) v = 2.0;
    SceneParams p;
    auto [img, ann] = generate_scene(4, p);
    const auto single = detect(m, img);
    const auto multi = multi_scale_detect(m, img, {256});
    const auto dup = multi_scale_detect(m, img, {256, 256});
    REQUIRE(multi.size() == single.size());
    for (std::size_t i = 0; i < single.size(); ++i) {
        CHECK(multi[i].box == single[i].box);
        CHECK(multi[i].score == single[i].score);
    }
    REQUIRE(dup.size() == multi.size());
    for (std::size_t i = 0; i < multi.size(); ++i) CHECK(dup[i].box == multi[i].box);

    CHECK_THROWS_AS(multi_scale_detect(m, img, {}), std::invalid_argument);
    CHECK_THROWS_AS(multi_scale_detect(m, img, {-256}), std::invalid_argument);
}

TEST_CASE("perfect detections score AP 1 on every populated subset") {
    SceneParams p;
    std::vector<SceneAnnotation> anns;
    std::vector<std::vector<Detection>> dets;
    for (std::uint64_t s = 0; s < 10; ++s) {
        auto [img, ann] = generate_scene(s, p);
        std::vector<Detection> d;
        for (const Box& b : ann.boxes) d.push_back({b, 1.0});
        anns.push_back(ann);
        dets.push_back(d);
    }
    const EvalReport r = evaluate(dets, anns);
    for (const auto& s : r.subsets) {
        if (s.n_gt == 0)
            CHECK(s.ap == 0.0);
        else
            CHECK(s.ap == doctest::Approx(1.0).epsilon(1e-12));
    }
    CHECK(r.subset("all").n_gt > 0);
    CHECK_THROWS_AS(r.subset("nope"), std::out_of_range);

    // zero detections
    const EvalReport zero = evaluate(std::vector<std::vector<Detection>>(anns.size()), anns);
    for (const auto& s : zero.subsets) CHECK(s.ap == 0.0);

    CHECK_THROWS_AS(evaluate({}, anns), std::invalid_argument);
}

TEST_CASE("evaluate matches the independent reference on random scenarios") {
    std::mt19937_64 rng(41);
    for (int trial = 0; trial < 20; ++trial) {
        const int n_img = 3 + int(rng() % 4);
        const std::size_t n = std::size_t(n_img);
        std::vector<SceneAnnotation> anns(n);
        std::vector<std::vector<Detection>> dets(n);
        std::vector<testutil::RefDet> flat;
        for (int i = 0; i < n_img; ++i) {
            const int n_gt = int(rng() % 4);
            for (int g = 0; g < n_gt; ++g) {
                anns[std::size_t(i)].boxes.push_back(testutil::random_box(rng, 256, 10, 120));
                anns[std::size_t(i)].occlusion.push_back(testutil::urand(rng) < 0.4
                                                             ? testutil::urand(rng)
                                                             : 0.0);
            }
            const int n_det = int(rng() % 7);
            for (int d = 0; d < n_det; ++d) {
                Box b = testutil::random_box(rng, 256, 10, 120);
                if (!anns[std::size_t(i)].boxes.empty() && (rng() & 1)) {
                    // perturb a gt box so matches actually occur
                    const Box& g = anns[std::size_t(i)].boxes[rng() % anns[std::size_t(i)].boxes.size()];
                    const double j = (testutil::urand(rng) - 0.5) * 8.0;
                    b = Box(g.x_min + j, g.y_min + j, g.x_max + j, g.y_max + j);
                }
                const double score = testutil::urand(rng);
                dets[std::size_t(i)].push_back({b, score});
                flat.push_back({i, b, score});
            }
        }
        const EvalReport r = evaluate(dets, anns, 0.5, 0.3);

        auto masks = [&](auto pred) {
            std::vector<std::vector<char>> m;
            for (const auto& a : anns) {
                std::vector<char> row;
                for (std::size_t g = 0; g < a.boxes.size(); ++g)
                    row.push_back(pred(a.boxes[g], a.occlusion[g]) ? 1 : 0);
                m.push_back(row);
            }
            return m;
        };
        CHECK(r.subset("all").ap ==
              doctest::Approx(testutil::reference_ap(flat, anns,
                                                     masks([](const Box&, double) { return true; }),
                                                     0.5))
                  .epsilon(1e-9));
        CHECK(r.subset("occluded").ap ==
              doctest::Approx(testutil::reference_ap(
                                  flat, anns, masks([](const Box&, double o) { return o >= 0.3; }),
                                  0.5))
                  .epsilon(1e-9));
        CHECK(r.subset("size_32_64").ap ==
              doctest::Approx(testutil::reference_ap(
                                  flat, anns,
                                  masks([](const Box& b, double) {
                                      const double s = std::sqrt(b.area());
                                      return s >= 32 && s < 64;
                                  }),
                                  0.5))
                  .epsilon(1e-9));
    }
}

TEST_CASE("evaluation is input-order invariant and monotone under edits") {
    SceneParams p;
    std::vector<SceneAnnotation> anns;
    std::vector<std::vector<Detection>> dets;
    std::mt19937_64 rng(47);
    std::vector<std::vector<Box>> missed(6);
    for (std::uint64_t s = 0; s < 6; ++s) {
        auto [img, ann] = generate_scene(s, p);
        std::vector<Detection> d;
        for (const Box& b : ann.boxes)
            if (rng() & 1)
                d.push_back({b, 0.3 + 0.6 * testutil::urand(rng)});
            else
                missed[s].push_back(b);
        d.push_back({testutil::random_box(rng, 256, 10, 60), 0.2 + 0.5 * testutil::urand(rng)});
        anns.push_back(ann);
        dets.push_back(d);
    }
    const double base = evaluate(dets, anns).subset("all").ap;

    auto shuffled = dets;
    for (auto& d : shuffled) std::reverse(d.begin(), d.end());
    CHECK(evaluate(shuffled, anns).subset("all").ap == base);

    // a false positive below every existing score never raises AP
    auto with_fp = dets;
    with_fp[0].push_back({Box(1, 1, 3, 3), 1e-6});
    CHECK(evaluate(with_fp, anns).subset("all").ap <= base + 1e-12);

    // top-scored true positives for previously missed gt never lower it
    auto with_tp = dets;
    for (std::size_t i = 0; i < with_tp.size(); ++i)
        for (const Box& b : missed[i]) with_tp[i].push_back({b, 0.999});
    CHECK(evaluate(with_tp, anns).subset("all").ap >= base - 1e-12);
}

TEST_CASE("report csv formats") {
    SceneParams p;
    auto [img, ann] = generate_scene(2, p);
    std::vector<Detection> d;
    for (const Box& b : ann.boxes) d.push_back({b, 0.9});
    const EvalReport r = evaluate({d}, {ann});
    const std::string csv = eval_report_csv(r);
    CHECK(csv.rfind("subset,AP,n_gt,n_det\nall,", 0) == 0);  // "all" is the first data row
    CHECK(csv.find("occluded,") != std::string::npos);
    CHECK(csv.find("size_256_inf,") != std::string::npos);
    const std::string pr = pr_curve_csv(r.subset("all"));
    CHECK(pr.rfind("recall,precision\n", 0) == 0);
}
