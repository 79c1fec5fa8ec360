#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <random>

#include "fan/geometry.hpp"
#include "helpers.hpp"

using namespace fan;

TEST_CASE("box construction rejects degenerate and non-finite rectangles") {
    CHECK_THROWS_AS(Box(0, 0, 0, 10), std::invalid_argument);
    CHECK_THROWS_AS(Box(5, 0, 4, 10), std::invalid_argument);
    CHECK_THROWS_AS(Box(0, 0, std::nan(""), 10), std::invalid_argument);
    const Box b(1, 2, 4, 8);
    CHECK(b.width() == 3);
    CHECK(b.height() == 6);
    CHECK(b.area() == 18);
    CHECK(b.cx() == doctest::Approx(2.5));
}

TEST_CASE("iou example values") {
    const Box a(0, 0, 10, 10);
    CHECK(iou(a, a) == 1.0);
    CHECK(iou(a, Box(20, 20, 30, 30)) == 0.0);
    CHECK(iou(a, Box(5, 5, 15, 15)) == doctest::Approx(25.0 / 175.0).epsilon(1e-12));
}

TEST_CASE("iou is symmetric and bounded on random pairs") {
    std::mt19937_64 rng(11);
    for (int i = 0; i < 20000; ++i) {
        const Box a = testutil::random_box(rng), b = testutil::random_box(rng);
        const double v = iou(a, b);
        CHECK(v == iou(b, a));
        CHECK(v >= 0.0);
        CHECK(v <= 1.0);
        CHECK(iou(a, a) == 1.0);
    }
}

TEST_CASE("fan preset matches the published anchor design") {
    const AnchorSpec s = AnchorSpec::preset("fan");
    CHECK(s.levels == std::vector<int>{3, 4, 5, 6, 7});
    CHECK(s.anchors_per_location() == 6);
    CHECK(s.base_sides.front() == 16.0);
    CHECK(s.base_sides.back() == 256.0);
    // largest side: 256 * 2^(2/3) ~ 406.4
    const double largest = s.base_sides.back() * s.scale_multipliers.back();
    CHECK(largest == doctest::Approx(406.37).epsilon(1e-4));
    CHECK(s.stride(0) == 8);
    CHECK(s.stride(4) == 128);
    CHECK(s.max_stride() == 128);
}

TEST_CASE("retinanet and dense presets") {
    const AnchorSpec r = AnchorSpec::preset("retinanet");
    CHECK(r.anchors_per_location() == 9);
    CHECK(r.base_sides.front() == 32.0);
    CHECK(r.base_sides.back() == 512.0);
    CHECK(r.aspect_ratios == std::vector<double>{0.5, 1.0, 2.0});

    const AnchorSpec d = AnchorSpec::preset("dense");
    CHECK(d.anchors_per_location() == 8);
    CHECK(d.base_sides.front() == 8.0);
    // smallest area 8^2; largest side = base_7 * 2 ~ 645
    CHECK(d.base_sides.back() * d.scale_multipliers.back() == doctest::Approx(645.08).epsilon(1e-3));
    // consecutive scales stay on the 2^(1/3) ladder within each level
    CHECK(d.scale_multipliers[1] / d.scale_multipliers[0] ==
          doctest::Approx(std::cbrt(2.0)).epsilon(1e-12));

    CHECK_THROWS_AS(AnchorSpec::preset("nope"), std::invalid_argument);
}

TEST_CASE("anchor grid counts and layout on a 256x256 image") {
    const AnchorGrid g = generate_anchors(256, 256, AnchorSpec::preset("fan"));
    REQUIRE(g.levels.size() == 5);
    CHECK(g.levels[0].width == 32);
    CHECK(g.levels[0].anchors.size() == 32 * 32 * 6);  // 6144
    CHECK(g.levels[4].width == 2);
    std::size_t total = 0;
    for (const auto& l : g.levels) total += std::size_t(l.width) * l.height * 6;
    CHECK(g.total_anchors() == total);

    // level-7 ratio-1 anchor sides: 256 * 2^(j/3)
    const auto& l7 = g.levels[4];
    for (int j = 0; j < 3; ++j) {
        const Box& a = l7.anchors[std::size_t(j) * 2];  // ratio 1.0 comes first
        CHECK(a.width() == doctest::Approx(256.0 * std::pow(2.0, j / 3.0)).epsilon(1e-12));
        CHECK(a.width() == doctest::Approx(a.height()).epsilon(1e-12));
    }
    CHECK(l7.anchors[0].width() == doctest::Approx(256.0));
    CHECK(l7.anchors[2].width() == doctest::Approx(322.54).epsilon(1e-4));
    CHECK(l7.anchors[4].width() == doctest::Approx(406.37).epsilon(1e-4));
}

TEST_CASE("single-anchor grid") {
    AnchorSpec s;
    s.levels = {3};
    s.base_sides = {16.0};
    s.scale_multipliers = {1.0};
    s.aspect_ratios = {1.0};
    const AnchorGrid g = generate_anchors(8, 8, s);
    REQUIRE(g.total_anchors() == 1);
    const Box& a = g.levels[0].anchors[0];
    CHECK(a.cx() == 4.0);
    CHECK(a.cy() == 4.0);
    CHECK(a.width() == 16.0);
    CHECK(a.height() == 16.0);
}

TEST_CASE("ratio anchors preserve area") {
    const AnchorGrid g = generate_anchors(256, 256, AnchorSpec::preset("fan"));
    for (const auto& lvl : g.levels)
        for (std::size_t i = 0; i + 1 < 6; i += 2) {
            const Box& r1 = lvl.anchors[i];
            const Box& r15 = lvl.anchors[i + 1];
            CHECK(r15.area() == doctest::Approx(r1.area()).epsilon(1e-9));
            CHECK(r15.height() / r15.width() == doctest::Approx(1.5).epsilon(1e-12));
        }
}

TEST_CASE("generate_anchors is pure and validates dimensions") {
    const AnchorSpec s = AnchorSpec::preset("fan");
    const AnchorGrid a = generate_anchors(256, 128, s);
    const AnchorGrid b = generate_anchors(256, 128, s);
    REQUIRE(a.total_anchors() == b.total_anchors());
    for (std::size_t i = 0; i < a.total_anchors(); ++i) CHECK(a.anchor(i) == b.anchor(i));
    CHECK_THROWS_AS(generate_anchors(250, 256, s), std::invalid_argument);
    CHECK_THROWS_AS(generate_anchors(0, 256, s), std::invalid_argument);
}

TEST_CASE("flat_index and locate agree") {
    const AnchorGrid g = generate_anchors(256, 256, AnchorSpec::preset("fan"));
    std::mt19937_64 rng(5);
    for (int t = 0; t < 200; ++t) {
        const std::size_t li = rng() % g.levels.size();
        const auto& lvl = g.levels[li];
        const int row = int(rng() % std::uint64_t(lvl.height));
        const int col = int(rng() % std::uint64_t(lvl.width));
        const int a = int(rng() % 6);
        const std::size_t flat = g.flat_index(li, row, col, a);
        const auto [li2, off] = g.locate(flat);
        CHECK(li2 == li);
        CHECK(g.anchor(flat) == lvl.anchors[off]);
        CHECK(g.anchor(flat).cx() == doctest::Approx((col + 0.5) * (1 << lvl.k)));
        CHECK(g.anchor(flat).cy() == doctest::Approx((row + 0.5) * (1 << lvl.k)));
    }
}

TEST_CASE("nms basics") {
    CHECK(nms({}, {}, 0.5).empty());
    CHECK(nms({Box(0, 0, 4, 4)}, {0.3}, 0.5) == std::vector<int>{0});
    // two identical boxes: higher score kept, other suppressed
    CHECK(nms({Box(0, 0, 4, 4), Box(0, 0, 4, 4)}, {0.8, 0.9}, 0.5) == std::vector<int>{1});
    CHECK_THROWS_AS(nms({Box(0, 0, 4, 4)}, {0.1, 0.2}, 0.5), std::invalid_argument);
    const double inf = std::numeric_limits<double>::infinity();
    CHECK_THROWS_AS(nms({Box(0, 0, 4, 4)}, {inf}, 0.5), std::invalid_argument);
}

TEST_CASE("nms matches the exhaustive reference on random instances") {
    std::mt19937_64 rng(29);
    for (int inst = 0; inst < 200; ++inst) {
        const int n = 1 + int(rng() % 100);
        std::vector<Box> boxes;
        std::vector<double> scores;
        for (int i = 0; i < n; ++i) {
            boxes.push_back(testutil::random_box(rng, 128.0, 4.0, 64.0));
            scores.push_back(testutil::urand(rng));
        }
        const double thr = 0.2 + testutil::urand(rng) * 0.6;
        const auto kept = nms(boxes, scores, thr);
        CHECK(kept == testutil::reference_nms(boxes, scores, thr));
        for (std::size_t i = 0; i < kept.size(); ++i)
            for (std::size_t j = i + 1; j < kept.size(); ++j)
                CHECK(iou(boxes[std::size_t(kept[i])], boxes[std::size_t(kept[j])]) <= thr);
    }
}

TEST_CASE("anchor-centered square boxes are covered at IoU >= 0.6 (sampled)") {
    const AnchorGrid g = generate_anchors(512, 512, AnchorSpec::preset("fan"));
    for (double side : {16.0, 20.0, 25.0, 32.0, 57.0, 100.0, 203.0, 321.0, 406.0}) {
        double best = 0.0;
        for (const auto& lvl : g.levels) {
            // center-most cell center of this level
            const int stride = 1 << lvl.k;
            const double c = (lvl.width / 2 + 0.5) * stride;
            const Box q(c - side / 2, c - side / 2, c + side / 2, c + side / 2);
            for (const Box& a : lvl.anchors) best = std::max(best, iou(a, q));
        }
        CHECK(best >= 0.6);
    }
}
