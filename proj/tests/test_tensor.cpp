#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cstdio>
#include <string>
#include <random>

#include "fan/gradcheck.hpp"
#include "fan/tensor.hpp"

using namespace fan;

namespace {

Tensor randn(std::vector<int> shape, std::mt19937_64& rng, double sigma = 1.0,
             bool requires_grad = true) {
    std::size_t n = 1;
    for (int d : shape) n *= std::size_t(d);
    std::normal_distribution<double> nd(0.0, sigma);
    std::vector<real> v(n);
    for (auto& x : v) x = nd(rng);
    return Tensor::from_data(std::move(shape), std::move(v), requires_grad);
}

}  // namespace

#define CHECKGC(...)                                  \
    do {                                              \
        const auto gc_ = __VA_ARGS__;                 \
        CHECK_MESSAGE(gc_.ok, gc_.worst);             \
    } while (0)

TEST_CASE("tensor construction and scalar access") {
    Tensor z = Tensor::zeros({2, 3});
    CHECK(z.numel() == 6);
    CHECK_THROWS_AS(z.item(), std::logic_error);
    CHECK(Tensor::scalar(4.5).item() == 4.5);
    CHECK_THROWS_AS(Tensor::from_data({2, 2}, {1.0}), std::invalid_argument);
    CHECK_THROWS_AS(Tensor::zeros({0, 3}), std::invalid_argument);
}

TEST_CASE("conv2d with an identity kernel reproduces the input") {
    std::mt19937_64 rng(3);
    Tensor x = randn({2, 6, 7}, rng, 1.0, false);
    std::vector<real> wv(2 * 2 * 3 * 3, 0.0);
    // center tap of each channel's own kernel
    wv[(0 * 2 + 0) * 9 + 4] = 1.0;
    wv[(1 * 2 + 1) * 9 + 4] = 1.0;
    Tensor w = Tensor::from_data({2, 2, 3, 3}, wv);
    Tensor y = conv2d(x, w, Tensor(), 1, 1);
    REQUIRE(y.shape() == x.shape());
    for (std::size_t i = 0; i < x.numel(); ++i) CHECK(y.values()[i] == x.values()[i]);
}

TEST_CASE("conv2d rejects incompatible shapes") {
    std::mt19937_64 rng(5);
    Tensor x = randn({2, 4, 4}, rng);
    CHECK_THROWS_AS(conv2d(x, randn({3, 1, 3, 3}, rng), Tensor(), 1, 1), std::invalid_argument);
    CHECK_THROWS_AS(conv2d(x, randn({3, 2, 3, 3}, rng), randn({4}, rng), 1, 1),
                    std::invalid_argument);
    CHECK_THROWS_AS(conv2d(x, randn({3, 2, 3, 3}, rng), Tensor(), 0, 1), std::invalid_argument);
}

TEST_CASE("finite differences validate every op's backward") {
    std::mt19937_64 rng(7);
    // atol is only a floor for near-zero gradients where central differences
    // bottom out in rounding noise; the criterion is the 1e-5 relative bound.
    const double rtol = 1e-5, atol = 1e-7;

    SUBCASE("conv2d 3x3 stride 1") {
        Tensor x = randn({3, 8, 8}, rng), w = randn({4, 3, 3, 3}, rng), b = randn({4}, rng);
        CHECKGC(grad_check([&] { return reduce_sum(conv2d(x, w, b, 1, 1)); }, {x, w, b}, rtol, atol));
    }
    SUBCASE("conv2d 3x3 stride 2") {
        Tensor x = randn({2, 8, 8}, rng), w = randn({3, 2, 3, 3}, rng), b = randn({3}, rng);
        CHECKGC(grad_check([&] { return reduce_sum(conv2d(x, w, b, 2, 1)); }, {x, w, b}, rtol, atol));
    }
    SUBCASE("conv2d 1x1") {
        Tensor x = randn({4, 5, 5}, rng), w = randn({2, 4, 1, 1}, rng), b = randn({2}, rng);
        CHECKGC(grad_check([&] { return reduce_sum(conv2d(x, w, b, 1, 0)); }, {x, w, b}, rtol, atol));
    }
    SUBCASE("relu (inputs away from the kink)") {
        Tensor x = randn({4, 8, 8}, rng);
        for (auto& v : x.values())
            if (std::abs(v) < 1e-2) v = v < 0 ? v - 1e-2 : v + 1e-2;
        CHECKGC(grad_check([&] { return reduce_sum(relu(x)); }, {x}, rtol, atol));
    }
    SUBCASE("sigmoid") {
        Tensor x = randn({4, 8, 8}, rng);
        CHECKGC(grad_check([&] { return reduce_sum(sigmoid(x)); }, {x}, rtol, atol));
    }
    SUBCASE("exp") {
        Tensor x = randn({4, 8, 8}, rng);
        CHECKGC(grad_check([&] { return reduce_sum(fan::exp(x)); }, {x}, rtol, atol));
    }
    SUBCASE("add / mul / scale") {
        Tensor a = randn({4, 8, 8}, rng), b = randn({4, 8, 8}, rng);
        CHECKGC(grad_check([&] { return reduce_sum(mul(add(a, b), b)); }, {a, b}, rtol, atol));
        CHECKGC(grad_check([&] { return reduce_sum(scale(a, -1.7)); }, {a}, rtol, atol));
    }
    SUBCASE("upsample / avgpool") {
        Tensor x = randn({3, 4, 4}, rng);
        CHECKGC(grad_check([&] { return reduce_sum(mul(upsample_nearest2(x), upsample_nearest2(x))); },
                         {x}, rtol, atol));
        Tensor y = randn({3, 8, 8}, rng);
        CHECKGC(grad_check([&] { return reduce_sum(mul(avgpool2(y), avgpool2(y))); }, {y}, rtol,
                         atol));
    }
    SUBCASE("reshape / permute") {
        Tensor x = randn({2, 3, 4}, rng);
        CHECKGC(grad_check([&] { return reduce_sum(mul(reshape(x, {4, 3, 2}), reshape(x, {4, 3, 2}))); },
                         {x}, rtol, atol));
        CHECKGC(grad_check(
            [&] { return reduce_sum(mul(permute(x, {2, 0, 1}), permute(x, {2, 0, 1}))); }, {x},
            rtol, atol));
    }
    SUBCASE("reductions") {
        Tensor x = randn({3, 5, 5}, rng);
        CHECKGC(grad_check([&] { return reduce_mean(mul(x, x)); }, {x}, rtol, atol));
    }
}

TEST_CASE("permute moves values correctly") {
    Tensor x = Tensor::from_data({2, 3}, {1, 2, 3, 4, 5, 6});
    Tensor y = permute(x, {1, 0});
    CHECK(y.shape() == std::vector<int>{3, 2});
    CHECK(y.values() == std::vector<real>{1, 4, 2, 5, 3, 6});
    CHECK_THROWS_AS(permute(x, {0, 0}), std::invalid_argument);
    CHECK_THROWS_AS(permute(x, {0}), std::invalid_argument);
}

TEST_CASE("upsample x2 then 2x2 mean-pool is the identity") {
    std::mt19937_64 rng(9);
    Tensor x = randn({3, 5, 6}, rng);
    Tensor y = avgpool2(upsample_nearest2(x));
    REQUIRE(y.shape() == x.shape());
    for (std::size_t i = 0; i < x.numel(); ++i)
        CHECK(y.values()[i] == doctest::Approx(x.values()[i]).epsilon(1e-15));
}

TEST_CASE("backward is linear: grads of a sum equal summed grads") {
    std::mt19937_64 rng(13);
    Tensor x = randn({3, 4, 4}, rng);

    Tensor f = reduce_sum(mul(x, x));
    Tensor g = reduce_mean(sigmoid(x));
    x.zero_grad();
    add(f, g).backward();
    const std::vector<real> combined = x.grad();

    x.zero_grad();
    // fresh graphs over the same leaf
    reduce_sum(mul(x, x)).backward();
    reduce_mean(sigmoid(x)).backward();  // accumulates
    for (std::size_t i = 0; i < combined.size(); ++i)
        CHECK(x.grad()[i] == doctest::Approx(combined[i]).epsilon(1e-12));
}

TEST_CASE("repeated backward accumulates leaf gradients") {
    Tensor x = Tensor::from_data({2}, {3.0, -1.0}, true);
    x.zero_grad();
    reduce_sum(x).backward();
    reduce_sum(x).backward();
    CHECK(x.grad() == std::vector<real>{2.0, 2.0});
}

TEST_CASE("NoGradGuard suppresses graph recording") {
    Tensor x = Tensor::from_data({2}, {1.0, 2.0}, true);
    NoGradGuard ng;
    Tensor y = reduce_sum(mul(x, x));
    CHECK_FALSE(y.requires_grad());
}

TEST_CASE("sgd_step implements the update formula") {
    // momentum 0, wd 0, lr 1: w decreases by exactly g
    Tensor w = Tensor::from_data({3}, {1.0, 2.0, 3.0}, true);
    std::vector<real> vel;
    sgd_step(w, {0.5, -0.25, 0.0}, 1.0, 0.0, 0.0, vel);
    CHECK(w.values() == std::vector<real>{0.5, 2.25, 3.0});

    // general formula: v <- m v + g + wd w ; w <- w - lr v
    Tensor w2 = Tensor::from_data({1}, {2.0}, true);
    std::vector<real> v2{0.5};
    sgd_step(w2, {0.1}, 0.2, 0.9, 0.01, v2);
    const double expect_v = 0.9 * 0.5 + 0.1 + 0.01 * 2.0;
    CHECK(v2[0] == doctest::Approx(expect_v).epsilon(1e-15));
    CHECK(w2.values()[0] == doctest::Approx(2.0 - 0.2 * expect_v).epsilon(1e-15));

    // zero gradient and zero weight decay is a fixed point
    Tensor w3 = Tensor::from_data({2}, {5.0, -3.0}, true);
    std::vector<real> v3;
    sgd_step(w3, {0.0, 0.0}, 0.1, 0.9, 0.0, v3);
    CHECK(w3.values() == std::vector<real>{5.0, -3.0});

    CHECK_THROWS_AS(sgd_step(w3, {0.0}, 0.1, 0.9, 0.0, v3), std::invalid_argument);
}

TEST_CASE("ops are deterministic") {
    std::mt19937_64 rng(21);
    Tensor x = randn({3, 8, 8}, rng), w = randn({4, 3, 3, 3}, rng), b = randn({4}, rng);
    Tensor y1 = conv2d(x, w, b, 2, 1), y2 = conv2d(x, w, b, 2, 1);
    CHECK(y1.values() == y2.values());
}

TEST_CASE("checkpoint container round-trips and rejects corruption") {
    const std::string path = "ckpt_test.bin";
    std::vector<CheckpointEntry> entries = {{"a.w", {2, 3}, {1, 2, 3, 4, 5, 6}},
                                            {"a.b", {2}, {-1.5, 2.5}}};
    save_checkpoint(path, entries, R"({"note":42})");
    auto [loaded, extra] = load_checkpoint(path);
    REQUIRE(loaded.size() == 2);
    CHECK(loaded[0].name == "a.w");
    CHECK(loaded[0].shape == std::vector<int>{2, 3});
    CHECK(loaded[0].data == entries[0].data);
    CHECK(loaded[1].data == entries[1].data);
    CHECK(extra.find("42") != std::string::npos);

    // corrupt the magic
    {
        std::FILE* f = std::fopen(path.c_str(), "r+b");
        REQUIRE(f);
        std::fputc('X', f);
        std::fclose(f);
    }
    CHECK_THROWS_AS(load_checkpoint(path), std::runtime_error);
    CHECK_THROWS_AS(load_checkpoint("no_such_file.bin"), std::runtime_error);
    std::remove(path.c_str());
}
