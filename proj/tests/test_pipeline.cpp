#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <vector>

#include "gift/errors.hpp"
#include "gift/pipeline.hpp"
#include "test_util.hpp"

using namespace gift;
using testutil::max_abs_diff;
using testutil::random_tensor;

namespace {

GroupFeature make_feature(const Tensor& values) {
    GroupFeature f;
    f.values = values;
    f.validity.assign(static_cast<std::size_t>(values.dim(0) * values.dim(1)), true);
    return f;
}

GroupConvLayer random_layer(std::int64_t oc, std::int64_t ic, Rng& rng, bool grad = false) {
    GroupConvLayer l;
    l.weight = random_tensor({oc, ic, 3, 3}, rng, -0.5, 0.5, grad);
    l.bias = random_tensor({oc}, rng, -0.5, 0.5, grad);
    return l;
}

} // namespace

TEST_CASE("extraction with the identity-only grid matches direct backbone sampling") {
    Rng rng(500);
    Tensor img = testutil::smooth_image(rng, 48, 48);
    Rng pr(501);
    BackboneParams params = init_backbone(pr);
    const GroupGrid grid = GroupGrid::make(1, 1);
    const std::vector<std::pair<double, double>> pts = {{10.4, 20.8}, {33.0, 7.7}, {24.0, 24.0}};

    auto feats = extract_group_features(img, pts, grid, params);
    REQUIRE(feats.size() == pts.size());

    Tensor fmap = backbone_forward(params, img);
    const double d = static_cast<double>(kBackboneDownsample);
    for (std::size_t i = 0; i < pts.size(); ++i) {
        CHECK(feats[i].values.shape() == std::vector<std::int64_t>{1, 1, kBackboneOutChannels});
        CHECK(feats[i].x == pts[i].first);
        CHECK(feats[i].y == pts[i].second);
        REQUIRE(feats[i].validity.size() == 1);
        CHECK(feats[i].validity[0]);
        bool ok = false;
        Tensor ref = bilinear_sample(fmap, pts[i].first / d, pts[i].second / d, &ok);
        CHECK(ok);
        // the identity warp is a bit-exact copy, so both paths run the same
        // backbone on the same bits
        for (std::int64_t c = 0; c < kBackboneOutChannels; ++c)
            CHECK(feats[i].values.at({0, 0, c}) == ref.at({c}));
    }
}

TEST_CASE("extraction on the default grid yields 5x5x32 features, valid at the center") {
    Rng rng(502);
    Tensor img = testutil::smooth_image(rng, 64, 64);
    Rng pr(503);
    BackboneParams params = init_backbone(pr);
    const GroupGrid grid = GroupGrid::make();

    auto feats = extract_group_features(img, {{31.5, 31.5}}, grid, params);
    REQUIRE(feats.size() == 1);
    CHECK(feats[0].values.shape() == std::vector<std::int64_t>{5, 5, 32});
    REQUIRE(feats[0].validity.size() == 25);
    for (bool v : feats[0].validity) CHECK(v);
    CHECK(feats[0].values.all_finite());

    CHECK(extract_group_features(img, {}, grid, params).empty());
}

TEST_CASE("extraction marks cells invalid and zero when the mapped point leaves the map") {
    Rng rng(504);
    Tensor img = testutil::smooth_image(rng, 48, 48);
    Rng pr(505);
    BackboneParams params = init_backbone(pr);
    // a point almost on the bottom-right corner lands beyond the last feature
    // lattice point once divided by the backbone stride
    auto feats = extract_group_features(img, {{46.9, 46.9}}, GroupGrid::make(1, 1), params);
    REQUIRE(feats.size() == 1);
    CHECK_FALSE(feats[0].validity[0]);
    for (std::int64_t c = 0; c < 32; ++c) CHECK(feats[0].values.at({0, 0, c}) == 0.0);
}

TEST_CASE("concentric rings at the center give rotation-consistent features") {
    // the image is radially symmetric, so rotating it changes nothing but the
    // resampling lattice; the disk mask matches the content support under
    // every rotation, so the normalization statistics cover congruent regions
    // and cells along the rotation axis agree up to interpolation error.
    // Cosine rings keep the gradient zero at the sampled center point and the
    // amplitude fades out before the mask-erosion band so edge jitter only
    // ever lands on constant content.
    const std::int64_t S = 80;
    const double c0 = static_cast<double>(S - 1) / 2.0;
    Tensor img = Tensor::zeros({3, S, S});
    Tensor mask = Tensor::zeros({1, S, S});
    for (std::int64_t y = 0; y < S; ++y)
        for (std::int64_t x = 0; x < S; ++x) {
            const double r = std::hypot(static_cast<double>(x) - c0, static_cast<double>(y) - c0);
            if (r < 36.0) mask.set({0, y, x}, 1.0);
            const double amp = 0.35 * std::clamp((26.0 - r) / 6.0, 0.0, 1.0);
            for (int c = 0; c < 3; ++c)
                img.set({c, y, x}, 0.5 + amp * std::cos(r * (0.10 + 0.02 * c)));
        }
    Rng pr(506);
    BackboneParams params = init_backbone(pr);
    const GroupGrid grid = GroupGrid::make();
    auto feats = extract_group_features(img, {{c0, c0}}, grid, params, mask);
    REQUIRE(feats.size() == 1);
    const Tensor& v = feats[0].values;
    auto row_spread = [&](int a) {
        double worst = 0.0;
        for (int b1 = 0; b1 < grid.n_r; ++b1)
            for (int b2 = b1 + 1; b2 < grid.n_r; ++b2) {
                REQUIRE(feats[0].validity[static_cast<std::size_t>(a * grid.n_r + b1)]);
                for (std::int64_t c = 0; c < v.dim(2); ++c)
                    worst = std::max(worst, std::abs(v.at({a, b1, c}) - v.at({a, b2, c})));
            }
        return worst;
    };
    CHECK(row_spread(0) <= 5e-2);
    // scaled rows pick up extra resampling blur where the composed lattice
    // lands on half-pixel phases (worst at scale 2^(-1/2) with 45 degrees),
    // so they only get a coarse consistency bound
    for (int a = 1; a < grid.n_s; ++a) CHECK(row_spread(a) <= 0.2);
}

TEST_CASE("group conv with the identity stencil reproduces relu of the input") {
    Rng rng(507);
    Tensor f = random_tensor({5, 5, 6}, rng);
    GroupConvLayer layer;
    layer.weight = Tensor::zeros({6, 6, 3, 3});
    for (std::int64_t i = 0; i < 6; ++i) layer.weight.set({i, i, 1, 1}, 1.0);
    layer.bias = Tensor::zeros({6});
    GroupFeature out = group_conv_forward(make_feature(f), layer);
    for (std::int64_t a = 0; a < 5; ++a)
        for (std::int64_t b = 0; b < 5; ++b)
            for (std::int64_t c = 0; c < 6; ++c)
                CHECK(out.values.at({a, b, c}) == std::max(0.0, f.at({a, b, c})));
}

TEST_CASE("group conv on a constant feature is position-independent away from padding") {
    Rng rng(508);
    Tensor f = Tensor::full({5, 5, 3}, 0.7);
    GroupConvLayer layer = random_layer(4, 3, rng);
    GroupFeature out = group_conv_forward(make_feature(f), layer);
    // interior cells see the full stencil, so they are bitwise identical
    for (std::int64_t a = 1; a < 4; ++a)
        for (std::int64_t b = 1; b < 4; ++b)
            for (std::int64_t c = 0; c < 4; ++c)
                CHECK(out.values.at({a, b, c}) == out.values.at({1, 1, c}));
}

TEST_CASE("group conv matches a four-nested-loop oracle") {
    Rng rng(509);
    Tensor f = random_tensor({5, 5, 4}, rng);
    GroupConvLayer layer = random_layer(6, 4, rng);
    GroupFeature out = group_conv_forward(make_feature(f), layer);

    for (std::int64_t a = 0; a < 5; ++a)
        for (std::int64_t b = 0; b < 5; ++b)
            for (std::int64_t oc = 0; oc < 6; ++oc) {
                double acc = layer.bias.at({oc});
                for (int da = -1; da <= 1; ++da)
                    for (int db = -1; db <= 1; ++db) {
                        const std::int64_t sa = a + da, sb = b + db;
                        if (sa < 0 || sa >= 5 || sb < 0 || sb >= 5) continue;
                        for (std::int64_t ic = 0; ic < 4; ++ic)
                            acc += f.at({sa, sb, ic}) * layer.weight.at({oc, ic, da + 1, db + 1});
                    }
                const double want = std::max(0.0, acc);
                CHECK(std::abs(out.values.at({a, b, oc}) - want) <= 1e-12);
            }
}

TEST_CASE("branch group cnns end at 8 and 16 channels") {
    Rng rng(510);
    GiftModel m = GiftModel::init(rng, 6);
    REQUIRE(m.alpha.size() == 6);
    REQUIRE(m.beta.size() == 6);
    CHECK(m.alpha[0].weight.shape() == std::vector<std::int64_t>{8, 32, 3, 3});
    CHECK(m.alpha[5].weight.shape() == std::vector<std::int64_t>{8, 8, 3, 3});
    CHECK(m.beta[0].weight.shape() == std::vector<std::int64_t>{16, 32, 3, 3});
    CHECK(m.beta[5].weight.shape() == std::vector<std::int64_t>{16, 16, 3, 3});

    Rng fr(511);
    GroupFeature f0 = make_feature(random_tensor({5, 5, 32}, fr));
    CHECK(group_cnn(f0, m.alpha).values.shape() == std::vector<std::int64_t>{5, 5, 8});
    CHECK(group_cnn(f0, m.beta).values.shape() == std::vector<std::int64_t>{5, 5, 16});
}

TEST_CASE("depth-1 group cnn equals a single layer; zero input stays zero") {
    Rng rng(512);
    GroupFeature f0 = make_feature(random_tensor({5, 5, 4}, rng));
    GroupConvLayer layer = random_layer(3, 4, rng);
    Tensor once = group_conv_forward(f0, layer).values;
    Tensor chained = group_cnn(f0, {layer}).values;
    CHECK(max_abs_diff(once, chained) == 0.0);

    GroupFeature zero = make_feature(Tensor::zeros({5, 5, 4}));
    GroupConvLayer zb = random_layer(3, 4, rng);
    zb.bias = Tensor::zeros({3});
    Tensor out = group_cnn(zero, {zb}).values;
    for (std::int64_t i = 0; i < out.numel(); ++i) CHECK(out.data()[i] == 0.0);
}

TEST_CASE("bilinear pooling flattens the branch outer product") {
    Rng rng(513);
    GroupFeature fa = make_feature(random_tensor({5, 5, 8}, rng));
    GroupFeature fb = make_feature(random_tensor({5, 5, 16}, rng));
    Tensor d = bilinear_pool(fa, fb);
    REQUIRE(d.shape() == std::vector<std::int64_t>{128});

    for (std::int64_t i = 0; i < 8; ++i)
        for (std::int64_t j = 0; j < 16; ++j) {
            double acc = 0.0;
            for (std::int64_t a = 0; a < 5; ++a)
                for (std::int64_t b = 0; b < 5; ++b)
                    acc += fa.values.at({a, b, i}) * fb.values.at({a, b, j});
            CHECK(std::abs(d.at({i * 16 + j}) - acc) <= 1e-12);
        }

    GroupFeature fc = make_feature(random_tensor({4, 5, 8}, rng));
    CHECK_THROWS_AS((void)bilinear_pool(fc, fb), shape_error);
}

TEST_CASE("bilinear pooling with a constant single-channel beta is average pooling") {
    Rng rng(514);
    GroupFeature fa = make_feature(random_tensor({5, 5, 8}, rng));
    GroupFeature fb = make_feature(Tensor::full({5, 5, 1}, 1.0 / 25.0));
    Tensor d = bilinear_pool(fa, fb);
    REQUIRE(d.shape() == std::vector<std::int64_t>{8});
    Tensor avg = pool_variant(fa, PoolMode::average);
    CHECK(max_abs_diff(d, avg) <= 1e-12);
}

TEST_CASE("bilinear pooling is invariant to joint grid-cell permutations") {
    // on small-integer values every partial sum is exact, so reordering the
    // cells cannot change a single bit; this pins down that pooling has no
    // positional dependence beyond the shared indexing
    Rng rng(515);
    Tensor a = Tensor::zeros({5, 5, 8});
    Tensor b = Tensor::zeros({5, 5, 16});
    for (std::int64_t i = 0; i < a.numel(); ++i)
        a.data()[i] = static_cast<double>(rng.uniform_int(-8, 8));
    for (std::int64_t i = 0; i < b.numel(); ++i)
        b.data()[i] = static_cast<double>(rng.uniform_int(-8, 8));

    std::vector<int> perm(25);
    std::iota(perm.begin(), perm.end(), 0);
    for (int i = 24; i > 0; --i)
        std::swap(perm[static_cast<std::size_t>(i)],
                  perm[static_cast<std::size_t>(rng.uniform_int(0, i))]);

    auto permute = [&](const Tensor& t) {
        const std::int64_t c = t.dim(2);
        Tensor out = Tensor::zeros(t.shape());
        for (int cell = 0; cell < 25; ++cell)
            for (std::int64_t k = 0; k < c; ++k)
                out.data()[cell * c + k] = t.data()[perm[static_cast<std::size_t>(cell)] * c + k];
        return out;
    };

    Tensor d1 = bilinear_pool(make_feature(a), make_feature(b));
    Tensor d2 = bilinear_pool(make_feature(permute(a)), make_feature(permute(b)));
    for (std::int64_t i = 0; i < 128; ++i) CHECK(d1.at({i}) == d2.at({i}));

    // on generic doubles the sum order changes, so equality holds to roundoff
    Rng gr(516);
    Tensor ga = random_tensor({5, 5, 8}, gr);
    Tensor gb = random_tensor({5, 5, 16}, gr);
    Tensor g1 = bilinear_pool(make_feature(ga), make_feature(gb));
    Tensor g2 = bilinear_pool(make_feature(permute(ga)), make_feature(permute(gb)));
    CHECK(max_abs_diff(g1, g2) <= 1e-13);
}

TEST_CASE("pooling variants: constants, one-hot grids, and the average cross-check") {
    GroupFeature con = make_feature(Tensor::full({5, 5, 3}, 0.42));
    Tensor avg = pool_variant(con, PoolMode::average);
    Tensor mx = pool_variant(con, PoolMode::max);
    for (std::int64_t c = 0; c < 3; ++c) {
        CHECK(std::abs(avg.at({c}) - 0.42) <= 1e-15);
        CHECK(mx.at({c}) == 0.42);
    }

    Tensor oh = Tensor::zeros({5, 5, 2});
    oh.set({2, 3, 0}, 5.0);
    oh.set({2, 3, 1}, -5.0);
    GroupFeature fh = make_feature(oh);
    Tensor avg2 = pool_variant(fh, PoolMode::average);
    Tensor mx2 = pool_variant(fh, PoolMode::max);
    CHECK(std::abs(avg2.at({0}) - 5.0 / 25.0) <= 1e-15);
    CHECK(std::abs(avg2.at({1}) + 5.0 / 25.0) <= 1e-15);
    CHECK(mx2.at({0}) == 5.0);
    CHECK(mx2.at({1}) == 0.0);
}

TEST_CASE("descriptor normalization scales to unit length and flags zero input") {
    Tensor d = Tensor::zeros({128});
    d.set({0}, 3.0);
    d.set({1}, 4.0);
    Descriptor n = normalize_descriptor(d, 7.0, 9.0);
    CHECK(n.values.at({0}) == doctest::Approx(0.6).epsilon(1e-12));
    CHECK(n.values.at({1}) == doctest::Approx(0.8).epsilon(1e-12));
    CHECK(n.x == 7.0);
    CHECK(n.y == 9.0);
    CHECK_FALSE(n.degenerate);
    for (std::int64_t i = 2; i < 128; ++i) CHECK(n.values.at({i}) == 0.0);

    Rng rng(517);
    Tensor u = random_tensor({128}, rng);
    double norm = 0.0;
    for (std::int64_t i = 0; i < 128; ++i) norm += u.at({i}) * u.at({i});
    norm = std::sqrt(norm);
    for (std::int64_t i = 0; i < 128; ++i) u.set({i}, u.at({i}) / norm);
    Descriptor n2 = normalize_descriptor(u, 0, 0);
    CHECK(max_abs_diff(n2.values, u) <= 1e-12);

    Descriptor z = normalize_descriptor(Tensor::zeros({128}), 0, 0);
    CHECK(z.degenerate);
    for (std::int64_t i = 0; i < 128; ++i) CHECK(z.values.at({i}) == 0.0);
}

TEST_CASE("shifting a group feature reindexes cells and zero-fills departures") {
    const GroupGrid grid = GroupGrid::make();
    Tensor v = Tensor::zeros({5, 5, 2});
    for (std::int64_t a = 0; a < 5; ++a)
        for (std::int64_t b = 0; b < 5; ++b)
            for (std::int64_t c = 0; c < 2; ++c)
                v.set({a, b, c}, static_cast<double>(100 * a + 10 * b + c));

    // f'(g) = f(g o h): a rotation step pulls values from one cell over, and
    // cells whose composition leaves the grid become exact zeros
    Tensor r = shift_group_feature(v, {0, 1}, grid);
    for (std::int64_t a = 0; a < 5; ++a)
        for (std::int64_t b = 0; b < 5; ++b)
            for (std::int64_t c = 0; c < 2; ++c)
                CHECK(r.at({a, b, c}) == (b + 1 < 5 ? v.at({a, b + 1, c}) : 0.0));

    Tensor s = shift_group_feature(v, {1, 0}, grid);
    for (std::int64_t a = 0; a < 5; ++a)
        for (std::int64_t b = 0; b < 5; ++b)
            for (std::int64_t c = 0; c < 2; ++c)
                CHECK(s.at({a, b, c}) == (a + 1 < 5 ? v.at({a + 1, b, c}) : 0.0));

    Tensor m = shift_group_feature(v, {-1, -1}, grid);
    for (std::int64_t a = 0; a < 5; ++a)
        for (std::int64_t b = 0; b < 5; ++b)
            for (std::int64_t c = 0; c < 2; ++c)
                CHECK(m.at({a, b, c}) == (a >= 1 && b >= 1 ? v.at({a - 1, b - 1, c}) : 0.0));

    Tensor id = shift_group_feature(v, {0, 0}, grid);
    CHECK(max_abs_diff(id, v) == 0.0);

    CHECK_THROWS_AS((void)shift_group_feature(Tensor::zeros({4, 5, 2}), {0, 0}, grid), shape_error);
}

TEST_CASE("end-to-end descriptors are 128-dimensional unit vectors at their points") {
    Rng rng(518);
    Tensor img = testutil::smooth_image(rng, 48, 48);
    Rng mr(519);
    GiftModel m = GiftModel::init(mr, 1);
    const std::vector<std::pair<double, double>> pts = {{16.0, 20.0}, {30.5, 24.5}};
    auto descs = compute_descriptors(m, img, pts);
    REQUIRE(descs.size() == 2);
    for (std::size_t i = 0; i < descs.size(); ++i) {
        REQUIRE(descs[i].values.shape() == std::vector<std::int64_t>{128});
        CHECK_FALSE(descs[i].degenerate);
        CHECK(descs[i].x == pts[i].first);
        CHECK(descs[i].y == pts[i].second);
        double norm = 0.0;
        for (std::int64_t k = 0; k < 128; ++k) norm += descs[i].values.at({k}) * descs[i].values.at({k});
        CHECK(std::abs(std::sqrt(norm) - 1.0) <= 1e-9);
    }
}

TEST_CASE("model checkpoints round-trip every parameter and the grid config") {
    Rng rng(520);
    GiftModel m = GiftModel::init(rng, 2, GroupGrid::make(4, 3));
    const std::string path = "/tmp/gift_pipeline_model_test.bin";
    m.save(path);
    GiftModel r = GiftModel::load(path);
    std::remove(path.c_str());

    CHECK(r.depth == 2);
    CHECK(r.grid.n_s == 4);
    CHECK(r.grid.n_r == 3);
    CHECK(r.grid.unit_scale_factor == m.grid.unit_scale_factor);

    NamedTensors a = m.named_parameters();
    NamedTensors b = r.named_parameters();
    REQUIRE(a.size() == b.size());
    for (std::size_t i = 0; i < a.size(); ++i) {
        CHECK(a[i].first == b[i].first);
        REQUIRE(a[i].second.shape() == b[i].second.shape());
        CHECK(max_abs_diff(a[i].second, b[i].second) == 0.0);
        CHECK(b[i].second.node()->requires_grad);
    }

    CHECK_THROWS_AS((void)GiftModel::load("/tmp/gift_no_such_model.bin"), io_error);
}

TEST_CASE("descriptor batch files round-trip exactly") {
    std::vector<DescriptorRecord> recs(3);
    Rng rng(521);
    for (std::size_t i = 0; i < recs.size(); ++i) {
        recs[i].x = rng.uniform(0.0, 100.0);
        recs[i].y = rng.uniform(0.0, 100.0);
        recs[i].values.resize(128);
        for (double& v : recs[i].values) v = rng.uniform(-1.0, 1.0);
    }
    const std::string path = "/tmp/gift_pipeline_batch_test.bin";
    write_descriptor_batch(path, recs);
    std::uint32_t dim = 0;
    auto back = read_descriptor_batch(path, &dim);
    std::remove(path.c_str());
    CHECK(dim == 128);
    REQUIRE(back.size() == recs.size());
    for (std::size_t i = 0; i < recs.size(); ++i) {
        CHECK(back[i].x == recs[i].x);
        CHECK(back[i].y == recs[i].y);
        REQUIRE(back[i].values.size() == 128);
        for (std::size_t k = 0; k < 128; ++k) CHECK(back[i].values[k] == recs[i].values[k]);
    }
}

TEST_CASE("gradients flow through the branch-and-pool chain") {
    Rng rng(522);
    Tensor f0 = random_tensor({3, 3, 4}, rng, -1.0, 1.0, true);
    GroupConvLayer la = random_layer(3, 4, rng, true);
    GroupConvLayer lb = random_layer(5, 4, rng, true);

    std::vector<Tensor> leaves = {f0, la.weight, la.bias, lb.weight, lb.bias};
    auto forward = [&]() {
        GroupFeature f = make_feature(f0);
        GroupFeature fa = group_conv_forward(f, la);
        GroupFeature fb = group_conv_forward(f, lb);
        bool deg = false;
        Tensor d = l2_normalize(bilinear_pool(fa, fb), &deg);
        return sum_all(d);
    };
    CHECK(testutil::fd_max_rel_error(leaves, forward, 2e-6, 12) <= 1e-4);
}
