#include "gift/selftest.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <functional>
#include <sstream>

#include "gift/pipeline.hpp"
#include "gift/trainer.hpp"

namespace gift {

namespace {

// Feature with N(0,1) entries on cells at least `margin` away from the window
// edge and zeros elsewhere. Validity is all-true.
GroupFeature synthetic_feature(const GroupGrid& grid, int channels, int margin, Rng& rng) {
    GroupFeature f;
    f.values = Tensor::zeros({grid.n_s, grid.n_r, channels});
    f.validity.assign(static_cast<std::size_t>(grid.cells()), true);
    double* v = f.values.data();
    for (int a = 0; a < grid.n_s; ++a)
        for (int b = 0; b < grid.n_r; ++b) {
            const bool inside = a >= margin && a < grid.n_s - margin && b >= margin &&
                                b < grid.n_r - margin;
            if (!inside) continue;
            for (int c = 0; c < channels; ++c)
                v[(static_cast<std::int64_t>(a) * grid.n_r + b) * channels + c] = rng.normal();
        }
    return f;
}

GroupConvLayer random_layer(int in_ch, int out_ch, bool zero_bias, Rng& rng) {
    GroupConvLayer l;
    l.weight = Tensor::zeros({out_ch, in_ch, 3, 3});
    const double bound = std::sqrt(6.0 / (9.0 * in_ch));
    for (std::int64_t i = 0; i < l.weight.numel(); ++i)
        l.weight.data()[i] = rng.uniform(-bound, bound);
    l.bias = Tensor::zeros({out_ch});
    if (!zero_bias)
        for (std::int64_t i = 0; i < out_ch; ++i) l.bias.data()[i] = rng.uniform(-0.5, 0.5);
    return l;
}

std::vector<GroupConvLayer> random_branch(int in_ch, int mid_ch, int depth, bool zero_bias,
                                          Rng& rng) {
    std::vector<GroupConvLayer> branch;
    for (int i = 0; i < depth; ++i)
        branch.push_back(random_layer(i == 0 ? in_ch : mid_ch, mid_ch, zero_bias, rng));
    return branch;
}

// Low-frequency value noise plus soft blobs; all gradients are gentle so that
// resampling the image twice stays close to resampling it once.
Tensor smooth_texture(Rng& rng, std::int64_t size) {
    std::vector<double> base(static_cast<std::size_t>(size * size), 0.0);
    for (int oct = 0; oct < 3; ++oct) {
        const std::int64_t cell = std::max<std::int64_t>(6, size >> (oct + 1));
        const std::int64_t kn = size / cell + 2;
        std::vector<double> lat(static_cast<std::size_t>(kn * kn));
        for (auto& v : lat) v = rng.uniform();
        const double amp = 1.0 / (1 << oct);
        for (std::int64_t y = 0; y < size; ++y)
            for (std::int64_t x = 0; x < size; ++x) {
                const double gx = static_cast<double>(x) / cell;
                const double gy = static_cast<double>(y) / cell;
                const std::int64_t ix = static_cast<std::int64_t>(gx);
                const std::int64_t iy = static_cast<std::int64_t>(gy);
                const double fx = gx - ix, fy = gy - iy;
                const double v00 = lat[static_cast<std::size_t>(iy * kn + ix)];
                const double v01 = lat[static_cast<std::size_t>(iy * kn + ix + 1)];
                const double v10 = lat[static_cast<std::size_t>((iy + 1) * kn + ix)];
                const double v11 = lat[static_cast<std::size_t>((iy + 1) * kn + ix + 1)];
                const double top = v00 + (v01 - v00) * fx;
                const double bot = v10 + (v11 - v10) * fx;
                base[static_cast<std::size_t>(y * size + x)] += amp * (top + (bot - top) * fy);
            }
    }
    for (int blob = 0; blob < 3; ++blob) {
        const double cx = rng.uniform(0.2, 0.8) * size;
        const double cy = rng.uniform(0.2, 0.8) * size;
        const double sigma = rng.uniform(4.0, 9.0);
        const double amp = rng.uniform(-0.5, 0.5);
        for (std::int64_t y = 0; y < size; ++y)
            for (std::int64_t x = 0; x < size; ++x) {
                const double d2 = (x - cx) * (x - cx) + (y - cy) * (y - cy);
                base[static_cast<std::size_t>(y * size + x)] +=
                    amp * std::exp(-d2 / (2.0 * sigma * sigma));
            }
    }
    double lo = base[0], hi = base[0];
    for (double v : base) {
        lo = std::min(lo, v);
        hi = std::max(hi, v);
    }
    const double span = std::max(hi - lo, 1e-9);
    Tensor img = Tensor::zeros({3, size, size});
    for (int c = 0; c < 3; ++c) {
        const double gain = rng.uniform(0.7, 1.3);
        const double shift = rng.uniform(-0.1, 0.1);
        for (std::int64_t i = 0; i < size * size; ++i) {
            const double t = (base[static_cast<std::size_t>(i)] - lo) / span;
            img.data()[c * size * size + i] =
                std::clamp(0.2 + 0.6 * (gain * t + shift), 0.05, 0.95);
        }
    }
    return img;
}

// Mixture of low-frequency plane waves: band-limited and infinitely smooth,
// so the only differences between warping once and warping in two steps are
// interpolation effects, not content aliasing.
Tensor sine_texture(Rng& rng, std::int64_t size) {
    Tensor img = Tensor::zeros({3, size, size});
    double* d = img.data();
    const double two_pi = 6.283185307179586;
    for (int c = 0; c < 3; ++c)
        for (int k = 0; k < 4; ++k) {
            const double lambda = rng.uniform(18.0, 36.0);
            const double theta = rng.uniform(0.0, two_pi);
            const double phase = rng.uniform(0.0, two_pi);
            const double amp = 0.18 / (k + 1);
            const double kx = std::cos(theta) * two_pi / lambda;
            const double ky = std::sin(theta) * two_pi / lambda;
            for (std::int64_t y = 0; y < size; ++y)
                for (std::int64_t x = 0; x < size; ++x)
                    d[(c * size + y) * size + x] += amp * std::sin(kx * x + ky * y + phase);
        }
    for (std::int64_t i = 0; i < 3 * size * size; ++i)
        d[i] = std::clamp(0.5 + d[i], 0.05, 0.95);
    return img;
}

double cell_norm(const Tensor& values, int a, int b) {
    const auto& s = values.shape();
    const std::int64_t c = s[2];
    const double* p = values.data() + (static_cast<std::int64_t>(a) * s[1] + b) * c;
    double acc = 0.0;
    for (std::int64_t i = 0; i < c; ++i) acc += p[i] * p[i];
    return std::sqrt(acc);
}

double cell_dist(const Tensor& u, int au, int bu, const Tensor& v, int av, int bv) {
    const auto& s = u.shape();
    const std::int64_t c = s[2];
    const double* pu = u.data() + (static_cast<std::int64_t>(au) * s[1] + bu) * c;
    const double* pv = v.data() + (static_cast<std::int64_t>(av) * v.shape()[1] + bv) * c;
    double acc = 0.0;
    for (std::int64_t i = 0; i < c; ++i) acc += (pu[i] - pv[i]) * (pu[i] - pv[i]);
    return std::sqrt(acc);
}

// ---- finite differences -----------------------------------------------------

struct FdCase {
    std::string name;
    std::vector<Tensor> leaves;
    std::function<Tensor()> forward; // rebuilds the graph from the leaves
    double eps = 1e-5;
    int coords_per_leaf = 24;
};

// Worst relative error across sampled coordinates of every leaf.
double run_fd_case(FdCase& c) {
    Tensor loss = c.forward();
    for (auto& leaf : c.leaves) leaf.zero_grad();
    backward(loss);
    double worst = 0.0;
    for (auto& leaf : c.leaves) {
        const double* g = leaf.grad_data();
        const std::int64_t n = leaf.numel();
        const std::int64_t step = std::max<std::int64_t>(1, n / c.coords_per_leaf);
        for (std::int64_t i = 0; i < n; i += step) {
            const double saved = leaf.data()[i];
            leaf.data()[i] = saved + c.eps;
            const double fp = c.forward().scalar();
            leaf.data()[i] = saved - c.eps;
            const double fm = c.forward().scalar();
            leaf.data()[i] = saved;
            const double numeric = (fp - fm) / (2.0 * c.eps);
            const double analytic = g ? g[i] : 0.0;
            const double rel = std::abs(analytic - numeric) /
                               std::max({std::abs(analytic), std::abs(numeric), 1e-4});
            if (std::getenv("GIFT_DEBUG_FD"))
                std::fprintf(stderr, "[fd] %s coord %lld: analytic %.10g numeric %.10g rel %.3g\n",
                             c.name.c_str(), static_cast<long long>(i), analytic, numeric, rel);
            worst = std::max(worst, rel);
        }
    }
    return worst;
}

Tensor random_constant(const std::vector<std::int64_t>& shape, Rng& rng) {
    Tensor k = Tensor::zeros(shape);
    for (std::int64_t i = 0; i < k.numel(); ++i) k.data()[i] = rng.uniform(-1.0, 1.0);
    return k;
}

Tensor random_leaf(const std::vector<std::int64_t>& shape, Rng& rng) {
    Tensor t = Tensor::zeros(shape, true);
    for (std::int64_t i = 0; i < t.numel(); ++i) t.data()[i] = rng.normal();
    return t;
}

} // namespace

SuiteResult suite_feature_shift() {
    Rng rng(101);
    SuiteResult r{"feature-shift", 0.0, true, ""};
    for (int trial = 0; trial < 100; ++trial) {
        const int n_s = static_cast<int>(rng.uniform_int(3, 7));
        const int n_r = 2 * static_cast<int>(rng.uniform_int(1, 3)) + 1;
        const GroupGrid grid = GroupGrid::make(n_s, n_r);
        const int ch = static_cast<int>(rng.uniform_int(1, 8));
        GroupFeature f = synthetic_feature(grid, ch, 0, rng);
        const GroupElement h{static_cast<int>(rng.uniform_int(-2, 2)),
                             static_cast<int>(rng.uniform_int(-2, 2))};
        Tensor shifted = shift_group_feature(f.values, h, grid);
        for (int a = 0; a < n_s; ++a)
            for (int b = 0; b < n_r; ++b) {
                const GroupElement gh = compose(grid.element(a, b), h);
                for (int c = 0; c < ch; ++c) {
                    double expected = 0.0;
                    if (grid.in_grid(gh)) {
                        const auto [a2, b2] = grid.index_of(gh);
                        expected = f.values.at({a2, b2, c});
                    }
                    const double got = shifted.at({a, b, c});
                    if (got != expected) r.pass = false; // must be an exact copy
                    r.max_err = std::max(r.max_err, std::abs(got - expected));
                }
            }
    }
    r.detail = "100 grids, exact index permutation";
    if (r.max_err != 0.0) r.pass = false;
    return r;
}

SuiteResult suite_gconv_equivariance() {
    Rng rng(202);
    SuiteResult r{"gconv-equivariance", 0.0, true, ""};
    int compared = 0;
    for (int trial = 0; trial < 100; ++trial) {
        const int margin = static_cast<int>(rng.uniform_int(1, 2));
        const int n_s = static_cast<int>(rng.uniform_int(2 * margin + 1, 7));
        const int n_r = 2 * static_cast<int>(rng.uniform_int(margin, 3)) + 1;
        const GroupGrid grid = GroupGrid::make(n_s, n_r);
        const int in_ch = static_cast<int>(rng.uniform_int(2, 6));
        const int out_ch = static_cast<int>(rng.uniform_int(2, 6));
        const bool zero_bias = trial % 3 == 0;
        const GroupConvLayer layer = random_layer(in_ch, out_ch, zero_bias, rng);
        GroupFeature f = synthetic_feature(grid, in_ch, margin, rng);
        const GroupElement h{static_cast<int>(rng.uniform_int(-margin, margin)),
                             static_cast<int>(rng.uniform_int(-margin, margin))};
        GroupFeature fs = f;
        fs.values = shift_group_feature(f.values, h, grid);
        const GroupFeature out = group_conv_forward(f, layer);
        const GroupFeature out_s = group_conv_forward(fs, layer);
        for (int a = 0; a < n_s; ++a)
            for (int b = 0; b < n_r; ++b) {
                const GroupElement gh = compose(grid.element(a, b), h);
                if (!grid.in_grid(gh)) continue;
                const auto [a2, b2] = grid.index_of(gh);
                for (int c = 0; c < out_ch; ++c) {
                    const double diff =
                        std::abs(out_s.values.at({a, b, c}) - out.values.at({a2, b2, c}));
                    r.max_err = std::max(r.max_err, diff);
                    ++compared;
                }
            }
    }
    std::ostringstream oss;
    oss << "100 layers, " << compared << " cell values, shift commutes exactly";
    r.detail = oss.str();
    r.pass = r.max_err == 0.0;
    return r;
}

SuiteResult suite_descriptor_invariance() {
    Rng rng(303);
    SuiteResult r{"descriptor-invariance", 0.0, true, ""};
    const int depths[3] = {1, 3, 6};
    const int trials[3] = {20, 12, 6};
    for (int di = 0; di < 3; ++di) {
        const int depth = depths[di];
        for (int mode = 0; mode < 2; ++mode) {
            const bool zero_bias = mode == 0;
            for (int trial = 0; trial < trials[di]; ++trial) {
                // a feature supported this far from the window edge is unaffected
                // by the zero padding the convolutions see at the boundary
                const int margin = zero_bias ? depth + 1 : 2 * depth + 1;
                const int n = 2 * margin + 3;
                const GroupGrid grid = GroupGrid::make(n, n);
                GroupElement h{0, 0};
                while (h.scale_exp == 0 && h.rot_exp == 0)
                    h = {static_cast<int>(rng.uniform_int(-1, 1)),
                         static_cast<int>(rng.uniform_int(-1, 1))};
                const int c0 = 6;
                const auto alpha = random_branch(c0, 5, depth, zero_bias, rng);
                const auto beta = random_branch(c0, 7, depth, zero_bias, rng);
                GroupFeature f = synthetic_feature(grid, c0, margin, rng);
                GroupFeature fs = f;
                fs.values = shift_group_feature(f.values, h, grid);
                const Descriptor d = normalize_descriptor(
                    bilinear_pool(group_cnn(f, alpha), group_cnn(f, beta)), 0, 0);
                const Descriptor ds = normalize_descriptor(
                    bilinear_pool(group_cnn(fs, alpha), group_cnn(fs, beta)), 0, 0);
                if (d.degenerate || ds.degenerate) r.pass = false;
                for (std::int64_t i = 0; i < d.values.numel(); ++i)
                    r.max_err = std::max(
                        r.max_err, std::abs(d.values.data()[i] - ds.values.data()[i]));
            }
        }
    }
    r.detail = "depths 1/3/6, with and without biases, shifted features";
    r.pass = r.pass && r.max_err <= 1e-9;
    return r;
}

SuiteResult suite_e2e_equivariance() {
    Rng rng(404);
    SuiteResult r{"warp-equivariance", 0.0, true, ""};
    const GroupGrid grid = GroupGrid::make();
    const BackboneParams bb = init_backbone(rng);
    const GroupElement hs[10] = {{0, 1}, {1, 0},  {0, -1}, {1, 1},  {-1, 0},
                                 {1, -1}, {0, 2}, {2, 0},  {-1, 1}, {0, -2}};
    // interior sampling on generous canvases: at the strongest minification
    // the receptive field and the normalization-statistics window both need
    // room, and small canvases make the per-plane statistics noisy
    const std::int64_t size = 96;
    int compared = 0;
    for (int t = 0; t < 10; ++t) {
        const Tensor img = sine_texture(rng, size);
        const GroupElement h = hs[t];
        const WarpResult warped = warp_image(img, h, grid);
        Tensor mask_a = Tensor::full({1, size, size}, 1.0);
        Tensor warped_ones = warp_by_map(mask_a, warped.point_map, warped.image.dim(1),
                                         warped.image.dim(2));
        Tensor mask_b = Tensor::zeros(warped_ones.shape());
        for (std::int64_t i = 0; i < warped_ones.numel(); ++i)
            mask_b.data()[i] = warped_ones.data()[i] >= 0.5 ? 1.0 : 0.0;

        std::vector<std::pair<double, double>> pts_a, pts_b;
        for (int k = 0; k < 2; ++k) {
            const double x = rng.uniform(0.40, 0.60) * size;
            const double y = rng.uniform(0.40, 0.60) * size;
            pts_a.push_back({x, y});
            pts_b.push_back(warped.point_map.apply(x, y));
        }
        const auto fa = extract_group_features(img, pts_a, grid, bb, mask_a, 4);
        const auto fb = extract_group_features(warped.image, pts_b, grid, bb, mask_b, 4);
        for (std::size_t p = 0; p < pts_a.size(); ++p) {
            for (int a = 0; a < grid.n_s; ++a)
                for (int b = 0; b < grid.n_r; ++b) {
                    const GroupElement gh = compose(grid.element(a, b), h);
                    if (!grid.in_grid(gh)) continue;
                    const auto [a2, b2] = grid.index_of(gh);
                    if (!fb[p].validity[static_cast<std::size_t>(a) * grid.n_r + b]) continue;
                    if (!fa[p].validity[static_cast<std::size_t>(a2) * grid.n_r + b2]) continue;
                    const double ref = cell_norm(fa[p].values, a2, b2);
                    const double diff = cell_dist(fb[p].values, a, b, fa[p].values, a2, b2);
                    r.max_err = std::max(r.max_err, diff / std::max(ref, 1e-12));
                    ++compared;
                }
        }
    }
    std::ostringstream oss;
    oss << "10 warped images, " << compared << " feature cells";
    r.detail = oss.str();
    r.pass = r.max_err <= 0.1;
    return r;
}

SuiteResult suite_pooling_average() {
    Rng rng(505);
    SuiteResult r{"pooling-average", 0.0, true, ""};
    for (int trial = 0; trial < 100; ++trial) {
        const int n_s = static_cast<int>(rng.uniform_int(3, 7));
        const int n_r = 2 * static_cast<int>(rng.uniform_int(1, 3)) + 1;
        const GroupGrid grid = GroupGrid::make(n_s, n_r);
        const int ch = static_cast<int>(rng.uniform_int(1, 8));
        GroupFeature f = synthetic_feature(grid, ch, 0, rng);
        GroupFeature ones;
        ones.values = Tensor::full({n_s, n_r, 1}, 1.0 / grid.cells());
        ones.validity.assign(static_cast<std::size_t>(grid.cells()), true);
        const Tensor pooled = bilinear_pool(f, ones);
        const Tensor avg = pool_variant(f, PoolMode::average);
        for (int c = 0; c < ch; ++c)
            r.max_err = std::max(r.max_err,
                                 std::abs(pooled.data()[c] - avg.data()[c]));
    }
    r.detail = "100 features, constant second branch vs average pooling";
    r.pass = r.max_err <= 1e-12;
    return r;
}

SuiteResult suite_gradient() {
    Rng rng(606);
    SuiteResult r{"gradients", 0.0, true, ""};
    std::vector<FdCase> cases;

    {
        Tensor x = random_leaf({1, 3, 5, 6}, rng);
        Tensor w = random_leaf({4, 3, 3, 3}, rng);
        Tensor b = random_leaf({4}, rng);
        Tensor k = random_constant({1, 4, 5, 6}, rng);
        cases.push_back({"conv2d s1p1", {x, w, b},
                         [=] { return sum_all(mul(conv2d(x, w, b, 1, 1), k)); }});
    }
    {
        Tensor x = random_leaf({1, 2, 7, 7}, rng);
        Tensor w = random_leaf({3, 2, 3, 3}, rng);
        Tensor b = random_leaf({3}, rng);
        Tensor k = random_constant({1, 3, 3, 3}, rng);
        cases.push_back({"conv2d s2p0", {x, w, b},
                         [=] { return sum_all(mul(conv2d(x, w, b, 2, 0), k)); }});
    }
    {
        Tensor x = random_leaf({1, 3, 6, 5}, rng);
        Tensor g = random_leaf({3}, rng);
        Tensor b = random_leaf({3}, rng);
        Tensor k = random_constant({1, 3, 6, 5}, rng);
        cases.push_back({"instance_norm", {x, g, b},
                         [=] { return sum_all(mul(instance_norm(x, g, b, 1e-5), k)); }});
    }
    {
        Tensor x = random_leaf({1, 2, 6, 6}, rng);
        Tensor g = random_leaf({2}, rng);
        Tensor b = random_leaf({2}, rng);
        Tensor mask = Tensor::zeros({1, 1, 6, 6});
        for (std::int64_t i = 0; i < 36; ++i) mask.data()[i] = rng.uniform() < 0.6 ? 1.0 : 0.0;
        mask.data()[0] = mask.data()[7] = 1.0; // keep at least two valid cells
        Tensor k = random_constant({1, 2, 6, 6}, rng);
        cases.push_back({"instance_norm masked", {x, g, b},
                         [=] { return sum_all(mul(instance_norm(x, g, b, 1e-5, mask), k)); }});
    }
    {
        Tensor x = Tensor::zeros({2, 3, 4}, true);
        for (std::int64_t i = 0; i < x.numel(); ++i) {
            const double sign = rng.uniform() < 0.5 ? -1.0 : 1.0;
            x.data()[i] = sign * rng.uniform(0.05, 1.0); // stay away from the kink
        }
        Tensor k = random_constant({2, 3, 4}, rng);
        cases.push_back({"relu", {x}, [=] { return sum_all(mul(relu(x), k)); }});
    }
    {
        Tensor x = random_leaf({1, 3, 6, 8}, rng);
        Tensor k = random_constant({1, 3, 3, 4}, rng);
        cases.push_back({"avg_pool2d", {x},
                         [=] { return sum_all(mul(avg_pool2d(x, 2, 2), k)); }});
    }
    {
        Tensor a = random_leaf({4, 3}, rng);
        Tensor b = random_leaf({4, 5}, rng);
        Tensor k = random_constant({3, 5}, rng);
        cases.push_back({"matmul+transpose", {a, b},
                         [=] { return sum_all(mul(matmul(transpose2d(a), b), k)); }});
    }
    {
        Tensor map = random_leaf({3, 5, 6}, rng);
        Tensor k1 = random_constant({3}, rng);
        Tensor k2 = random_constant({3}, rng);
        cases.push_back({"bilinear_sample", {map}, [=] {
                             Tensor s1 = bilinear_sample(map, 2.3, 1.7);
                             Tensor s2 = bilinear_sample(map, 0.2, 3.9);
                             return sum_all(add(mul(s1, k1), mul(s2, k2)));
                         }});
    }
    {
        Tensor f = random_leaf({5, 5, 4}, rng);
        Tensor w = random_leaf({3, 4, 3, 3}, rng);
        Tensor b = random_leaf({3}, rng);
        Tensor k = random_constant({5, 5, 3}, rng);
        cases.push_back({"group_stencil_conv", {f, w, b},
                         [=] { return sum_all(mul(group_stencil_conv(f, w, b), k)); }});
    }
    {
        Tensor v = random_leaf({7}, rng);
        v.data()[0] += 2.0; // keep the norm comfortably non-zero
        Tensor k = random_constant({7}, rng);
        cases.push_back({"l2_normalize", {v},
                         [=] { return sum_all(mul(l2_normalize(v), k)); }});
    }
    {
        Tensor a = random_leaf({9}, rng);
        Tensor b = random_leaf({9}, rng);
        cases.push_back({"l2_distance", {a, b}, [=] { return l2_distance(a, b); }});
    }
    {
        Tensor x = Tensor::zeros({6}, true);
        for (int i = 0; i < 6; ++i) x.data()[i] = rng.uniform(0.1, 2.0);
        Tensor k = random_constant({6}, rng);
        cases.push_back({"sqrt_elem", {x}, [=] { return sum_all(mul(sqrt_elem(x), k)); }});
    }
    {
        Tensor x = random_leaf({5, 4}, rng);
        Tensor k = random_constant({4}, rng);
        cases.push_back({"max_over_rows", {x},
                         [=] { return sum_all(mul(max_over_rows(x), k)); }});
    }

    std::string worst_name;
    for (auto& c : cases) {
        const double err = run_fd_case(c);
        if (err > r.max_err) {
            r.max_err = err;
            worst_name = c.name;
        }
    }

    { // whole pipeline: image -> group features -> descriptors -> triplet loss
        Rng crng(20240811);
        const GroupGrid grid = GroupGrid::make(3, 3);
        const Tensor img = smooth_texture(crng, 32);
        GiftModel model = GiftModel::init(crng, 1, grid);
        const std::vector<std::pair<double, double>> pts = {
            {10.2, 12.7}, {20.4, 9.3}, {16.8, 21.1}};
        FdCase chain;
        chain.name = "full chain";
        chain.leaves = {model.backbone.conv1_w, model.backbone.in1_g, model.backbone.in1_b,
                        model.backbone.conv4_w, model.alpha[0].weight, model.alpha[0].bias,
                        model.beta[0].weight};
        chain.forward = [&model, img, pts, grid] {
            const auto feats = extract_group_features(img, pts, grid, model.backbone);
            const Descriptor d0 = descriptor_forward(model, feats[0]);
            const Descriptor d1 = descriptor_forward(model, feats[1]);
            const Descriptor d2 = descriptor_forward(model, feats[2]);
            return triplet_loss({d0.values}, {d1.values}, {d2.values}, 0.5);
        };
        // small step: perturbing an early-layer weight moves every cell of 25
        // warped planes, and any cell that lands within eps of a ReLU corner
        // biases the central difference; the bias shrinks quadratically in eps
        chain.eps = 2e-6;
        chain.coords_per_leaf = 2;
        const double err = run_fd_case(chain);
        if (err > r.max_err) {
            r.max_err = err;
            worst_name = chain.name;
        }
    }

    r.detail = "13 primitive cases plus the full descriptor chain";
    if (!worst_name.empty()) r.detail += ", worst: " + worst_name;
    r.pass = r.max_err <= 1e-4;
    return r;
}

SuiteResult suite_descriptor_norm() {
    Rng rng(707);
    SuiteResult r{"descriptor-norm", 0.0, true, ""};
    const GroupGrid grid = GroupGrid::make();
    GiftModel model = GiftModel::init(rng, 2, grid);
    for (int trial = 0; trial < 100; ++trial) {
        GroupFeature f = synthetic_feature(grid, kBackboneOutChannels, 0, rng);
        const Descriptor d = descriptor_forward(model, f);
        if (d.degenerate) r.pass = false;
        double norm = 0.0;
        for (std::int64_t i = 0; i < d.values.numel(); ++i)
            norm += d.values.data()[i] * d.values.data()[i];
        r.max_err = std::max(r.max_err, std::abs(std::sqrt(norm) - 1.0));
    }
    { // the all-zero feature must come back flagged, not divided by zero
        GroupFeature z;
        z.values = Tensor::zeros({grid.n_s, grid.n_r, kBackboneOutChannels});
        z.validity.assign(static_cast<std::size_t>(grid.cells()), false);
        const Descriptor d = descriptor_forward(model, z);
        if (!d.degenerate) r.pass = false;
        for (std::int64_t i = 0; i < d.values.numel(); ++i)
            if (d.values.data()[i] != 0.0) r.pass = false;
    }
    r.detail = "100 descriptors unit-length, zero feature flagged degenerate";
    r.pass = r.pass && r.max_err <= 1e-9;
    return r;
}

std::vector<SuiteResult> run_all_suites() {
    return {suite_feature_shift(),     suite_gconv_equivariance(),
            suite_descriptor_invariance(), suite_e2e_equivariance(),
            suite_pooling_average(),   suite_gradient(),
            suite_descriptor_norm()};
}

} // namespace gift
