#include "gift/group.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "gift/errors.hpp"

namespace gift {

namespace {

// cos/sin of k*45 degrees, exact at the representable values
const double kHalfRt2 = std::sqrt(0.5);
const double kCos45[8] = {1.0, kHalfRt2, 0.0, -kHalfRt2, -1.0, -kHalfRt2, 0.0, kHalfRt2};
const double kSin45[8] = {0.0, kHalfRt2, 1.0, kHalfRt2, 0.0, -kHalfRt2, -1.0, -kHalfRt2};

double sample_plane(const double* plane, std::int64_t h, std::int64_t w, double x, double y) {
    if (x < 0.0 || y < 0.0 || x > static_cast<double>(w - 1) || y > static_cast<double>(h - 1))
        return 0.0;
    const std::int64_t x0 = static_cast<std::int64_t>(std::floor(x));
    const std::int64_t y0 = static_cast<std::int64_t>(std::floor(y));
    const double fx = x - static_cast<double>(x0);
    const double fy = y - static_cast<double>(y0);
    double acc = (1.0 - fx) * (1.0 - fy) * plane[y0 * w + x0];
    if (fx != 0.0 && x0 + 1 < w) acc += fx * (1.0 - fy) * plane[y0 * w + x0 + 1];
    if (fy != 0.0 && y0 + 1 < h) acc += (1.0 - fx) * fy * plane[(y0 + 1) * w + x0];
    if (fx != 0.0 && fy != 0.0 && x0 + 1 < w && y0 + 1 < h)
        acc += fx * fy * plane[(y0 + 1) * w + x0 + 1];
    return acc;
}

} // namespace

GroupElement compose(GroupElement a, GroupElement b) {
    return {a.scale_exp + b.scale_exp, a.rot_exp + b.rot_exp};
}

GroupElement inverse(GroupElement g) { return {-g.scale_exp, -g.rot_exp}; }

GroupGrid GroupGrid::make(int n_s, int n_r, double unit_scale_factor) {
    if (n_s < 1 || n_r < 1) throw shape_error("group grid dimensions must be positive");
    GroupGrid g;
    g.n_s = n_s;
    g.n_r = n_r;
    g.unit_scale_factor = unit_scale_factor > 0.0 ? unit_scale_factor : std::pow(2.0, 0.25);
    g.unit_rot_radians = std::numbers::pi / 4.0;
    return g;
}

bool GroupGrid::in_grid(GroupElement g) const {
    const int b = g.rot_exp + (n_r - 1) / 2;
    return g.scale_exp >= 0 && g.scale_exp < n_s && b >= 0 && b < n_r;
}

std::pair<int, int> GroupGrid::index_of(GroupElement g) const {
    if (!in_grid(g))
        throw shape_error("group element (" + std::to_string(g.scale_exp) + "," +
                          std::to_string(g.rot_exp) + ") is outside the sampled grid");
    return {g.scale_exp, g.rot_exp + (n_r - 1) / 2};
}

std::array<GroupElement, 9> neighborhood_H() {
    std::array<GroupElement, 9> h;
    int k = 0;
    for (int i = -1; i <= 1; ++i)
        for (int j = -1; j <= 1; ++j) h[static_cast<std::size_t>(k++)] = {i, j};
    return h;
}

AffineMap AffineMap::then(const AffineMap& o) const {
    AffineMap r;
    r.m[0] = o.m[0] * m[0] + o.m[1] * m[3];
    r.m[1] = o.m[0] * m[1] + o.m[1] * m[4];
    r.m[2] = o.m[0] * m[2] + o.m[1] * m[5] + o.m[2];
    r.m[3] = o.m[3] * m[0] + o.m[4] * m[3];
    r.m[4] = o.m[3] * m[1] + o.m[4] * m[4];
    r.m[5] = o.m[3] * m[2] + o.m[4] * m[5] + o.m[5];
    return r;
}

AffineMap AffineMap::inverted() const {
    const double det = m[0] * m[4] - m[1] * m[3];
    if (std::abs(det) < 1e-12) throw shape_error("affine map is not invertible");
    AffineMap r;
    r.m[0] = m[4] / det;
    r.m[1] = -m[1] / det;
    r.m[3] = -m[3] / det;
    r.m[4] = m[0] / det;
    r.m[2] = -(r.m[0] * m[2] + r.m[1] * m[5]);
    r.m[5] = -(r.m[3] * m[2] + r.m[4] * m[5]);
    return r;
}

std::pair<double, double> map_point(const AffineMap& pm, double x, double y) {
    return pm.apply(x, y);
}

WarpResult warp_image(const Tensor& image, GroupElement g, const GroupGrid& grid) {
    const auto& shape = image.shape();
    if (shape.size() != 3) throw shape_error("warp_image expects [C,H,W]");
    const std::int64_t H = shape[1], W = shape[2];

    if (g.scale_exp == 0 && ((g.rot_exp % 8) + 8) % 8 == 0) {
        // identity element: exact copy, no resampling
        AffineMap pm;
        pm.m = {1, 0, 0, 0, 1, 0};
        Tensor copy = Tensor::from_data(
            image.shape(), std::vector<double>(image.data(), image.data() + image.numel()));
        return {std::move(copy), pm};
    }

    const double sigma = std::pow(grid.unit_scale_factor, -static_cast<double>(g.scale_exp));
    const int k = ((g.rot_exp % 8) + 8) % 8;
    const double a = sigma * kCos45[k], b = -sigma * kSin45[k];
    const double c = sigma * kSin45[k], d = sigma * kCos45[k];
    const double cx = static_cast<double>(W - 1) / 2.0;
    const double cy = static_cast<double>(H - 1) / 2.0;

    // extent of the transformed corner box, rotation taken about the center
    double ex = 0, ey = 0;
    const double half[4][2] = {{-cx, -cy}, {cx, -cy}, {-cx, cy}, {cx, cy}};
    for (int i = 0; i < 4; ++i) {
        ex = std::max(ex, 2.0 * std::abs(a * half[i][0] + b * half[i][1]));
        ey = std::max(ey, 2.0 * std::abs(c * half[i][0] + d * half[i][1]));
    }
    const std::int64_t tight_w = static_cast<std::int64_t>(std::floor(ex)) + 1;
    const std::int64_t tight_h = static_cast<std::int64_t>(std::floor(ey)) + 1;
    if (tight_w < 4 || tight_h < 4)
        throw shape_error("degenerate scale: warp of " + std::to_string(W) + "x" +
                          std::to_string(H) + " by scale exponent " + std::to_string(g.scale_exp) +
                          " yields " + std::to_string(tight_w) + "x" + std::to_string(tight_h));
    // canvas rounded up to a multiple of four with the content centered: any
    // chain of warps then lands on pixel lattices (and stride-2 pooling
    // lattices) that are shifted against each other by even integers only,
    // so composed warps stay comparable sample-for-sample
    const std::int64_t OW = 4 * ((tight_w + 3) / 4);
    const std::int64_t OH = 4 * ((tight_h + 3) / 4);
    const double ocx = static_cast<double>(OW - 1) / 2.0;
    const double ocy = static_cast<double>(OH - 1) / 2.0;

    AffineMap pm;
    pm.m = {a, b, ocx - (a * cx + b * cy), c, d, ocy - (c * cx + d * cy)};

    WarpResult out{warp_by_map(image, pm, OH, OW), pm};
    return out;
}

Tensor warp_by_map(const Tensor& image, const AffineMap& pm, std::int64_t out_h,
                   std::int64_t out_w) {
    const auto& shape = image.shape();
    if (shape.size() != 3) throw shape_error("warp_by_map expects [C,H,W]");
    const std::int64_t C = shape[0], H = shape[1], W = shape[2];
    const AffineMap inv = pm.inverted();
    Tensor out = Tensor::zeros({C, out_h, out_w});
    for (std::int64_t ch = 0; ch < C; ++ch) {
        const double* src = image.data() + ch * H * W;
        double* dst = out.data() + ch * out_h * out_w;
        for (std::int64_t y = 0; y < out_h; ++y) {
            const double fy = static_cast<double>(y);
            for (std::int64_t x = 0; x < out_w; ++x) {
                const auto [sx, sy] = inv.apply(static_cast<double>(x), fy);
                dst[y * out_w + x] = sample_plane(src, H, W, sx, sy);
            }
        }
    }
    return out;
}

Homography Homography::from_affine(const AffineMap& a) {
    Homography h;
    h.m = {a.m[0], a.m[1], a.m[2], a.m[3], a.m[4], a.m[5], 0, 0, 1};
    return h;
}

std::pair<double, double> Homography::apply(double x, double y) const {
    const double w = m[6] * x + m[7] * y + m[8];
    return {(m[0] * x + m[1] * y + m[2]) / w, (m[3] * x + m[4] * y + m[5]) / w};
}

Homography Homography::then(const Homography& o) const {
    Homography r;
    for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 3; ++j) {
            double acc = 0.0;
            for (int k = 0; k < 3; ++k) acc += o.m[static_cast<std::size_t>(i * 3 + k)] *
                                               m[static_cast<std::size_t>(k * 3 + j)];
            r.m[static_cast<std::size_t>(i * 3 + j)] = acc;
        }
    const double s = r.m[8];
    if (std::abs(s) < 1e-12) throw shape_error("homography composition is degenerate");
    for (auto& v : r.m) v /= s;
    return r;
}

double Homography::det() const {
    return m[0] * (m[4] * m[8] - m[5] * m[7]) - m[1] * (m[3] * m[8] - m[5] * m[6]) +
           m[2] * (m[3] * m[7] - m[4] * m[6]);
}

Homography Homography::inverted() const {
    const double dt = det();
    if (std::abs(dt) < 1e-10) throw shape_error("homography is not invertible");
    Homography r;
    r.m[0] = (m[4] * m[8] - m[5] * m[7]) / dt;
    r.m[1] = (m[2] * m[7] - m[1] * m[8]) / dt;
    r.m[2] = (m[1] * m[5] - m[2] * m[4]) / dt;
    r.m[3] = (m[5] * m[6] - m[3] * m[8]) / dt;
    r.m[4] = (m[0] * m[8] - m[2] * m[6]) / dt;
    r.m[5] = (m[2] * m[3] - m[0] * m[5]) / dt;
    r.m[6] = (m[3] * m[7] - m[4] * m[6]) / dt;
    r.m[7] = (m[1] * m[6] - m[0] * m[7]) / dt;
    r.m[8] = (m[0] * m[4] - m[1] * m[3]) / dt;
    const double s = r.m[8];
    if (std::abs(s) < 1e-12) throw shape_error("homography inverse is degenerate");
    for (auto& v : r.m) v /= s;
    return r;
}

Homography random_homography(Rng& rng, std::int64_t canvas_w, std::int64_t canvas_h,
                             double difficulty) {
    if (canvas_w < 32 || canvas_h < 32)
        throw shape_error("random_homography: canvas must be at least 32x32");
    difficulty = std::clamp(difficulty, 0.0, 1.0);
    const double W = static_cast<double>(canvas_w), H = static_cast<double>(canvas_h);
    const double cx = (W - 1.0) / 2.0, cy = (H - 1.0) / 2.0;

    for (int attempt = 0; attempt < 100; ++attempt) {
        const double p1 = rng.uniform(-difficulty, difficulty) * 0.2 / W;
        const double p2 = rng.uniform(-difficulty, difficulty) * 0.2 / H;
        const double ang = rng.uniform(-difficulty, difficulty) * std::numbers::pi / 6.0;
        const double lo = 1.0 / (1.0 + difficulty);
        const double sc = rng.uniform(lo, 1.0 + difficulty);
        const double tx = rng.uniform(-difficulty, difficulty) * 0.2 * W;
        const double ty = rng.uniform(-difficulty, difficulty) * 0.2 * H;

        Homography persp;
        persp.m = {1, 0, 0, 0, 1, 0, p1, p2, 1};
        const double ca = std::cos(ang), sa = std::sin(ang);
        AffineMap rs; // rotation+scale about the canvas center, then translation
        rs.m = {sc * ca, -sc * sa, 0, sc * sa, sc * ca, 0};
        rs.m[2] = cx - (rs.m[0] * cx + rs.m[1] * cy) + tx;
        rs.m[5] = cy - (rs.m[3] * cx + rs.m[4] * cy) + ty;
        Homography h = persp.then(Homography::from_affine(rs));

        if (std::abs(h.det()) < 1e-8) continue;
        bool ok = true;
        const double corners[4][2] = {{0, 0}, {W - 1, 0}, {0, H - 1}, {W - 1, H - 1}};
        for (const auto& cpt : corners) {
            const auto [qx, qy] = h.apply(cpt[0], cpt[1]);
            if (qx < -0.5 * W || qx > 1.5 * W || qy < -0.5 * H || qy > 1.5 * H) ok = false;
        }
        if (ok) return h;
    }
    throw shape_error("random_homography: could not sample a bounded homography");
}

HomographyWarp warp_homography(const Tensor& image, const Homography& h) {
    const auto& shape = image.shape();
    if (shape.size() != 3) throw shape_error("warp_homography expects [C,H,W]");
    const std::int64_t C = shape[0], H = shape[1], W = shape[2];

    double min_x = 0, min_y = 0, max_x = 0, max_y = 0;
    const double corners[4][2] = {{0, 0},
                                  {static_cast<double>(W - 1), 0},
                                  {0, static_cast<double>(H - 1)},
                                  {static_cast<double>(W - 1), static_cast<double>(H - 1)}};
    for (int i = 0; i < 4; ++i) {
        const auto [qx, qy] = h.apply(corners[i][0], corners[i][1]);
        if (i == 0) { min_x = max_x = qx; min_y = max_y = qy; }
        min_x = std::min(min_x, qx); max_x = std::max(max_x, qx);
        min_y = std::min(min_y, qy); max_y = std::max(max_y, qy);
    }
    const std::int64_t OW = static_cast<std::int64_t>(std::floor(max_x - min_x)) + 1;
    const std::int64_t OH = static_cast<std::int64_t>(std::floor(max_y - min_y)) + 1;
    if (OW < 4 || OH < 4) throw shape_error("degenerate scale: homography collapses the canvas");

    Homography shift = Homography::identity();
    shift.m[2] = -min_x;
    shift.m[5] = -min_y;
    const Homography full = h.then(shift);
    const Homography inv = full.inverted();

    Tensor out = Tensor::zeros({C, OH, OW});
    for (std::int64_t ch = 0; ch < C; ++ch) {
        const double* src = image.data() + ch * H * W;
        double* dst = out.data() + ch * OH * OW;
        for (std::int64_t y = 0; y < OH; ++y)
            for (std::int64_t x = 0; x < OW; ++x) {
                const auto [sx, sy] = inv.apply(static_cast<double>(x), static_cast<double>(y));
                dst[y * OW + x] = sample_plane(src, H, W, sx, sy);
            }
    }
    return {std::move(out), full};
}

} // namespace gift
