#pragma once

#include <array>
#include <cstdint>
#include <utility>
#include <vector>

#include "gift/rng.hpp"
#include "gift/tensor.hpp"

namespace gift {

/// Element s^i r^j of the scale/rotation group: i scale steps (each shrinks
/// the image by unit_scale_factor) and j clockwise 45-degree rotations.
/// The group is abelian; composition adds exponents.
struct GroupElement {
    int scale_exp = 0;
    int rot_exp = 0;

    friend bool operator==(const GroupElement&, const GroupElement&) = default;
};

GroupElement compose(GroupElement a, GroupElement b);
GroupElement inverse(GroupElement g);

/// The sampled grid of group elements: scale exponents [0..n_s-1], rotation
/// exponents centered on zero. Grid cell (a,b) <-> exponents
/// (scale_exps[a], rot_exps[b]).
struct GroupGrid {
    int n_s = 5;
    int n_r = 5;
    double unit_scale_factor = 0.0; // set by make(); 2^(1/4) by default
    double unit_rot_radians = 0.0;  // pi/4, clockwise

    static GroupGrid make(int n_s = 5, int n_r = 5, double unit_scale_factor = 0.0);

    int scale_exp(int a) const { return a; }
    int rot_exp(int b) const { return b - (n_r - 1) / 2; }
    GroupElement element(int a, int b) const { return {scale_exp(a), rot_exp(b)}; }
    bool in_grid(GroupElement g) const;
    /// Grid cell for an in-grid element; throws shape_error otherwise.
    std::pair<int, int> index_of(GroupElement g) const;
    int cells() const { return n_s * n_r; }
};

/// The nine stencil offsets {(i,j) : i,j in {-1,0,1}}, row-major in (i,j).
std::array<GroupElement, 9> neighborhood_H();

/// Row-major 2x3 affine map [a b tx; c d ty] sending source pixel coordinates
/// (x, y) to destination coordinates.
struct AffineMap {
    std::array<double, 6> m{1, 0, 0, 0, 1, 0};

    static AffineMap identity() { return {}; }
    std::pair<double, double> apply(double x, double y) const {
        return {m[0] * x + m[1] * y + m[2], m[3] * x + m[4] * y + m[5]};
    }
    AffineMap then(const AffineMap& outer) const; // outer ∘ this
    AffineMap inverted() const;
};

std::pair<double, double> map_point(const AffineMap& pm, double x, double y);

/// Warp an image [C,H,W] by a group element: rotate about the image center,
/// scale by unit_scale_factor^(-i), and place the result centered on a canvas
/// whose sides are the corner bounding box rounded up to a multiple of four.
/// The rounding keeps the pixel (and stride-2 pooling) lattices of composed
/// warps shifted by even integers only, so warping in one step or in several
/// steps samples the content at compatible phases. The identity element is a
/// bit-exact copy. Source-exterior pixels are zero.
/// point_map carries source pixel coordinates to warped ones.
struct WarpResult {
    Tensor image;
    AffineMap point_map;
};

WarpResult warp_image(const Tensor& image, GroupElement g, const GroupGrid& grid);

/// Resample an arbitrary [C,H,W] tensor through an already-computed point map
/// onto a W_out x H_out canvas (used for masks and homography warps).
Tensor warp_by_map(const Tensor& image, const AffineMap& pm, std::int64_t out_h,
                   std::int64_t out_w);

/// 3x3 projective map, row-major, normalized so m[8] == 1.
struct Homography {
    std::array<double, 9> m{1, 0, 0, 0, 1, 0, 0, 0, 1};

    static Homography identity() { return {}; }
    static Homography from_affine(const AffineMap& a);
    std::pair<double, double> apply(double x, double y) const;
    Homography then(const Homography& outer) const; // outer ∘ this
    Homography inverted() const;
    double det() const;
};

/// Deterministic random homography on the given canvas. difficulty in [0,1]
/// bounds the perspective / rotation / scale / translation perturbations;
/// 0 yields the identity. Corners of the warped unit canvas stay within a
/// 2x canvas box (enforced by resampling).
Homography random_homography(Rng& rng, std::int64_t canvas_w, std::int64_t canvas_h,
                             double difficulty);

/// Warp an image through a homography onto the bounding-box canvas of its
/// warped corners. Returns the warped image and the full pixel map (input
/// homography composed with the canvas translation).
struct HomographyWarp {
    Tensor image;
    Homography point_map;
};

HomographyWarp warp_homography(const Tensor& image, const Homography& h);

} // namespace gift
