#pragma once

#include <string>
#include <vector>

#include "gift/backbone.hpp"
#include "gift/group.hpp"

namespace gift {

/// Feature of one interest point over the sampled group grid.
/// values has shape [n_s, n_r, C]; validity[a*n_r+b] is false where the
/// transformed point fell outside the warped canvas (those cells hold zeros).
struct GroupFeature {
    Tensor values;
    double x = 0.0, y = 0.0;
    std::vector<bool> validity;
};

struct GroupConvLayer {
    Tensor weight; // [out_ch, in_ch, 3, 3], 3x3 stencil over neighborhood offsets
    Tensor bias;   // [out_ch]
};

struct Descriptor {
    Tensor values; // [128], unit norm unless degenerate
    double x = 0.0, y = 0.0;
    bool degenerate = false;
};

inline constexpr int kAlphaChannels = 8;
inline constexpr int kBetaChannels = 16;
inline constexpr int kDescriptorDim = kAlphaChannels * kBetaChannels;

/// Whole model: backbone plus the two group-convolution branches.
struct GiftModel {
    GroupGrid grid;
    int depth = 6;
    BackboneParams backbone;
    std::vector<GroupConvLayer> alpha; // 32 -> 8 -> 8 ...
    std::vector<GroupConvLayer> beta;  // 32 -> 16 -> 16 ...

    static GiftModel init(Rng& rng, int depth = 6, const GroupGrid& grid = GroupGrid::make());
    NamedTensors named_parameters() const;
    void save(const std::string& path) const;
    static GiftModel load(const std::string& path);
};

/// Eq.-(1) stage: for every grid element g, warp the image (and the optional
/// validity mask), run the backbone once, and bilinear-sample the feature map
/// at T_g(p)/D for every point p. Returns one GroupFeature per point.
std::vector<GroupFeature> extract_group_features(const Tensor& image,
                                                 const std::vector<std::pair<double, double>>& points,
                                                 const GroupGrid& grid,
                                                 const BackboneParams& backbone,
                                                 const Tensor& src_mask = Tensor(),
                                                 int workers = 1);

/// One group-convolution layer: 3x3 stencil over neighborhood offsets with
/// zero padding outside the grid, then ReLU.
GroupFeature group_conv_forward(const GroupFeature& f, const GroupConvLayer& layer);

/// depth chained group convolutions of one branch.
GroupFeature group_cnn(const GroupFeature& f0, const std::vector<GroupConvLayer>& branch);

/// Sum over grid cells of outer products, flattened row-major to
/// [alpha_ch * beta_ch]. Not normalized.
Tensor bilinear_pool(const GroupFeature& fa, const GroupFeature& fb);

enum class PoolMode { average, max };

/// Ablation pooling: per-channel mean or max over the grid cells.
Tensor pool_variant(const GroupFeature& f, PoolMode mode);

/// d / ||d||2 with the degenerate-zero flag.
Descriptor normalize_descriptor(const Tensor& pooled, double x, double y);

/// f0 -> both branches -> bilinear pool -> normalize.
Descriptor descriptor_forward(const GiftModel& model, const GroupFeature& f0);

/// Convenience: full image -> descriptors at the given points.
std::vector<Descriptor> compute_descriptors(const GiftModel& model, const Tensor& image,
                                            const std::vector<std::pair<double, double>>& points,
                                            int workers = 1);

/// Synthetic-shift helper for the equivariance suites: f'(g) = f(g o h) with
/// zeros where g o h leaves the grid. Bit-exact indexing, no arithmetic.
Tensor shift_group_feature(const Tensor& values, GroupElement h, const GroupGrid& grid);

// Descriptor batch file layout: u32 count, u32 dim, then per record:
// f64 x, f64 y, dim f64 values. All little-endian.
struct DescriptorRecord {
    double x = 0.0, y = 0.0;
    std::vector<double> values;
};

void write_descriptor_batch(const std::string& path, const std::vector<DescriptorRecord>& recs,
                            std::uint32_t dim = kDescriptorDim);
std::vector<DescriptorRecord> read_descriptor_batch(const std::string& path, std::uint32_t* dim_out = nullptr);

} // namespace gift
