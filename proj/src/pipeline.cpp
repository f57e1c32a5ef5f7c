#include "gift/pipeline.hpp"

#include <cmath>
#include <cstring>
#include <fstream>

#include "gift/errors.hpp"
#include "gift/util.hpp"

namespace gift {

namespace {

GroupConvLayer init_layer(Rng& rng, std::int64_t oc, std::int64_t ic) {
    const double bound = std::sqrt(6.0 / static_cast<double>(ic * 9));
    GroupConvLayer l;
    l.weight = Tensor::zeros({oc, ic, 3, 3}, true);
    double* p = l.weight.data();
    for (std::int64_t i = 0; i < l.weight.numel(); ++i) p[i] = rng.uniform(-bound, bound);
    l.bias = Tensor::zeros({oc}, true);
    return l;
}

std::string layer_name(const char* branch, std::size_t i, const char* part) {
    return std::string(branch) + "." + std::to_string(i) + "." + part;
}

} // namespace

GiftModel GiftModel::init(Rng& rng, int depth, const GroupGrid& grid) {
    if (depth < 1) throw shape_error("model depth must be >= 1");
    GiftModel m;
    m.grid = grid;
    m.depth = depth;
    m.backbone = init_backbone(rng);
    std::int64_t in_ch = kBackboneOutChannels;
    for (int i = 0; i < depth; ++i) {
        m.alpha.push_back(init_layer(rng, kAlphaChannels, in_ch));
        in_ch = kAlphaChannels;
    }
    in_ch = kBackboneOutChannels;
    for (int i = 0; i < depth; ++i) {
        m.beta.push_back(init_layer(rng, kBetaChannels, in_ch));
        in_ch = kBetaChannels;
    }
    return m;
}

NamedTensors GiftModel::named_parameters() const {
    NamedTensors out;
    append_backbone_params(out, backbone);
    for (std::size_t i = 0; i < alpha.size(); ++i) {
        out.emplace_back(layer_name("alpha", i, "weight"), alpha[i].weight);
        out.emplace_back(layer_name("alpha", i, "bias"), alpha[i].bias);
    }
    for (std::size_t i = 0; i < beta.size(); ++i) {
        out.emplace_back(layer_name("beta", i, "weight"), beta[i].weight);
        out.emplace_back(layer_name("beta", i, "bias"), beta[i].bias);
    }
    return out;
}

void GiftModel::save(const std::string& path) const {
    NamedTensors all;
    all.emplace_back("meta.config",
                     Tensor::from_data({4}, {static_cast<double>(depth),
                                             static_cast<double>(grid.n_s),
                                             static_cast<double>(grid.n_r),
                                             grid.unit_scale_factor}));
    NamedTensors params = named_parameters();
    all.insert(all.end(), params.begin(), params.end());
    save_checkpoint(path, all);
}

GiftModel GiftModel::load(const std::string& path) {
    NamedTensors all = load_checkpoint(path);
    const Tensor& cfg = find_tensor(all, "meta.config");
    if (cfg.numel() != 4) throw format_error(path + ": malformed meta.config record");
    const int depth = static_cast<int>(cfg.data()[0]);
    const int n_s = static_cast<int>(cfg.data()[1]);
    const int n_r = static_cast<int>(cfg.data()[2]);
    const double usf = cfg.data()[3];
    if (depth < 1 || depth > 64 || n_s < 1 || n_r < 1 || !(usf > 0.0))
        throw format_error(path + ": implausible meta.config values");

    GiftModel m;
    m.grid = GroupGrid::make(n_s, n_r, usf);
    m.depth = depth;
    m.backbone = backbone_from_checkpoint(all);
    auto grab = [&](const std::string& name, std::int64_t oc, std::int64_t ic) {
        Tensor w = find_tensor(all, name + ".weight");
        Tensor b = find_tensor(all, name + ".bias");
        if (w.shape() != std::vector<std::int64_t>{oc, ic, 3, 3} ||
            b.shape() != std::vector<std::int64_t>{oc})
            throw format_error(path + ": tensor " + name + " has unexpected shape");
        w.node()->requires_grad = true;
        b.node()->requires_grad = true;
        return GroupConvLayer{w, b};
    };
    std::int64_t in_ch = kBackboneOutChannels;
    for (int i = 0; i < depth; ++i) {
        m.alpha.push_back(grab("alpha." + std::to_string(i), kAlphaChannels, in_ch));
        in_ch = kAlphaChannels;
    }
    in_ch = kBackboneOutChannels;
    for (int i = 0; i < depth; ++i) {
        m.beta.push_back(grab("beta." + std::to_string(i), kBetaChannels, in_ch));
        in_ch = kBetaChannels;
    }
    return m;
}

std::vector<GroupFeature> extract_group_features(const Tensor& image,
                                                 const std::vector<std::pair<double, double>>& points,
                                                 const GroupGrid& grid,
                                                 const BackboneParams& backbone,
                                                 const Tensor& src_mask, int workers) {
    const auto& s = image.shape();
    if (s.size() != 3) throw shape_error("extract_group_features expects [C,H,W]");
    if (points.empty()) return {};
    const std::int64_t n_cells = grid.cells();
    const std::size_t n_pts = points.size();

    // per-cell sampled vectors, filled in parallel: slot = cell * n_pts + point
    std::vector<Tensor> samples(static_cast<std::size_t>(n_cells) * n_pts);
    std::vector<char> valid(static_cast<std::size_t>(n_cells) * n_pts, 0);

    parallel_for(n_cells, workers, [&](std::int64_t cell) {
        const int a = static_cast<int>(cell) / grid.n_r;
        const int b = static_cast<int>(cell) % grid.n_r;
        const GroupElement g = grid.element(a, b);
        WarpResult warped = warp_image(image, g, grid);
        Tensor warped_mask;
        if (src_mask.defined()) {
            Tensor wm = warp_by_map(src_mask, warped.point_map, warped.image.dim(1),
                                    warped.image.dim(2));
            // bilinear smears the mask edge; cut at half coverage so the
            // recovered boundary tracks the true warped polygon edge without
            // a systematic inward bias when masks get warped repeatedly
            double* p = wm.data();
            for (std::int64_t i = 0; i < wm.numel(); ++i) p[i] = p[i] >= 0.5 ? 1.0 : 0.0;
            warped_mask = wm;
        }
        Tensor fmap = backbone_forward(backbone, warped.image, warped_mask);
        const double d = static_cast<double>(kBackboneDownsample);
        for (std::size_t pi = 0; pi < n_pts; ++pi) {
            const auto [tx, ty] = warped.point_map.apply(points[pi].first, points[pi].second);
            bool ok = false;
            Tensor v = bilinear_sample(fmap, tx / d, ty / d, &ok);
            samples[static_cast<std::size_t>(cell) * n_pts + pi] = std::move(v);
            valid[static_cast<std::size_t>(cell) * n_pts + pi] = ok ? 1 : 0;
        }
    });

    std::vector<GroupFeature> out(n_pts);
    for (std::size_t pi = 0; pi < n_pts; ++pi) {
        std::vector<Tensor> rows(static_cast<std::size_t>(n_cells));
        GroupFeature& f = out[pi];
        f.x = points[pi].first;
        f.y = points[pi].second;
        f.validity.resize(static_cast<std::size_t>(n_cells));
        for (std::int64_t cell = 0; cell < n_cells; ++cell) {
            rows[static_cast<std::size_t>(cell)] = samples[static_cast<std::size_t>(cell) * n_pts + pi];
            f.validity[static_cast<std::size_t>(cell)] =
                valid[static_cast<std::size_t>(cell) * n_pts + pi] != 0;
        }
        const std::int64_t c = rows[0].dim(0);
        f.values = reshape(stack_rows(rows), {grid.n_s, grid.n_r, c});
    }
    return out;
}

GroupFeature group_conv_forward(const GroupFeature& f, const GroupConvLayer& layer) {
    GroupFeature out;
    out.x = f.x;
    out.y = f.y;
    out.validity = f.validity;
    out.values = relu(group_stencil_conv(f.values, layer.weight, layer.bias));
    return out;
}

GroupFeature group_cnn(const GroupFeature& f0, const std::vector<GroupConvLayer>& branch) {
    if (branch.empty()) throw shape_error("group_cnn: branch has no layers");
    GroupFeature f = group_conv_forward(f0, branch[0]);
    for (std::size_t i = 1; i < branch.size(); ++i) f = group_conv_forward(f, branch[i]);
    return f;
}

Tensor bilinear_pool(const GroupFeature& fa, const GroupFeature& fb) {
    const auto& sa = fa.values.shape();
    const auto& sb = fb.values.shape();
    if (sa.size() != 3 || sb.size() != 3 || sa[0] != sb[0] || sa[1] != sb[1])
        throw shape_error("bilinear_pool: branch grids differ");
    const std::int64_t n_g = sa[0] * sa[1];
    Tensor a = reshape(fa.values, {n_g, sa[2]});
    Tensor b = reshape(fb.values, {n_g, sb[2]});
    Tensor mat = matmul(transpose2d(a), b); // [ca, cb]
    return reshape(mat, {sa[2] * sb[2]});
}

Tensor pool_variant(const GroupFeature& f, PoolMode mode) {
    const auto& s = f.values.shape();
    const std::int64_t n_g = s[0] * s[1], c = s[2];
    Tensor flat = reshape(f.values, {n_g, c});
    if (mode == PoolMode::max) return max_over_rows(flat);
    Tensor mean = scale(matmul(Tensor::full({1, n_g}, 1.0), flat), 1.0 / static_cast<double>(n_g));
    return reshape(mean, {c});
}

Descriptor normalize_descriptor(const Tensor& pooled, double x, double y) {
    Descriptor d;
    d.x = x;
    d.y = y;
    d.values = l2_normalize(pooled, &d.degenerate);
    return d;
}

Descriptor descriptor_forward(const GiftModel& model, const GroupFeature& f0) {
    GroupFeature fa = group_cnn(f0, model.alpha);
    GroupFeature fb = group_cnn(f0, model.beta);
    return normalize_descriptor(bilinear_pool(fa, fb), f0.x, f0.y);
}

std::vector<Descriptor> compute_descriptors(const GiftModel& model, const Tensor& image,
                                            const std::vector<std::pair<double, double>>& points,
                                            int workers) {
    auto features = extract_group_features(image, points, model.grid, model.backbone, Tensor(),
                                           workers);
    std::vector<Descriptor> out(features.size());
    parallel_for(static_cast<std::int64_t>(features.size()), workers, [&](std::int64_t i) {
        out[static_cast<std::size_t>(i)] = descriptor_forward(model, features[static_cast<std::size_t>(i)]);
    });
    return out;
}

Tensor shift_group_feature(const Tensor& values, GroupElement h, const GroupGrid& grid) {
    const auto& s = values.shape();
    if (s.size() != 3 || s[0] != grid.n_s || s[1] != grid.n_r)
        throw shape_error("shift_group_feature: values do not match the grid");
    const std::int64_t C = s[2];
    Tensor out = Tensor::zeros(s);
    for (int a = 0; a < grid.n_s; ++a)
        for (int b = 0; b < grid.n_r; ++b) {
            const GroupElement gh = compose(grid.element(a, b), h);
            if (!grid.in_grid(gh)) continue;
            const auto [a2, b2] = grid.index_of(gh);
            std::memcpy(out.data() + (static_cast<std::int64_t>(a) * grid.n_r + b) * C,
                        values.data() + (static_cast<std::int64_t>(a2) * grid.n_r + b2) * C,
                        static_cast<std::size_t>(C) * sizeof(double));
        }
    return out;
}

void write_descriptor_batch(const std::string& path, const std::vector<DescriptorRecord>& recs,
                            std::uint32_t dim) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw io_error("cannot open " + path + " for writing");
    const std::uint32_t count = static_cast<std::uint32_t>(recs.size());
    os.write(reinterpret_cast<const char*>(&count), 4);
    os.write(reinterpret_cast<const char*>(&dim), 4);
    for (const auto& r : recs) {
        if (r.values.size() != dim)
            throw shape_error("descriptor record has " + std::to_string(r.values.size()) +
                              " values, expected " + std::to_string(dim));
        os.write(reinterpret_cast<const char*>(&r.x), 8);
        os.write(reinterpret_cast<const char*>(&r.y), 8);
        os.write(reinterpret_cast<const char*>(r.values.data()),
                 static_cast<std::streamsize>(dim * sizeof(double)));
    }
    if (!os) throw io_error("write failed for " + path);
}

std::vector<DescriptorRecord> read_descriptor_batch(const std::string& path, std::uint32_t* dim_out) {
    std::ifstream is(path, std::ios::binary | std::ios::ate);
    if (!is) throw io_error("cannot open " + path);
    const std::int64_t size = static_cast<std::int64_t>(is.tellg());
    is.seekg(0);
    if (size < 8) throw format_error(path + ": corrupt descriptor file, header truncated at offset " +
                                     std::to_string(size));
    std::uint32_t count = 0, dim = 0;
    is.read(reinterpret_cast<char*>(&count), 4);
    is.read(reinterpret_cast<char*>(&dim), 4);
    if (dim == 0 || dim > 1 << 20)
        throw format_error(path + ": corrupt descriptor file, bad dimension at offset 4");
    const std::int64_t expect = 8 + static_cast<std::int64_t>(count) * (16 + 8 * static_cast<std::int64_t>(dim));
    if (size != expect)
        throw format_error(path + ": corrupt descriptor file, expected " + std::to_string(expect) +
                           " bytes but found " + std::to_string(size) + " (offset " +
                           std::to_string(std::min(size, expect)) + ")");
    if (dim_out) *dim_out = dim;
    std::vector<DescriptorRecord> out(count);
    for (auto& r : out) {
        is.read(reinterpret_cast<char*>(&r.x), 8);
        is.read(reinterpret_cast<char*>(&r.y), 8);
        r.values.resize(dim);
        is.read(reinterpret_cast<char*>(r.values.data()),
                static_cast<std::streamsize>(dim * sizeof(double)));
    }
    if (!is) throw format_error(path + ": descriptor file read failed");
    return out;
}

} // namespace gift
