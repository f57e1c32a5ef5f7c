#include "gift/backbone.hpp"

#include <cmath>

#include "gift/errors.hpp"

namespace gift {

namespace {

Tensor kaiming_conv(Rng& rng, std::int64_t oc, std::int64_t ic, std::int64_t k) {
    const double bound = std::sqrt(6.0 / static_cast<double>(ic * k * k));
    Tensor w = Tensor::zeros({oc, ic, k, k}, true);
    double* p = w.data();
    for (std::int64_t i = 0; i < w.numel(); ++i) p[i] = rng.uniform(-bound, bound);
    return w;
}

/// Binary erosion with a (2r+1)^2 square element. Pixels outside the plane
/// count as invalid, so the border of an all-ones mask erodes too; this keeps
/// statistics away from convolution edge effects regardless of whether the
/// content boundary is the canvas edge or an interior mask edge. Separable.
Tensor erode_mask(const Tensor& mask, int r) {
    const std::int64_t H = mask.dim(1), W = mask.dim(2);
    Tensor tmp = Tensor::zeros({1, H, W});
    Tensor out = Tensor::zeros({1, H, W});
    const double* src = mask.data();
    double* t = tmp.data();
    for (std::int64_t y = 0; y < H; ++y)
        for (std::int64_t x = 0; x < W; ++x) {
            double m = 1.0;
            for (int d = -r; d <= r; ++d) {
                const std::int64_t xx = x + d;
                if (xx < 0 || xx >= W) {
                    m = 0.0;
                    break;
                }
                m = std::min(m, src[y * W + xx]);
            }
            t[y * W + x] = m;
        }
    double* o = out.data();
    for (std::int64_t y = 0; y < H; ++y)
        for (std::int64_t x = 0; x < W; ++x) {
            double m = 1.0;
            for (int d = -r; d <= r; ++d) {
                const std::int64_t yy = y + d;
                if (yy < 0 || yy >= H) {
                    m = 0.0;
                    break;
                }
                m = std::min(m, t[yy * W + x]);
            }
            o[y * W + x] = m;
        }
    return out;
}

/// [1,1,H,W] 0/1 plane replicated to [1,C,H,W], detached from the tape.
Tensor tile_mask(const Tensor& mask, std::int64_t channels) {
    const std::int64_t H = mask.dim(2), W = mask.dim(3);
    Tensor out = Tensor::zeros({1, channels, H, W});
    for (std::int64_t c = 0; c < channels; ++c)
        std::copy(mask.data(), mask.data() + H * W, out.data() + c * H * W);
    return out;
}

Tensor min_pool_mask(const Tensor& mask, int window, int stride) {
    const std::int64_t H = mask.dim(2), W = mask.dim(3); // [1,1,H,W]
    const std::int64_t OH = (H - window) / stride + 1;
    const std::int64_t OW = (W - window) / stride + 1;
    Tensor out = Tensor::zeros({1, 1, OH, OW});
    const double* src = mask.data();
    double* dst = out.data();
    for (std::int64_t oh = 0; oh < OH; ++oh)
        for (std::int64_t ow = 0; ow < OW; ++ow) {
            double m = 1.0;
            for (int dy = 0; dy < window; ++dy)
                for (int dx = 0; dx < window; ++dx)
                    m = std::min(m, src[(oh * stride + dy) * W + ow * stride + dx]);
            dst[oh * OW + ow] = m;
        }
    return out;
}

double mask_count(const Tensor& mask) {
    double c = 0.0;
    const double* p = mask.data();
    for (std::int64_t i = 0; i < mask.numel(); ++i)
        if (p[i] > 0.5) c += 1.0;
    return c;
}

} // namespace

BackboneParams init_backbone(Rng& rng) {
    BackboneParams p;
    p.conv1_w = kaiming_conv(rng, 16, 3, 3);
    p.conv1_b = Tensor::zeros({16}, true);
    p.in1_g = Tensor::full({16}, 1.0, true);
    p.in1_b = Tensor::zeros({16}, true);
    p.conv2_w = kaiming_conv(rng, 16, 16, 3);
    p.conv2_b = Tensor::zeros({16}, true);
    p.in2_g = Tensor::full({16}, 1.0, true);
    p.in2_b = Tensor::zeros({16}, true);
    p.conv3_w = kaiming_conv(rng, 32, 16, 3);
    p.conv3_b = Tensor::zeros({32}, true);
    p.in3_g = Tensor::full({32}, 1.0, true);
    p.in3_b = Tensor::zeros({32}, true);
    p.conv4_w = kaiming_conv(rng, 32, 32, 3);
    p.conv4_b = Tensor::zeros({32}, true);
    p.in4_g = Tensor::full({32}, 1.0, true);
    p.in4_b = Tensor::zeros({32}, true);
    return p;
}

void append_backbone_params(NamedTensors& out, const BackboneParams& p) {
    out.emplace_back("backbone.conv1.weight", p.conv1_w);
    out.emplace_back("backbone.conv1.bias", p.conv1_b);
    out.emplace_back("backbone.in1.gamma", p.in1_g);
    out.emplace_back("backbone.in1.beta", p.in1_b);
    out.emplace_back("backbone.conv2.weight", p.conv2_w);
    out.emplace_back("backbone.conv2.bias", p.conv2_b);
    out.emplace_back("backbone.in2.gamma", p.in2_g);
    out.emplace_back("backbone.in2.beta", p.in2_b);
    out.emplace_back("backbone.conv3.weight", p.conv3_w);
    out.emplace_back("backbone.conv3.bias", p.conv3_b);
    out.emplace_back("backbone.in3.gamma", p.in3_g);
    out.emplace_back("backbone.in3.beta", p.in3_b);
    out.emplace_back("backbone.conv4.weight", p.conv4_w);
    out.emplace_back("backbone.conv4.bias", p.conv4_b);
    out.emplace_back("backbone.in4.gamma", p.in4_g);
    out.emplace_back("backbone.in4.beta", p.in4_b);
}

BackboneParams backbone_from_checkpoint(const NamedTensors& tensors) {
    auto grab = [&](const char* name) {
        Tensor t = find_tensor(tensors, name);
        t.node()->requires_grad = true;
        return t;
    };
    BackboneParams p;
    p.conv1_w = grab("backbone.conv1.weight");
    p.conv1_b = grab("backbone.conv1.bias");
    p.in1_g = grab("backbone.in1.gamma");
    p.in1_b = grab("backbone.in1.beta");
    p.conv2_w = grab("backbone.conv2.weight");
    p.conv2_b = grab("backbone.conv2.bias");
    p.in2_g = grab("backbone.in2.gamma");
    p.in2_b = grab("backbone.in2.beta");
    p.conv3_w = grab("backbone.conv3.weight");
    p.conv3_b = grab("backbone.conv3.bias");
    p.in3_g = grab("backbone.in3.gamma");
    p.in3_b = grab("backbone.in3.beta");
    p.conv4_w = grab("backbone.conv4.weight");
    p.conv4_b = grab("backbone.conv4.bias");
    p.in4_g = grab("backbone.in4.gamma");
    p.in4_b = grab("backbone.in4.beta");
    return p;
}

Tensor backbone_forward(const BackboneParams& p, const Tensor& image, const Tensor& mask) {
    const auto& s = image.shape();
    if (s.size() != 3 || s[0] != 3)
        throw shape_error("backbone_forward expects a [3,H,W] image");
    const std::int64_t H = s[1], W = s[2];
    if (H < 16 || W < 16)
        throw shape_error("backbone_forward: image " + std::to_string(W) + "x" + std::to_string(H) +
                          " is below the 16x16 minimum");

    // zero_* carry the raw validity (features outside are forced to zero so
    // invalid regions act exactly like the zero padding the convolutions see
    // at the canvas edge); stats_* are eroded so normalization statistics are
    // collected away from convolution boundary effects.
    Tensor zero_full, zero_half, stats_full, stats_half;
    if (mask.defined()) {
        if (mask.shape() != std::vector<std::int64_t>{1, H, W})
            throw shape_error("backbone_forward: mask must be [1,H,W]");
        Tensor z = reshape(mask, {1, 1, H, W});
        // a nearly-empty mask would make the statistics meaningless
        if (mask_count(z) >= 25.0) {
            zero_full = z;
            zero_half = min_pool_mask(z, 2, 2);
            stats_full = reshape(erode_mask(mask, 3), {1, 1, H, W});
            if (mask_count(stats_full) < 25.0) stats_full = zero_full;
            // erode again at half resolution: the boundary band the later
            // convolutions corrupt is measured in half-res cells, so pooling
            // the full-res eroded mask alone leaves too thin a margin
            Tensor half = reshape(zero_half, {1, zero_half.dim(2), zero_half.dim(3)});
            stats_half = reshape(erode_mask(half, 3),
                                 {1, 1, zero_half.dim(2), zero_half.dim(3)});
            if (mask_count(stats_half) < 25.0) stats_half = zero_half;
        }
    }

    Tensor x = reshape(image, {1, 3, H, W});
    x = relu(instance_norm(conv2d(x, p.conv1_w, p.conv1_b, 1, 1), p.in1_g, p.in1_b, kNormEps,
                           stats_full));
    if (zero_full.defined()) x = mul(x, tile_mask(zero_full, 16));
    x = relu(instance_norm(conv2d(x, p.conv2_w, p.conv2_b, 1, 1), p.in2_g, p.in2_b, kNormEps,
                           stats_full));
    if (zero_full.defined()) x = mul(x, tile_mask(zero_full, 16));
    x = avg_pool2d(x, 2, 2);
    x = relu(instance_norm(conv2d(x, p.conv3_w, p.conv3_b, 1, 1), p.in3_g, p.in3_b, kNormEps,
                           stats_half));
    if (zero_half.defined()) x = mul(x, tile_mask(zero_half, 32));
    x = relu(instance_norm(conv2d(x, p.conv4_w, p.conv4_b, 1, 1), p.in4_g, p.in4_b, kNormEps,
                           stats_half));
    if (zero_half.defined()) x = mul(x, tile_mask(zero_half, 32));
    const auto& os = x.shape();
    return reshape(x, {os[1], os[2], os[3]});
}

} // namespace gift
