#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "gift/rng.hpp"
#include "gift/tensor.hpp"

namespace testutil {

inline gift::Tensor random_tensor(std::vector<std::int64_t> shape, gift::Rng& rng,
                                  double lo = -1.0, double hi = 1.0,
                                  bool requires_grad = false) {
    gift::Tensor t = gift::Tensor::zeros(std::move(shape), requires_grad);
    for (std::int64_t i = 0; i < t.numel(); ++i) t.data()[i] = rng.uniform(lo, hi);
    return t;
}

inline double max_abs_diff(const gift::Tensor& a, const gift::Tensor& b) {
    if (a.shape() != b.shape()) return 1e300;
    double worst = 0.0;
    for (std::int64_t i = 0; i < a.numel(); ++i)
        worst = std::max(worst, std::abs(a.data()[i] - b.data()[i]));
    return worst;
}

// Plain six-loop cross-correlation, written independently of the library so
// the two implementations can check each other.
inline gift::Tensor conv2d_oracle(const gift::Tensor& input, const gift::Tensor& weight,
                                  const gift::Tensor& bias, int stride, int padding) {
    const std::int64_t N = input.dim(0), C = input.dim(1), H = input.dim(2), W = input.dim(3);
    const std::int64_t OC = weight.dim(0), KH = weight.dim(2), KW = weight.dim(3);
    const std::int64_t OH = (H + 2 * padding - KH) / stride + 1;
    const std::int64_t OW = (W + 2 * padding - KW) / stride + 1;
    gift::Tensor out = gift::Tensor::zeros({N, OC, OH, OW});
    for (std::int64_t n = 0; n < N; ++n)
        for (std::int64_t oc = 0; oc < OC; ++oc)
            for (std::int64_t oy = 0; oy < OH; ++oy)
                for (std::int64_t ox = 0; ox < OW; ++ox) {
                    double acc = bias.defined() ? bias.data()[oc] : 0.0;
                    for (std::int64_t ic = 0; ic < C; ++ic)
                        for (std::int64_t ky = 0; ky < KH; ++ky)
                            for (std::int64_t kx = 0; kx < KW; ++kx) {
                                const std::int64_t iy = oy * stride + ky - padding;
                                const std::int64_t ix = ox * stride + kx - padding;
                                if (iy < 0 || iy >= H || ix < 0 || ix >= W) continue;
                                acc += input.data()[((n * C + ic) * H + iy) * W + ix] *
                                       weight.data()[((oc * C + ic) * KH + ky) * KW + kx];
                            }
                    out.data()[((n * OC + oc) * OH + oy) * OW + ox] = acc;
                }
    return out;
}

// Central finite differences against the recorded tape. forward() must
// rebuild the whole graph from the leaf tensors so perturbed data is seen.
inline double fd_max_rel_error(std::vector<gift::Tensor> leaves,
                               const std::function<gift::Tensor()>& forward,
                               double eps = 1e-5, int coords_per_leaf = 24) {
    gift::Tensor loss = forward();
    for (auto& leaf : leaves) leaf.zero_grad();
    gift::backward(loss);
    double worst = 0.0;
    for (auto& leaf : leaves) {
        const double* g = leaf.grad_data();
        const std::int64_t n = leaf.numel();
        const std::int64_t step = std::max<std::int64_t>(1, n / coords_per_leaf);
        for (std::int64_t i = 0; i < n; i += step) {
            const double saved = leaf.data()[i];
            leaf.data()[i] = saved + eps;
            const double fp = forward().scalar();
            leaf.data()[i] = saved - eps;
            const double fm = forward().scalar();
            leaf.data()[i] = saved;
            const double numeric = (fp - fm) / (2.0 * eps);
            const double analytic = g ? g[i] : 0.0;
            const double rel = std::abs(analytic - numeric) /
                               std::max({std::abs(analytic), std::abs(numeric), 1e-4});
            worst = std::max(worst, rel);
        }
    }
    return worst;
}

// Smooth low-frequency test image: a few plane waves per channel, values
// kept away from 0 and 1 so resampling stays in range.
inline gift::Tensor smooth_image(gift::Rng& rng, std::int64_t h, std::int64_t w) {
    gift::Tensor img = gift::Tensor::zeros({3, h, w});
    double* d = img.data();
    for (int c = 0; c < 3; ++c)
        for (int k = 0; k < 3; ++k) {
            const double fx = rng.uniform(-0.18, 0.18);
            const double fy = rng.uniform(-0.18, 0.18);
            const double ph = rng.uniform(0.0, 6.28318530717958647692);
            const double amp = 0.3 / (k + 1);
            for (std::int64_t y = 0; y < h; ++y)
                for (std::int64_t x = 0; x < w; ++x)
                    d[(c * h + y) * w + x] +=
                        amp * std::sin(fx * static_cast<double>(x) +
                                       fy * static_cast<double>(y) + ph);
        }
    for (std::int64_t i = 0; i < img.numel(); ++i)
        d[i] = std::clamp(0.5 + d[i], 0.05, 0.95);
    return img;
}

} // namespace testutil
