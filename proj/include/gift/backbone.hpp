#pragma once

#include "gift/checkpoint.hpp"
#include "gift/rng.hpp"
#include "gift/tensor.hpp"

namespace gift {

/// Four 3x3 convolutions with instance norm + ReLU after each, and a 2x2
/// average pool after the second, halving resolution once (D = 2).
/// Channel schedule 3 -> 16 -> 16 -> 32 -> 32.
struct BackboneParams {
    Tensor conv1_w, conv1_b, in1_g, in1_b;
    Tensor conv2_w, conv2_b, in2_g, in2_b;
    Tensor conv3_w, conv3_b, in3_g, in3_b;
    Tensor conv4_w, conv4_b, in4_g, in4_b;
};

inline constexpr int kBackboneOutChannels = 32;
inline constexpr int kBackboneDownsample = 2;
inline constexpr double kNormEps = 1e-5;

/// Kaiming-uniform weights (bound sqrt(6/fan_in)), zero conv bias, gamma 1,
/// beta 0. Deterministic for a given rng state.
BackboneParams init_backbone(Rng& rng);

/// Checkpoint plumbing; names are stable ("backbone.conv1.weight", ...).
void append_backbone_params(NamedTensors& out, const BackboneParams& p);
BackboneParams backbone_from_checkpoint(const NamedTensors& tensors);

/// Forward pass [3,H,W] -> [32,H/2,W/2] (floor division), H, W >= 16.
///
/// mask, when defined, is a [1,H,W] validity plane (1 = real content,
/// 0 = fill). Features at invalid pixels are forced to zero after every
/// normalization so fill regions behave exactly like canvas-edge zero
/// padding, and normalization statistics are computed over the mask eroded
/// by 3 px (canvas borders erode too, keeping statistics clear of
/// convolution edge effects). A nearly-empty mask falls back to full-plane
/// statistics with no zeroing.
Tensor backbone_forward(const BackboneParams& p, const Tensor& image,
                        const Tensor& mask = Tensor());

} // namespace gift
