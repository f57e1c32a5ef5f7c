#pragma once

#include <string>

#include "gift/tensor.hpp"

namespace gift {

/// Loads a PNG (8-bit gray/gray+alpha/RGB/RGBA, non-interlaced) or PPM/PGM
/// (P5/P6, maxval 255) image as a [3,H,W] tensor with values in [0,1].
/// Grayscale planes are replicated to three channels; alpha is dropped.
/// Format is chosen by content (magic bytes), not extension.
Tensor load_image(const std::string& path);

/// Writes a [1,H,W] or [3,H,W] tensor (values clamped to [0,1]) as an 8-bit
/// PNG or binary PPM/PGM depending on the path extension (.png vs anything
/// else).
void save_image(const std::string& path, const Tensor& image);

/// Bilinear resize of a [C,H,W] tensor, align-corners-false convention.
Tensor resize_bilinear(const Tensor& image, std::int64_t out_h, std::int64_t out_w);

} // namespace gift
