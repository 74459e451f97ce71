#pragma once

#include <array>

#include "mgnet/nn.hpp"

namespace mgnet {

inline constexpr std::array<double, 3> kScaleSet = {0.7, 1.0, 1.2};

// Snap a rescaled dimension to the stride-32 grid. Errors when the raw
// rescaled extent would fall below 32 pixels.
int64_t snapped_scale_dim(int64_t dim, double scale);

struct ScaleImages {
    Tensor s07, s10, s12;
};

// image is NCHW with H, W multiples of 32; the 1.0x entry is the input itself.
ScaleImages make_scale_set(const Tensor& image);

// Per-level fusion block. The 1.0x path (branch_mid) always exists; the
// 0.7x/1.2x branches and the attention generator only when multi-scale is on,
// so the F ablation genuinely removes parameters.
struct ScaleFusion {
    int channels = 0;
    bool multi_scale = true;

    ConvBnRelu mid;                       // zeta_2: one 3x3 CBR
    ConvBnRelu high_a, high_b;            // zeta_1: 3x3 then 5x5, then pooled downsample
    ConvBnRelu low_a, low_b;              // zeta_3: two 3x3, then bilinear upsample
    ConvBnRelu att1, att2, att3;          // xi: 3C -> C -> C/2 -> C/4
    Conv2d att_out;                       // C/4 -> 3

    ScaleFusion() = default;
    ScaleFusion(int channels, bool multi_scale, Rng& rng);

    Tensor branch_mid(const Tensor& f10, bool training) const;
    Tensor branch_high(const Tensor& f12, int64_t target_h, int64_t target_w, bool training) const;
    Tensor branch_low(const Tensor& f07, int64_t target_h, int64_t target_w, bool training) const;

    // Softmax attention over [1.2x, 1.0x, 0.7x] logit channels (that order).
    Tensor attention(const Tensor& b12, const Tensor& b10, const Tensor& b07, bool training) const;
    Tensor fuse(const Tensor& b12, const Tensor& b10, const Tensor& b07, bool training) const;

    // Test hook: make the generator emit a fixed one-hot attention
    // (0 = 1.2x, 1 = 1.0x, 2 = 0.7x) regardless of input.
    void force_attention(int scale_index);

    void params(NamedTensors& out, const std::string& prefix) const;
    void buffers(NamedTensors& out, const std::string& prefix) const;
};

}  // namespace mgnet
