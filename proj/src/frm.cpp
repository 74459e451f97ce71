#include "mgnet/frm.hpp"

#include <algorithm>
#include <cmath>

namespace mgnet {

int64_t snapped_scale_dim(int64_t dim, double scale) {
    check(dim % 32 == 0, "scale-set input dims must be multiples of 32");
    const double raw = scale * static_cast<double>(dim);
    check(raw >= 32.0, "rescaled dimension collapses below 32 pixels");
    const int64_t units = std::llround(raw / 32.0);
    return std::max<int64_t>(1, units) * 32;
}

ScaleImages make_scale_set(const Tensor& image) {
    check(image.ndim() == 4, "make_scale_set expects an NCHW tensor");
    const int64_t h = image.dim(2), w = image.dim(3);
    ScaleImages out;
    out.s10 = image;  // identity scale returns the input unchanged
    out.s07 = bilinear_resize(image, snapped_scale_dim(h, 0.7), snapped_scale_dim(w, 0.7));
    out.s12 = bilinear_resize(image, snapped_scale_dim(h, 1.2), snapped_scale_dim(w, 1.2));
    return out;
}

ScaleFusion::ScaleFusion(int channels_, bool multi_scale_, Rng& rng)
    : channels(channels_), multi_scale(multi_scale_) {
    mid = ConvBnRelu(channels, channels, 3, 1, 1, rng);
    if (!multi_scale) return;
    high_a = ConvBnRelu(channels, channels, 3, 1, 1, rng);
    high_b = ConvBnRelu(channels, channels, 5, 1, 2, rng);
    low_a = ConvBnRelu(channels, channels, 3, 1, 1, rng);
    low_b = ConvBnRelu(channels, channels, 3, 1, 1, rng);
    const int c1 = channels;
    const int c2 = std::max(1, channels / 2);
    const int c3 = std::max(1, channels / 4);
    att1 = ConvBnRelu(3 * channels, c1, 3, 1, 1, rng);
    att2 = ConvBnRelu(c1, c2, 3, 1, 1, rng);
    att3 = ConvBnRelu(c2, c3, 3, 1, 1, rng);
    att_out = Conv2d(c3, 3, 1, 1, 0, rng);
}

Tensor ScaleFusion::branch_mid(const Tensor& f10, bool training) const {
    return mid.forward(f10, training);
}

Tensor ScaleFusion::branch_high(const Tensor& f12, int64_t target_h, int64_t target_w,
                                bool training) const {
    check(multi_scale, "branch_high requires the multi-scale fusion block");
    Tensor y = high_b.forward(high_a.forward(f12, training), training);
    check(y.dim(2) >= target_h && y.dim(3) >= target_w,
          "branch_high: 1.2x feature smaller than target");
    return add(adaptive_max_pool(y, target_h, target_w),
               adaptive_avg_pool(y, target_h, target_w));
}

Tensor ScaleFusion::branch_low(const Tensor& f07, int64_t target_h, int64_t target_w,
                               bool training) const {
    check(multi_scale, "branch_low requires the multi-scale fusion block");
    Tensor y = low_b.forward(low_a.forward(f07, training), training);
    return bilinear_resize(y, target_h, target_w);
}

Tensor ScaleFusion::attention(const Tensor& b12, const Tensor& b10, const Tensor& b07,
                              bool training) const {
    Tensor cat = concat_channels({b12, b10, b07});
    Tensor a = att1.forward(cat, training);
    a = att2.forward(a, training);
    a = att3.forward(a, training);
    return softmax_channels(att_out.forward(a));
}

Tensor ScaleFusion::fuse(const Tensor& b12, const Tensor& b10, const Tensor& b07,
                         bool training) const {
    check(multi_scale, "fuse requires the multi-scale fusion block");
    check(b12.dim(1) == b10.dim(1) && b10.dim(1) == b07.dim(1),
          "fuse: branch channel counts differ");
    check(b12.dim(2) == b10.dim(2) && b12.dim(3) == b10.dim(3) && b07.dim(2) == b10.dim(2) &&
              b07.dim(3) == b10.dim(3),
          "fuse: branches are not aligned to the 1.0x size");
    Tensor a = attention(b12, b10, b07, training);
    Tensor w12 = slice_channels(a, 0, 1);
    Tensor w10 = slice_channels(a, 1, 2);
    Tensor w07 = slice_channels(a, 2, 3);
    return add(add(mul(b12, w12), mul(b10, w10)), mul(b07, w07));
}

void ScaleFusion::force_attention(int scale_index) {
    check(multi_scale, "force_attention requires the multi-scale fusion block");
    check(scale_index >= 0 && scale_index < 3, "force_attention: index out of range");
    std::fill(att_out.weight.vec().begin(), att_out.weight.vec().end(), 0.0);
    // +-1000 logits underflow to an exact one-hot after max-subtracted softmax
    for (int c = 0; c < 3; ++c) att_out.bias.data()[c] = c == scale_index ? 1000.0 : -1000.0;
}

void ScaleFusion::params(NamedTensors& out, const std::string& prefix) const {
    mid.params(out, join_name(prefix, "mid"));
    if (!multi_scale) return;
    high_a.params(out, join_name(prefix, "high_a"));
    high_b.params(out, join_name(prefix, "high_b"));
    low_a.params(out, join_name(prefix, "low_a"));
    low_b.params(out, join_name(prefix, "low_b"));
    att1.params(out, join_name(prefix, "att1"));
    att2.params(out, join_name(prefix, "att2"));
    att3.params(out, join_name(prefix, "att3"));
    att_out.params(out, join_name(prefix, "att_out"));
}

void ScaleFusion::buffers(NamedTensors& out, const std::string& prefix) const {
    mid.buffers(out, join_name(prefix, "mid"));
    if (!multi_scale) return;
    high_a.buffers(out, join_name(prefix, "high_a"));
    high_b.buffers(out, join_name(prefix, "high_b"));
    low_a.buffers(out, join_name(prefix, "low_a"));
    low_b.buffers(out, join_name(prefix, "low_b"));
    att1.buffers(out, join_name(prefix, "att1"));
    att2.buffers(out, join_name(prefix, "att2"));
    att3.buffers(out, join_name(prefix, "att3"));
}

}  // namespace mgnet
