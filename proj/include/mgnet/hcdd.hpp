#pragma once

#include <array>
#include <optional>
#include <string>

#include "mgnet/nn.hpp"

namespace mgnet {

enum class PairMode { carry, raw };

PairMode pair_mode_from_name(const std::string& name);
std::string pair_mode_name(PairMode m);

struct HcduConfig {
    int in_channels = 0;    // channels of the fused feature f_i
    int prev_channels = 0;  // channels of the previous unit's output, 0 for the deepest unit
    int out_channels = 0;   // must be even; C_u defaults to out_channels/2
    int group_width = 0;    // C_u; 0 = out_channels/2
    PairMode pair_mode = PairMode::carry;

    int cu() const { return group_width > 0 ? group_width : out_channels / 2; }
    void validate() const;
};

// Hierarchical channel-down unit: a top-down merge-and-add followed by
// the six-chunk pyramid interaction with a squeeze-style weight generator.
struct Hcdu {
    HcduConfig cfg;

    ConvBnRelu reduce;                      // 3x3: in -> out
    std::optional<ConvBnRelu> prev_align;   // 1x1 lateral: prev -> out, when widths differ
    ConvBnRelu expand;                      // 1x1: out -> 6*out
    ConvBnRelu solo_first, solo_last;       // 3x3: out -> 2*Cu
    std::array<ConvBnRelu, 5> pair_convs;   // 3x3: varies -> 3*Cu
    Conv2d gate_reduce, gate_expand;        // 1x1: 7Cu -> Cu -> 7Cu
    Conv2d out_conv;                        // 3x3: 7Cu -> out
    BatchNorm2d out_bn;

    Hcdu() = default;
    Hcdu(const HcduConfig& cfg, Rng& rng);

    // f = reduce(f_i) + up2(f_prev); lateral 1x1 applied to the upsampled prev
    // when the configured widths differ. Without a configured lateral, a
    // channel mismatch after reduction is an error.
    Tensor merge(const Tensor& f_i, const Tensor* f_prev, bool training) const;
    Tensor pyramid(const Tensor& f, bool training) const;
    Tensor forward(const Tensor& f_i, const Tensor* f_prev, bool training) const {
        return pyramid(merge(f_i, f_prev, training), training);
    }

    void params(NamedTensors& out, const std::string& prefix) const;
    void buffers(NamedTensors& out, const std::string& prefix) const;
};

// Five units, deepest first, plus the 1x1 coarse head.
struct Decoder {
    std::array<Hcdu, 5> units;
    Conv2d head;  // 1x1: 32 -> 1

    Decoder() = default;
    Decoder(const std::array<int, 5>& fused_channels /*shallow->deep*/, PairMode pair_mode,
            Rng& rng);

    // out_channels per unit, deepest first: next-shallower fused width, then 32.
    static std::array<int, 5> channel_plan(const std::array<int, 5>& fused_channels);

    struct Result {
        Tensor x;              // decoder feature, 32ch at stride 2
        Tensor coarse_logits;  // 1ch at stride 2
    };
    Result forward(const std::array<Tensor, 5>& fused /*shallow->deep*/, bool training) const;

    void params(NamedTensors& out, const std::string& prefix) const;
    void buffers(NamedTensors& out, const std::string& prefix) const;
};

}  // namespace mgnet
