#pragma once

#include <array>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "mgnet/nn.hpp"

namespace mgnet {

enum class Profile { full, tiny };

std::string profile_name(Profile p);
Profile profile_from_name(const std::string& name);  // error on unknown profile

// Channel/stride contract of the shared backbone. level index 0 is the
// shallowest (stride 2) tap, index 4 the deepest (stride 32).
struct BackboneSpec {
    Profile profile = Profile::tiny;
    std::vector<int> level_channels = {8, 16, 32, 64, 128};  // shallow -> deep
    std::vector<int> level_strides = {2, 4, 8, 16, 32};
    std::optional<std::string> weights_source;

    static BackboneSpec full_spec();
    static BackboneSpec tiny_spec(std::vector<int> channels = {8, 16, 32, 64, 128});
    void validate() const;
};

struct LevelMeta {
    int channels = 0;
    int stride = 0;
    double source_scale = 1.0;
};

struct FeaturePyramid {
    std::array<Tensor, 5> levels;  // shallow -> deep
    std::array<LevelMeta, 5> meta;
};

// Grouped-residual bottleneck (the full profile's building block).
struct BottleneckX {
    ConvBnRelu reduce;   // 1x1 -> width
    ConvBnRelu grouped;  // 3x3, cardinality groups, carries the stride
    Conv2d expand;       // 1x1 -> out, no activation before the residual add
    BatchNorm2d expand_bn;
    std::optional<Conv2d> down;
    std::optional<BatchNorm2d> down_bn;

    BottleneckX() = default;
    BottleneckX(int in_ch, int width, int out_ch, int stride, int cardinality, Rng& rng);
    Tensor forward(const Tensor& x, bool training) const;
    void params(NamedTensors& out, const std::string& prefix) const;
    void buffers(NamedTensors& out, const std::string& prefix) const;
};

class Encoder {
public:
    Encoder() = default;
    Encoder(const BackboneSpec& spec, Rng& rng);

    // Five taps, shallow->deep. Input must be normalized RGB, H and W each
    // >= 32 and even; source_scale tags the pyramid for bookkeeping.
    FeaturePyramid forward(const Tensor& image, bool training, double source_scale = 1.0) const;

    const BackboneSpec& spec() const { return spec_; }
    void params(NamedTensors& out, const std::string& prefix) const;
    void buffers(NamedTensors& out, const std::string& prefix) const;

private:
    BackboneSpec spec_;

    // tiny profile: five strided CBR stages
    std::vector<ConvBnRelu> tiny_stages_;

    // full profile: ResNeXt-101 trunk, everything past stage 4 absent
    struct Stem {
        Conv2d conv;
        BatchNorm2d bn;
    };
    std::optional<Stem> stem_;
    std::array<std::vector<BottleneckX>, 4> stages_;

    Tensor forward_tiny(const Tensor& x, bool training, FeaturePyramid& out) const;
    Tensor forward_full(const Tensor& x, bool training, FeaturePyramid& out) const;
};

struct PretrainManifest {
    std::vector<std::string> loaded;
    std::vector<std::string> skipped;  // container entries that are not encoder tensors
};

Encoder build_encoder(const BackboneSpec& spec, Rng& rng);
PretrainManifest load_pretrained(Encoder& encoder, const std::string& weights_source);
FeaturePyramid extract_features(const Encoder& encoder, const Tensor& image, bool training = false);

}  // namespace mgnet
