#include "mgnet/encoder.hpp"

#include <algorithm>

#include "mgnet/checkpoint.hpp"

namespace mgnet {

namespace {

constexpr int kCardinality = 32;
constexpr int kBaseWidth = 4;  // 32x4d

bool is_power_of_two(int v) { return v > 0 && (v & (v - 1)) == 0; }

// ResNeXt-101 stage plan: (blocks, out_channels)
struct StagePlan {
    int blocks, out_ch;
};
constexpr StagePlan kStagePlans[4] = {{3, 256}, {4, 512}, {23, 1024}, {3, 2048}};

int stage_width(int stage) {
    // width = planes * base_width * cardinality / 64 -> 128/256/512/1024 for 32x4d
    const int planes[4] = {64, 128, 256, 512};
    return planes[stage] * kBaseWidth * kCardinality / 64;
}

}  // namespace

std::string profile_name(Profile p) { return p == Profile::full ? "full" : "tiny"; }

Profile profile_from_name(const std::string& name) {
    if (name == "full") return Profile::full;
    if (name == "tiny") return Profile::tiny;
    fail("unknown backbone profile: '" + name + "' (expected 'full' or 'tiny')");
}

BackboneSpec BackboneSpec::full_spec() {
    BackboneSpec s;
    s.profile = Profile::full;
    s.level_channels = {64, 256, 512, 1024, 2048};
    return s;
}

BackboneSpec BackboneSpec::tiny_spec(std::vector<int> channels) {
    BackboneSpec s;
    s.profile = Profile::tiny;
    s.level_channels = std::move(channels);
    return s;
}

void BackboneSpec::validate() const {
    check(level_channels.size() == 5,
          "backbone spec must have exactly 5 levels, got " +
              std::to_string(level_channels.size()));
    check(level_strides.size() == 5, "backbone spec must have exactly 5 strides");
    for (size_t i = 0; i < 5; ++i) {
        check(level_channels[i] > 0, "level channels must be positive");
        check(is_power_of_two(level_strides[i]), "level strides must be powers of two");
        if (i > 0) check(level_strides[i] > level_strides[i - 1], "strides must strictly increase");
    }
    if (profile == Profile::full) {
        const std::vector<int> want = {64, 256, 512, 1024, 2048};
        check(level_channels == want, "full profile requires channels [64,256,512,1024,2048]");
    } else {
        check(!weights_source.has_value(), "pretrained weights unsupported for tiny profile");
    }
}

BottleneckX::BottleneckX(int in_ch, int width, int out_ch, int stride, int cardinality, Rng& rng)
    : reduce(in_ch, width, 1, 1, 0, rng),
      grouped(width, width, 3, stride, 1, rng, /*dilation=*/1, /*groups=*/cardinality),
      expand(width, out_ch, 1, 1, 0, rng, /*with_bias=*/false),
      expand_bn(out_ch) {
    if (stride != 1 || in_ch != out_ch) {
        down.emplace(in_ch, out_ch, 1, stride, 0, rng, /*with_bias=*/false);
        down_bn.emplace(out_ch);
    }
}

Tensor BottleneckX::forward(const Tensor& x, bool training) const {
    Tensor y = reduce.forward(x, training);
    y = grouped.forward(y, training);
    y = expand_bn.forward(expand.forward(y), training);
    Tensor shortcut = x;
    if (down) shortcut = down_bn->forward(down->forward(x), training);
    return relu(add(y, shortcut));
}

void BottleneckX::params(NamedTensors& out, const std::string& prefix) const {
    reduce.params(out, join_name(prefix, "reduce"));
    grouped.params(out, join_name(prefix, "grouped"));
    expand.params(out, join_name(prefix, "expand"));
    expand_bn.params(out, join_name(prefix, "expand_bn"));
    if (down) {
        down->params(out, join_name(prefix, "down"));
        down_bn->params(out, join_name(prefix, "down_bn"));
    }
}

void BottleneckX::buffers(NamedTensors& out, const std::string& prefix) const {
    reduce.buffers(out, join_name(prefix, "reduce"));
    grouped.buffers(out, join_name(prefix, "grouped"));
    expand_bn.buffers(out, join_name(prefix, "expand_bn"));
    if (down_bn) down_bn->buffers(out, join_name(prefix, "down_bn"));
}

Encoder::Encoder(const BackboneSpec& spec, Rng& rng) : spec_(spec) {
    spec_.validate();
    if (spec_.profile == Profile::tiny) {
        int in_ch = 3;
        for (int i = 0; i < 5; ++i) {
            tiny_stages_.emplace_back(in_ch, spec_.level_channels[static_cast<size_t>(i)], 3, 2, 1,
                                      rng);
            in_ch = spec_.level_channels[static_cast<size_t>(i)];
        }
        return;
    }

    stem_.emplace();
    stem_->conv = Conv2d(3, 64, 7, 2, 3, rng, /*with_bias=*/false);
    stem_->bn = BatchNorm2d(64);
    int in_ch = 64;
    for (int s = 0; s < 4; ++s) {
        const int blocks = kStagePlans[s].blocks;
        const int out_ch = kStagePlans[s].out_ch;
        const int width = stage_width(s);
        const int first_stride = s == 0 ? 1 : 2;
        for (int b = 0; b < blocks; ++b) {
            stages_[static_cast<size_t>(s)].emplace_back(b == 0 ? in_ch : out_ch, width, out_ch,
                                                         b == 0 ? first_stride : 1, kCardinality,
                                                         rng);
        }
        in_ch = out_ch;
    }
}

Tensor Encoder::forward_tiny(const Tensor& x, bool training, FeaturePyramid& out) const {
    Tensor cur = x;
    for (size_t i = 0; i < 5; ++i) {
        cur = tiny_stages_[i].forward(cur, training);
        out.levels[i] = cur;
    }
    return cur;
}

Tensor Encoder::forward_full(const Tensor& x, bool training, FeaturePyramid& out) const {
    Tensor cur = relu(stem_->bn.forward(stem_->conv.forward(x), training));
    out.levels[0] = cur;  // 64ch, stride 2
    cur = max_pool2d(cur, 3, 2, 1);
    for (size_t s = 0; s < 4; ++s) {
        for (const auto& block : stages_[s]) cur = block.forward(cur, training);
        out.levels[s + 1] = cur;
    }
    return cur;
}

FeaturePyramid Encoder::forward(const Tensor& image, bool training, double source_scale) const {
    check(image.ndim() == 4 && image.dim(1) == 3, "encoder expects an NCHW RGB tensor");
    const int64_t h = image.dim(2), w = image.dim(3);
    check(h >= 32 && w >= 32, "encoder input must be at least 32x32");
    check(h % 2 == 0 && w % 2 == 0, "encoder input dims must be even");
    check(all_finite(image), "encoder input contains non-finite values");

    FeaturePyramid out;
    if (spec_.profile == Profile::tiny)
        forward_tiny(image, training, out);
    else
        forward_full(image, training, out);

    for (size_t i = 0; i < 5; ++i) {
        out.meta[i].channels = spec_.level_channels[i];
        out.meta[i].stride = spec_.level_strides[i];
        out.meta[i].source_scale = source_scale;
        const int64_t want_h = (h + spec_.level_strides[i] - 1) / spec_.level_strides[i];
        const int64_t want_w = (w + spec_.level_strides[i] - 1) / spec_.level_strides[i];
        check(out.levels[i].dim(1) == spec_.level_channels[i] &&
                  out.levels[i].dim(2) == want_h && out.levels[i].dim(3) == want_w,
              "encoder level " + std::to_string(i + 1) + " violates the channel/stride contract");
    }
    return out;
}

void Encoder::params(NamedTensors& out, const std::string& prefix) const {
    if (spec_.profile == Profile::tiny) {
        for (size_t i = 0; i < tiny_stages_.size(); ++i)
            tiny_stages_[i].params(out, join_name(prefix, "stage" + std::to_string(i + 1)));
        return;
    }
    stem_->conv.params(out, join_name(prefix, "stem.conv"));
    stem_->bn.params(out, join_name(prefix, "stem.bn"));
    for (size_t s = 0; s < 4; ++s)
        for (size_t b = 0; b < stages_[s].size(); ++b)
            stages_[s][b].params(
                out, join_name(prefix, "layer" + std::to_string(s + 1) + ".block" +
                                           std::to_string(b)));
}

void Encoder::buffers(NamedTensors& out, const std::string& prefix) const {
    if (spec_.profile == Profile::tiny) {
        for (size_t i = 0; i < tiny_stages_.size(); ++i)
            tiny_stages_[i].buffers(out, join_name(prefix, "stage" + std::to_string(i + 1)));
        return;
    }
    stem_->bn.buffers(out, join_name(prefix, "stem.bn"));
    for (size_t s = 0; s < 4; ++s)
        for (size_t b = 0; b < stages_[s].size(); ++b)
            stages_[s][b].buffers(
                out, join_name(prefix, "layer" + std::to_string(s + 1) + ".block" +
                                           std::to_string(b)));
}

Encoder build_encoder(const BackboneSpec& spec, Rng& rng) { return Encoder(spec, rng); }

FeaturePyramid extract_features(const Encoder& encoder, const Tensor& image, bool training) {
    return encoder.forward(image, training);
}

PretrainManifest load_pretrained(Encoder& encoder, const std::string& weights_source) {
    check(encoder.spec().profile == Profile::full,
          "pretrained weights unsupported for tiny profile");
    Container c = load_container(weights_source);

    NamedTensors own;
    encoder.params(own, "");
    NamedTensors own_buf;
    encoder.buffers(own_buf, "");
    for (auto& item : own_buf.items) own.items.push_back(item);

    auto strip = [](const std::string& name) {
        constexpr const char* kPrefix = "encoder.";
        if (name.rfind(kPrefix, 0) == 0) return name.substr(8);
        return name;
    };

    PretrainManifest manifest;
    NamedTensors file;
    for (auto& item : c.params.items) file.items.push_back(item);
    for (auto& item : c.buffers.items) file.items.push_back(item);

    std::vector<bool> satisfied(own.items.size(), false);
    for (const auto& [raw_name, tensor] : file.items) {
        const std::string name = strip(raw_name);
        bool used = false;
        for (size_t i = 0; i < own.items.size(); ++i) {
            if (own.items[i].first != name) continue;
            check(own.items[i].second.shape() == tensor.shape(),
                  "pretrained parameter shape mismatch for '" + raw_name + "'");
            std::copy(tensor.data(), tensor.data() + tensor.numel(),
                      own.items[i].second.data());
            satisfied[i] = true;
            used = true;
            manifest.loaded.push_back(name);
            break;
        }
        if (!used) manifest.skipped.push_back(raw_name);
    }
    for (size_t i = 0; i < own.items.size(); ++i)
        check(satisfied[i], "pretrained weights missing parameter '" + own.items[i].first + "'");
    return manifest;
}

}  // namespace mgnet
