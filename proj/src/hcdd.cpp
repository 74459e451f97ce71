#include "mgnet/hcdd.hpp"

namespace mgnet {

PairMode pair_mode_from_name(const std::string& name) {
    if (name == "carry") return PairMode::carry;
    if (name == "raw") return PairMode::raw;
    fail("unknown hcdu pair mode: '" + name + "' (expected 'carry' or 'raw')");
}

std::string pair_mode_name(PairMode m) { return m == PairMode::carry ? "carry" : "raw"; }

void HcduConfig::validate() const {
    check(in_channels > 0 && out_channels > 0, "hcdu: channels must be positive");
    check(out_channels % 2 == 0, "hcdu: out_channels must be even");
    check(cu() > 0, "hcdu: group width must be positive");
}

Hcdu::Hcdu(const HcduConfig& cfg_, Rng& rng) : cfg(cfg_) {
    cfg.validate();
    const int out = cfg.out_channels;
    const int cu = cfg.cu();
    reduce = ConvBnRelu(cfg.in_channels, out, 3, 1, 1, rng);
    if (cfg.prev_channels > 0 && cfg.prev_channels != out)
        prev_align = ConvBnRelu(cfg.prev_channels, out, 1, 1, 0, rng);
    expand = ConvBnRelu(out, 6 * out, 1, 1, 0, rng);
    solo_first = ConvBnRelu(out, 2 * cu, 3, 1, 1, rng);
    solo_last = ConvBnRelu(out, 2 * cu, 3, 1, 1, rng);
    for (int j = 0; j < 5; ++j) {
        int pair_in;
        if (cfg.pair_mode == PairMode::raw)
            pair_in = 2 * out;
        else
            pair_in = j == 0 ? 2 * out : cu + out;  // carried middle chunk is Cu wide
        pair_convs[static_cast<size_t>(j)] = ConvBnRelu(pair_in, 3 * cu, 3, 1, 1, rng);
    }
    gate_reduce = Conv2d(7 * cu, cu, 1, 1, 0, rng);
    gate_expand = Conv2d(cu, 7 * cu, 1, 1, 0, rng);
    out_conv = Conv2d(7 * cu, out, 3, 1, 1, rng, /*with_bias=*/false);
    out_bn = BatchNorm2d(out);
}

Tensor Hcdu::merge(const Tensor& f_i, const Tensor* f_prev, bool training) const {
    check(f_i.dim(1) == cfg.in_channels, "hcdu_merge: unexpected fused-feature channels");
    Tensor reduced = reduce.forward(f_i, training);
    if (f_prev == nullptr || !f_prev->defined()) return reduced;

    check(f_prev->dim(2) * 2 == reduced.dim(2) && f_prev->dim(3) * 2 == reduced.dim(3),
          "hcdu_merge: previous output must be exactly half the target size");
    Tensor up = bilinear_resize(*f_prev, reduced.dim(2), reduced.dim(3));
    if (up.dim(1) != reduced.dim(1)) {
        check(prev_align.has_value(),
              "hcdu_merge: channel mismatch after reduction (" + std::to_string(up.dim(1)) +
                  " vs " + std::to_string(reduced.dim(1)) + ")");
        up = prev_align->forward(up, training);
    }
    return add(reduced, up);
}

Tensor Hcdu::pyramid(const Tensor& f, bool training) const {
    const int out = cfg.out_channels;
    const int cu = cfg.cu();
    check(f.dim(1) == out, "hcdu_pyramid: feature width must equal out_channels");

    Tensor expanded = expand.forward(f, training);  // 6*out channels
    std::array<Tensor, 6> chunks;
    for (int j = 0; j < 6; ++j)
        chunks[static_cast<size_t>(j)] = slice_channels(expanded, j * out, (j + 1) * out);

    // 7 groups: solo(k1), five pairwise CCBRS, solo(k6). Each yields sub-features
    // of width Cu; T gathers the first sub-feature per group, M the last.
    std::vector<Tensor> firsts, lasts;
    firsts.reserve(7);
    lasts.reserve(7);

    {
        Tensor s = solo_first.forward(chunks[0], training);
        firsts.push_back(slice_channels(s, 0, cu));
        lasts.push_back(slice_channels(s, cu, 2 * cu));
    }
    Tensor carried = chunks[0];
    for (int j = 0; j < 5; ++j) {
        Tensor left = cfg.pair_mode == PairMode::raw ? chunks[static_cast<size_t>(j)] : carried;
        Tensor in = concat_channels({left, chunks[static_cast<size_t>(j + 1)]});
        Tensor g = pair_convs[static_cast<size_t>(j)].forward(in, training);
        firsts.push_back(slice_channels(g, 0, cu));
        carried = slice_channels(g, cu, 2 * cu);  // middle sub-feature
        lasts.push_back(slice_channels(g, 2 * cu, 3 * cu));
    }
    {
        Tensor s = solo_last.forward(chunks[5], training);
        firsts.push_back(slice_channels(s, 0, cu));
        lasts.push_back(slice_channels(s, cu, 2 * cu));
    }

    Tensor t = concat_channels(firsts);  // 7*Cu
    Tensor m = concat_channels(lasts);   // 7*Cu

    Tensor w = sigmoid(gate_expand.forward(relu(gate_reduce.forward(global_avg_pool(m)))));
    Tensor weighted = mul(t, w);  // broadcast over H,W
    return relu(add(f, out_bn.forward(out_conv.forward(weighted), training)));
}

void Hcdu::params(NamedTensors& out, const std::string& prefix) const {
    reduce.params(out, join_name(prefix, "reduce"));
    if (prev_align) prev_align->params(out, join_name(prefix, "prev_align"));
    expand.params(out, join_name(prefix, "expand"));
    solo_first.params(out, join_name(prefix, "solo_first"));
    solo_last.params(out, join_name(prefix, "solo_last"));
    for (size_t j = 0; j < 5; ++j)
        pair_convs[j].params(out, join_name(prefix, "pair" + std::to_string(j + 1)));
    gate_reduce.params(out, join_name(prefix, "gate_reduce"));
    gate_expand.params(out, join_name(prefix, "gate_expand"));
    out_conv.params(out, join_name(prefix, "out_conv"));
    out_bn.params(out, join_name(prefix, "out_bn"));
}

void Hcdu::buffers(NamedTensors& out, const std::string& prefix) const {
    reduce.buffers(out, join_name(prefix, "reduce"));
    if (prev_align) prev_align->buffers(out, join_name(prefix, "prev_align"));
    expand.buffers(out, join_name(prefix, "expand"));
    solo_first.buffers(out, join_name(prefix, "solo_first"));
    solo_last.buffers(out, join_name(prefix, "solo_last"));
    for (size_t j = 0; j < 5; ++j)
        pair_convs[j].buffers(out, join_name(prefix, "pair" + std::to_string(j + 1)));
    out_bn.buffers(out, join_name(prefix, "out_bn"));
}

std::array<int, 5> Decoder::channel_plan(const std::array<int, 5>& fused_channels) {
    // deepest first: HCDU_i outputs the next-shallower fused width; the last
    // unit goes to 32 so the refinement head sees its documented 33/32 widths.
    return {fused_channels[3], fused_channels[2], fused_channels[1], fused_channels[0], 32};
}

Decoder::Decoder(const std::array<int, 5>& fused_channels, PairMode pair_mode, Rng& rng) {
    const std::array<int, 5> plan = channel_plan(fused_channels);
    for (int i = 0; i < 5; ++i) {
        HcduConfig cfg;
        cfg.in_channels = fused_channels[static_cast<size_t>(4 - i)];
        cfg.prev_channels = i == 0 ? 0 : plan[static_cast<size_t>(i - 1)];
        cfg.out_channels = plan[static_cast<size_t>(i)];
        cfg.pair_mode = pair_mode;
        units[static_cast<size_t>(i)] = Hcdu(cfg, rng);
    }
    head = Conv2d(32, 1, 1, 1, 0, rng);
}

Decoder::Result Decoder::forward(const std::array<Tensor, 5>& fused, bool training) const {
    for (int i = 0; i < 5; ++i)
        check(fused[static_cast<size_t>(i)].defined(), "decode: missing fused level");
    Tensor prev;
    for (int i = 0; i < 5; ++i) {
        const Tensor& f_i = fused[static_cast<size_t>(4 - i)];
        prev = units[static_cast<size_t>(i)].forward(f_i, prev.defined() ? &prev : nullptr,
                                                     training);
    }
    Result r;
    r.x = prev;
    r.coarse_logits = head.forward(prev);
    return r;
}

void Decoder::params(NamedTensors& out, const std::string& prefix) const {
    for (size_t i = 0; i < 5; ++i)
        units[i].params(out, join_name(prefix, "unit" + std::to_string(i + 1)));
    head.params(out, join_name(prefix, "head"));
}

void Decoder::buffers(NamedTensors& out, const std::string& prefix) const {
    for (size_t i = 0; i < 5; ++i)
        units[i].buffers(out, join_name(prefix, "unit" + std::to_string(i + 1)));
}

}  // namespace mgnet
