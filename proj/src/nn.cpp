#include "mgnet/nn.hpp"

#include <cmath>

namespace mgnet {

double kaiming_std(int fan_in) { return std::sqrt(2.0 / static_cast<double>(fan_in)); }

Conv2d::Conv2d(int in_ch, int out_ch, int kernel, int stride_, int padding_, Rng& rng,
               bool with_bias, int dilation_, int groups_) {
    check(in_ch % groups_ == 0, "Conv2d: in_ch not divisible by groups");
    stride = stride_;
    padding = padding_;
    dilation = dilation_;
    groups = groups_;
    const int fan_in = (in_ch / groups_) * kernel * kernel;
    weight = Tensor::randn({out_ch, in_ch / groups_, kernel, kernel}, rng, kaiming_std(fan_in));
    weight.set_requires_grad(true);
    if (with_bias) {
        bias = Tensor::zeros({out_ch});
        bias.set_requires_grad(true);
    }
}

void Conv2d::params(NamedTensors& out, const std::string& prefix) const {
    out.add(join_name(prefix, "weight"), weight);
    if (bias.defined()) out.add(join_name(prefix, "bias"), bias);
}

BatchNorm2d::BatchNorm2d(int channels) {
    gamma = Tensor::full({channels}, 1.0);
    gamma.set_requires_grad(true);
    beta = Tensor::zeros({channels});
    beta.set_requires_grad(true);
    running_mean = Tensor::zeros({channels});
    running_var = Tensor::full({channels}, 1.0);
}

void BatchNorm2d::params(NamedTensors& out, const std::string& prefix) const {
    out.add(join_name(prefix, "gamma"), gamma);
    out.add(join_name(prefix, "beta"), beta);
}

void BatchNorm2d::buffers(NamedTensors& out, const std::string& prefix) const {
    out.add(join_name(prefix, "running_mean"), running_mean);
    out.add(join_name(prefix, "running_var"), running_var);
}

ConvBnRelu::ConvBnRelu(int in_ch, int out_ch, int kernel, int stride, int padding, Rng& rng,
                       int dilation, int groups)
    : conv(in_ch, out_ch, kernel, stride, padding, rng, /*with_bias=*/false, dilation, groups),
      bn(out_ch) {}

void ConvBnRelu::params(NamedTensors& out, const std::string& prefix) const {
    conv.params(out, join_name(prefix, "conv"));
    bn.params(out, join_name(prefix, "bn"));
}

void ConvBnRelu::buffers(NamedTensors& out, const std::string& prefix) const {
    bn.buffers(out, join_name(prefix, "bn"));
}

Sgd::Sgd(const NamedTensors& params, double momentum_, double weight_decay_)
    : momentum(momentum_), weight_decay(weight_decay_) {
    for (const auto& [name, t] : params.items) {
        Slot s;
        s.param = t;
        s.velocity.assign(static_cast<size_t>(t.numel()), 0.0);
        slots.push_back(std::move(s));
    }
}

void Sgd::step(double lr) {
    for (auto& s : slots) {
        Tensor g = s.param.grad();
        double* p = s.param.data();
        const double* gp = g.defined() ? g.data() : nullptr;
        for (size_t i = 0; i < s.velocity.size(); ++i) {
            const double grad = (gp ? gp[i] : 0.0) + weight_decay * p[i];
            s.velocity[i] = momentum * s.velocity[i] + grad;
            p[i] -= lr * s.velocity[i];
        }
    }
}

void Sgd::zero_grad() {
    for (auto& s : slots) s.param.zero_grad();
}

double Sgd::clip_grad_norm(double max_norm) {
    double sq = 0.0;
    for (auto& s : slots) {
        Tensor g = s.param.grad();
        if (!g.defined()) continue;
        for (int64_t i = 0; i < g.numel(); ++i) sq += g.data()[i] * g.data()[i];
    }
    const double norm = std::sqrt(sq);
    if (norm > max_norm && norm > 0.0) {
        const double scale = max_norm / norm;
        for (auto& s : slots) {
            auto impl = s.param.impl();
            if (!impl->grad) continue;
            for (auto& v : *impl->grad) v *= scale;
        }
    }
    return norm;
}

void Sgd::state(NamedTensors& out) const {
    for (size_t i = 0; i < slots.size(); ++i) {
        Tensor v = Tensor::from_data({static_cast<int64_t>(slots[i].velocity.size())},
                                     slots[i].velocity);
        out.add("sgd.velocity." + std::to_string(i), v);
    }
}

void Sgd::load_state(const NamedTensors& state) {
    check(state.size() == slots.size(), "Sgd::load_state: slot count mismatch");
    for (size_t i = 0; i < slots.size(); ++i) {
        const Tensor& v = state.items[i].second;
        check(static_cast<size_t>(v.numel()) == slots[i].velocity.size(),
              "Sgd::load_state: velocity size mismatch at slot " + std::to_string(i));
        slots[i].velocity.assign(v.data(), v.data() + v.numel());
    }
}

}  // namespace mgnet
