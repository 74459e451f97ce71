#pragma once

#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "mgnet/tensor.hpp"

namespace mgnet {

// Named parameter/buffer registry. Tensors are shared handles, so a registry
// entry aliases the module's storage; the optimizer and checkpoint code work
// through these.
struct NamedTensors {
    std::vector<std::pair<std::string, Tensor>> items;

    void add(const std::string& name, const Tensor& t) { items.emplace_back(name, t); }
    Tensor* find(const std::string& name) {
        for (auto& [n, t] : items)
            if (n == name) return &t;
        return nullptr;
    }
    size_t size() const { return items.size(); }
};

inline std::string join_name(const std::string& prefix, const std::string& name) {
    return prefix.empty() ? name : prefix + "." + name;
}

struct Conv2d {
    Tensor weight;  // [out, in/groups, kh, kw]
    Tensor bias;    // [out] or undefined
    int stride = 1, padding = 0, dilation = 1, groups = 1;

    Conv2d() = default;
    Conv2d(int in_ch, int out_ch, int kernel, int stride, int padding, Rng& rng,
           bool with_bias = true, int dilation = 1, int groups = 1);

    Tensor forward(const Tensor& x) const { return conv2d(x, weight, bias, stride, padding, dilation, groups); }
    void params(NamedTensors& out, const std::string& prefix) const;
    int out_channels() const { return static_cast<int>(weight.dim(0)); }
};

struct BatchNorm2d {
    Tensor gamma, beta;               // learned
    Tensor running_mean, running_var; // buffers
    double eps = 1e-5;
    double momentum = 0.1;

    BatchNorm2d() = default;
    explicit BatchNorm2d(int channels);

    Tensor forward(const Tensor& x, bool training) const {
        return batch_norm(x, gamma, beta, running_mean, running_var, training, momentum, eps);
    }
    void params(NamedTensors& out, const std::string& prefix) const;
    void buffers(NamedTensors& out, const std::string& prefix) const;
};

// The CBR block the whole network is built from.
struct ConvBnRelu {
    Conv2d conv;
    BatchNorm2d bn;

    ConvBnRelu() = default;
    ConvBnRelu(int in_ch, int out_ch, int kernel, int stride, int padding, Rng& rng,
               int dilation = 1, int groups = 1);

    Tensor forward(const Tensor& x, bool training) const {
        return relu(bn.forward(conv.forward(x), training));
    }
    void params(NamedTensors& out, const std::string& prefix) const;
    void buffers(NamedTensors& out, const std::string& prefix) const;
};

// SGD with momentum and decoupled-from-nothing classic weight decay:
//   v <- mu*v + (g + wd*p);  p <- p - lr*v
struct Sgd {
    struct Slot {
        Tensor param;
        std::vector<double> velocity;
    };
    std::vector<Slot> slots;
    double momentum = 0.9;
    double weight_decay = 0.0;

    Sgd() = default;
    Sgd(const NamedTensors& params, double momentum, double weight_decay);

    void step(double lr);
    void zero_grad();
    // Global-norm gradient clipping; returns the pre-clip norm.
    double clip_grad_norm(double max_norm);

    void state(NamedTensors& out) const;          // velocity buffers, checkpoint order
    void load_state(const NamedTensors& state);
};

double kaiming_std(int fan_in);

}  // namespace mgnet
