#pragma once

#include <utility>
#include <vector>

#include "mgnet/nn.hpp"

namespace mgnet {

// Atrous spatial pyramid pooling: three dilated 3x3 branches (rates 6/12/18)
// plus a global-pool 1x1 branch rebroadcast to full size, fused by a 1x1 conv
// with 128 filters.
struct Aspp {
    Conv2d rate6, rate12, rate18;  // 3x3, padding == dilation
    Conv2d pool_proj;              // 1x1 on the pooled feature
    Conv2d fuse;                   // 1x1: 4*branch -> 128

    Aspp() = default;
    Aspp(int in_ch, Rng& rng);
    Tensor forward(const Tensor& x) const;
    void params(NamedTensors& out, const std::string& prefix) const;
};

// Primary-prediction-guided refinement: one function F applied repeatedly,
// re-reading the fixed decoder feature conditioned on the previous logits.
struct Refiner {
    Conv2d block1_a;  // 3x3: 33 -> 33
    Conv2d block1_b;  // 3x3: 33 -> 32
    Conv2d block2_a, block2_b, block3_a, block3_b;  // 3x3: 32 -> 32
    Aspp aspp;
    Conv2d head_a;  // 1x1: 128 -> 32
    Conv2d head_b;  // 1x1: 32 -> 1

    Refiner() = default;
    explicit Refiner(Rng& rng);

    Tensor refine_step(const Tensor& x, const Tensor& m_prev) const;

    struct Result {
        Tensor final_logits;
        std::vector<Tensor> trace;  // M_0 .. M_T
    };
    Result refine(const Tensor& x, const Tensor& m0, int t_max) const;

    void params(NamedTensors& out, const std::string& prefix) const;
};

}  // namespace mgnet
