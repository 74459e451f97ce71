#pragma once

#include <cstdint>
#include <string>

#include "mgnet/tensor.hpp"

namespace mgnet {

enum class LambdaSchedule { cosine_increase, constant };

LambdaSchedule lambda_schedule_from_name(const std::string& name);
std::string lambda_schedule_name(LambdaSchedule s);

struct LossConfig {
    double ual_base_weight = 1.5;
    LambdaSchedule lambda_schedule = LambdaSchedule::cosine_increase;
    int64_t total_steps = 1;
    bool use_ual = true;  // ablation U
};

// Mean pixelwise binary cross entropy; p is clamped to [eps, 1-eps].
Tensor bce(const Tensor& p, const Tensor& g);

// Uncertainty-aware loss: mean of 1 - |2p - 1|^2. Maximal at p = 0.5.
Tensor ual(const Tensor& p);

// Increasing cosine ramp: 0.5 * (1 - cos(pi * step / total)), clamped to [0,1].
double lambda_at(int64_t step, int64_t total_steps);

struct LossTerms {
    Tensor total;
    double bce_value = 0.0;
    double ual_value = 0.0;
    double lambda = 0.0;
};

LossTerms total_loss(const Tensor& p, const Tensor& g, int64_t step, const LossConfig& cfg);

}  // namespace mgnet
