#include "mgnet/loss.hpp"

#include <algorithm>
#include <cmath>

namespace mgnet {

namespace {
constexpr double kEps = 1e-7;
}

LambdaSchedule lambda_schedule_from_name(const std::string& name) {
    if (name == "cosine_increase") return LambdaSchedule::cosine_increase;
    if (name == "constant") return LambdaSchedule::constant;
    fail("unknown lambda schedule: '" + name + "'");
}

std::string lambda_schedule_name(LambdaSchedule s) {
    return s == LambdaSchedule::cosine_increase ? "cosine_increase" : "constant";
}

Tensor bce(const Tensor& p, const Tensor& g) {
    check(p.shape() == g.shape(), "bce: prediction/ground-truth shape mismatch");
    for (int64_t i = 0; i < g.numel(); ++i)
        check(g.data()[i] == 0.0 || g.data()[i] == 1.0, "bce: ground truth must be binary");
    Tensor pc = clamp(p, kEps, 1.0 - kEps);
    Tensor pos = mul(g, log_op(pc));
    Tensor neg = mul(affine(g, -1.0, 1.0), log_op(affine(pc, -1.0, 1.0)));
    return affine(mean_all(add(pos, neg)), -1.0, 0.0);
}

Tensor ual(const Tensor& p) {
    Tensor q = affine(p, 2.0, -1.0);      // 2p - 1
    Tensor sq = mul(q, q);                // |2p - 1|^2
    return mean_all(affine(sq, -1.0, 1.0));
}

double lambda_at(int64_t step, int64_t total_steps) {
    if (total_steps <= 0) return 1.0;
    if (step <= 0) return 0.0;
    if (step >= total_steps) return 1.0;
    const double v =
        0.5 * (1.0 - std::cos(M_PI * static_cast<double>(step) / static_cast<double>(total_steps)));
    return std::clamp(v, 0.0, 1.0);
}

LossTerms total_loss(const Tensor& p, const Tensor& g, int64_t step, const LossConfig& cfg) {
    LossTerms out;
    Tensor b = bce(p, g);
    out.bce_value = b.value();
    if (!cfg.use_ual) {
        out.total = b;
        return out;
    }
    const double lam = cfg.lambda_schedule == LambdaSchedule::constant
                           ? 1.0
                           : lambda_at(step, cfg.total_steps);
    Tensor u = ual(p);
    out.ual_value = u.value();
    out.lambda = lam;
    out.total = add(b, affine(u, cfg.ual_base_weight * lam, 0.0));
    return out;
}

}  // namespace mgnet
