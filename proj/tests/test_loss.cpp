#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "mgnet/loss.hpp"
#include "reference_ops.hpp"

using namespace mgnet;

TEST_CASE("bce closed forms") {
    Tensor ones = Tensor::full({1, 1, 3, 3}, 1.0);
    Tensor zeros = Tensor::zeros({1, 1, 3, 3});

    // perfect predictions (clamped internally) are ~0
    CHECK(bce(ones, ones).value() == doctest::Approx(0.0).epsilon(1e-6));
    CHECK(bce(zeros, zeros).value() == doctest::Approx(0.0).epsilon(1e-6));

    Tensor half = Tensor::full({1, 1, 3, 3}, 0.5);
    CHECK(std::abs(bce(half, ones).value() - std::log(2.0)) < 1e-9);

    CHECK_THROWS(bce(half, Tensor::full({1, 1, 2, 2}, 1.0)));
    CHECK_THROWS(bce(half, Tensor::full({1, 1, 3, 3}, 0.5)));  // non-binary gt
}

TEST_CASE("bce matches a per-pixel loop oracle on a seeded 3x3 case") {
    Rng rng(1);
    Tensor p = Tensor::rand_uniform({1, 1, 3, 3}, rng, 0.01, 0.99);
    Tensor g = Tensor::zeros({1, 1, 3, 3});
    for (int64_t i = 0; i < g.numel(); ++i) g.data()[i] = rng.bernoulli(0.5) ? 1.0 : 0.0;

    double want = 0.0;
    for (int64_t i = 0; i < p.numel(); ++i) {
        const double pi = p.data()[i], gi = g.data()[i];
        want += -gi * std::log(pi) - (1.0 - gi) * std::log(1.0 - pi);
    }
    want /= static_cast<double>(p.numel());
    CHECK(bce(p, g).value() == doctest::Approx(want).epsilon(1e-12));
}

TEST_CASE("ual endpoints, midpoint, and symmetry") {
    CHECK(ual(Tensor::full({1, 1, 2, 2}, 0.5)).value() == doctest::Approx(1.0).epsilon(1e-15));
    CHECK(ual(Tensor::full({1, 1, 2, 2}, 0.0)).value() == doctest::Approx(0.0).epsilon(1e-15));
    CHECK(ual(Tensor::full({1, 1, 2, 2}, 1.0)).value() == doctest::Approx(0.0).epsilon(1e-15));
    CHECK(ual(Tensor::full({1, 1, 2, 2}, 0.75)).value() == doctest::Approx(0.75).epsilon(1e-15));

    Rng rng(2);
    Tensor p = Tensor::rand_uniform({1, 1, 4, 4}, rng);
    Tensor q = affine(p, -1.0, 1.0);  // 1 - p
    CHECK(ual(p).value() == doctest::Approx(ual(q).value()).epsilon(1e-14));
}

TEST_CASE("lambda schedule endpoints and monotonicity") {
    const int64_t total = 1000;
    CHECK(lambda_at(0, total) == 0.0);
    CHECK(std::abs(lambda_at(total, total) - 1.0) < 1e-12);
    CHECK(std::abs(lambda_at(total / 2, total) - 0.5) < 1e-12);
    double prev = -1.0;
    for (int64_t s = 0; s <= total; s += 7) {
        const double v = lambda_at(s, total);
        CHECK(v >= prev);
        CHECK(v >= 0.0);
        CHECK(v <= 1.0);
        prev = v;
    }
}

TEST_CASE("total_loss composition and ablation U") {
    LossConfig cfg;
    cfg.total_steps = 100;
    Tensor ones = Tensor::full({1, 1, 2, 2}, 1.0);
    Tensor half = Tensor::full({1, 1, 2, 2}, 0.5);

    // step 0: lambda = 0, so total == bce
    LossTerms t0 = total_loss(half, ones, 0, cfg);
    CHECK(t0.total.value() == doctest::Approx(t0.bce_value).epsilon(1e-15));

    // step = total: ln 2 + 1.5 * 1 * 1
    LossTerms tT = total_loss(half, ones, 100, cfg);
    CHECK(std::abs(tT.total.value() - (std::log(2.0) + 1.5)) < 1e-6);

    // ablation U off: no ual contribution regardless of ambiguity
    cfg.use_ual = false;
    LossTerms off = total_loss(half, ones, 100, cfg);
    CHECK(off.total.value() == doctest::Approx(std::log(2.0)).epsilon(1e-9));
    CHECK(off.ual_value == 0.0);

    cfg.use_ual = true;
    cfg.lambda_schedule = LambdaSchedule::constant;
    LossTerms c0 = total_loss(half, ones, 0, cfg);
    CHECK(std::abs(c0.total.value() - (std::log(2.0) + 1.5)) < 1e-6);
}

TEST_CASE("total_loss gradient matches finite differences at 1e-4") {
    Rng rng(3);
    Tensor p = Tensor::rand_uniform({1, 1, 2, 2}, rng, 0.05, 0.95).set_requires_grad(true);
    Tensor g = Tensor::zeros({1, 1, 2, 2});
    g.data()[0] = 1.0;
    g.data()[3] = 1.0;
    LossConfig cfg;
    cfg.total_steps = 10;
    auto loss = [&] { return total_loss(p, g, 7, cfg).total; };
    CHECK(ref::gradcheck(loss, {p}) < 1e-4);
}
