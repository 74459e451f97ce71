#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "mgnet/nn.hpp"
#include "mgnet/tensor.hpp"
#include "reference_ops.hpp"

using namespace mgnet;

TEST_CASE("conv2d matches dense-loop reference") {
    Rng rng(7);
    struct Case {
        int cin, cout, h, w, k, stride, pad, dil, groups;
        bool bias;
    };
    const Case cases[] = {
        {3, 8, 9, 9, 3, 1, 1, 1, 1, true},   {5, 4, 10, 8, 3, 2, 1, 1, 1, false},
        {4, 6, 11, 11, 5, 1, 2, 1, 1, true}, {6, 6, 13, 13, 3, 1, 6, 6, 1, true},
        {8, 8, 7, 7, 3, 1, 1, 1, 4, true},   {7, 5, 6, 6, 1, 1, 0, 1, 1, true},
        {2, 3, 5, 5, 7, 1, 3, 1, 1, false},
    };
    for (const auto& c : cases) {
        CAPTURE(c.k);
        CAPTURE(c.stride);
        CAPTURE(c.groups);
        Tensor x = Tensor::randn({2, c.cin, c.h, c.w}, rng);
        Tensor w = Tensor::randn({c.cout, c.cin / c.groups, c.k, c.k}, rng, 0.3);
        Tensor b = c.bias ? Tensor::randn({c.cout}, rng) : Tensor();
        Tensor y = conv2d(x, w, b, c.stride, c.pad, c.dil, c.groups);
        ref::Plane want = ref::conv2d(ref::Plane::of(x), w, b, c.stride, c.pad, c.dil, c.groups);
        REQUIRE(y.dim(2) == want.h);
        REQUIRE(y.dim(3) == want.w);
        CHECK(ref::max_abs_diff(want, y) < 1e-11);
    }
}

TEST_CASE("conv2d gradients match finite differences") {
    Rng rng(11);
    Tensor x = Tensor::randn({1, 3, 5, 5}, rng).set_requires_grad(true);
    Tensor w = Tensor::randn({4, 3, 3, 3}, rng, 0.4).set_requires_grad(true);
    Tensor b = Tensor::randn({4}, rng).set_requires_grad(true);
    auto loss = [&] { return mean_all(mul(conv2d(x, w, b, 2, 1), conv2d(x, w, b, 2, 1))); };
    CHECK(ref::gradcheck(loss, {x, w, b}) < 1e-6);
}

TEST_CASE("grouped and dilated conv gradients") {
    Rng rng(12);
    Tensor x = Tensor::randn({2, 4, 6, 6}, rng).set_requires_grad(true);
    Tensor w = Tensor::randn({4, 2, 3, 3}, rng, 0.4).set_requires_grad(true);
    auto loss = [&] { return mean_all(mul(conv2d(x, w, Tensor(), 1, 2, 2, 2),
                                          conv2d(x, w, Tensor(), 1, 2, 2, 2))); };
    CHECK(ref::gradcheck(loss, {x, w}) < 1e-6);
}

TEST_CASE("batch_norm training matches reference and updates running stats") {
    Rng rng(13);
    BatchNorm2d bn(5);
    bn.gamma.vec() = {0.5, 1.5, -0.7, 2.0, 1.0};
    bn.beta.vec() = {0.1, -0.2, 0.0, 0.4, -1.0};
    Tensor x = Tensor::randn({3, 5, 4, 4}, rng, 2.0, 0.5);
    Tensor y = bn.forward(x, true);
    ref::Plane want = ref::bn_train(ref::Plane::of(x), bn.gamma, bn.beta);
    CHECK(ref::max_abs_diff(want, y) < 1e-10);
    // momentum 0.1 pulls running stats toward the batch stats
    CHECK(bn.running_mean.data()[0] != 0.0);
    CHECK(bn.running_var.data()[0] != 1.0);

    Tensor ye = bn.forward(x, false);
    ref::Plane wante =
        ref::bn_eval(ref::Plane::of(x), bn.gamma, bn.beta, bn.running_mean, bn.running_var);
    CHECK(ref::max_abs_diff(wante, ye) < 1e-10);
}

TEST_CASE("batch_norm gradients (train and eval)") {
    Rng rng(14);
    BatchNorm2d bn(3);
    bn.running_mean.vec() = {0.2, -0.1, 0.3};
    bn.running_var.vec() = {1.4, 0.8, 2.0};
    Tensor x = Tensor::randn({2, 3, 3, 3}, rng).set_requires_grad(true);
    for (bool training : {true, false}) {
        CAPTURE(training);
        auto loss = [&] {
            Tensor y = batch_norm(x, bn.gamma, bn.beta, bn.running_mean, bn.running_var, training);
            return mean_all(mul(y, y));
        };
        CHECK(ref::gradcheck(loss, {x, bn.gamma, bn.beta}) < 1e-5);
    }
}

TEST_CASE("softmax_channels normalizes and matches reference") {
    Rng rng(15);
    Tensor x = Tensor::randn({2, 3, 4, 4}, rng, 3.0);
    Tensor y = softmax_channels(x);
    ref::Plane want = ref::softmax_channels(ref::Plane::of(x));
    CHECK(ref::max_abs_diff(want, y) < 1e-12);
    for (int64_t n = 0; n < 2; ++n)
        for (int64_t h = 0; h < 4; ++h)
            for (int64_t w = 0; w < 4; ++w) {
                double s = 0.0;
                for (int64_t c = 0; c < 3; ++c) s += y.at(n, c, h, w);
                CHECK(std::abs(s - 1.0) < 1e-12);
            }

    Tensor xg = Tensor::randn({1, 3, 2, 2}, rng).set_requires_grad(true);
    Tensor tgt = Tensor::randn({1, 3, 2, 2}, rng);
    auto loss = [&] {
        Tensor d = sub(softmax_channels(xg), tgt);
        return mean_all(mul(d, d));
    };
    CHECK(ref::gradcheck(loss, {xg}) < 1e-6);
}

TEST_CASE("bilinear_resize matches reference and hand weights") {
    Rng rng(16);
    Tensor x = Tensor::randn({1, 2, 5, 7}, rng);
    Tensor up = bilinear_resize(x, 11, 9);
    CHECK(ref::max_abs_diff(ref::bilinear(ref::Plane::of(x), 11, 9), up) < 1e-12);

    // 2x2 -> 3x3 with half-pixel centers: rows/cols weight as [1,0],[.5,.5],[0,1]
    Tensor t = Tensor::from_data({1, 1, 2, 2}, {1.0, 2.0, 3.0, 4.0});
    Tensor y = bilinear_resize(t, 3, 3);
    const double want[9] = {1.0, 1.5, 2.0, 2.0, 2.5, 3.0, 3.0, 3.5, 4.0};
    for (int i = 0; i < 9; ++i) CHECK(y.data()[i] == doctest::Approx(want[i]).epsilon(1e-12));

    Tensor xg = Tensor::randn({1, 2, 3, 3}, rng).set_requires_grad(true);
    auto loss = [&] {
        Tensor u = bilinear_resize(xg, 5, 4);
        return mean_all(mul(u, u));
    };
    CHECK(ref::gradcheck(loss, {xg}) < 1e-6);
}

TEST_CASE("adaptive pooling matches reference") {
    Rng rng(17);
    Tensor x = Tensor::randn({2, 3, 7, 5}, rng);
    CHECK(ref::max_abs_diff(ref::adaptive_pool(ref::Plane::of(x), 3, 3, false),
                            adaptive_avg_pool(x, 3, 3)) < 1e-12);
    CHECK(ref::max_abs_diff(ref::adaptive_pool(ref::Plane::of(x), 3, 3, true),
                            adaptive_max_pool(x, 3, 3)) < 1e-12);
    CHECK(ref::max_abs_diff(ref::adaptive_pool(ref::Plane::of(x), 1, 1, false),
                            global_avg_pool(x)) < 1e-12);

    Tensor xg = Tensor::randn({1, 2, 4, 4}, rng).set_requires_grad(true);
    auto loss_avg = [&] {
        Tensor p = adaptive_avg_pool(xg, 3, 3);
        return mean_all(mul(p, p));
    };
    CHECK(ref::gradcheck(loss_avg, {xg}) < 1e-6);
    auto loss_max = [&] {
        Tensor p = adaptive_max_pool(xg, 2, 2);
        return mean_all(mul(p, p));
    };
    CHECK(ref::gradcheck(loss_max, {xg}) < 1e-6);
}

TEST_CASE("constant field pooling identity: maxpool(c) + avgpool(c) = 2c") {
    Tensor x = Tensor::full({1, 3, 14, 14}, 0.75);
    Tensor mixed = add(adaptive_max_pool(x, 12, 12), adaptive_avg_pool(x, 12, 12));
    for (int64_t i = 0; i < mixed.numel(); ++i) CHECK(mixed.data()[i] == doctest::Approx(1.5));
}

TEST_CASE("concat/slice partition the channel dimension") {
    Rng rng(18);
    Tensor a = Tensor::randn({2, 3, 4, 4}, rng);
    Tensor b = Tensor::randn({2, 5, 4, 4}, rng);
    Tensor cat = concat_channels({a, b});
    REQUIRE(cat.dim(1) == 8);
    Tensor a2 = slice_channels(cat, 0, 3);
    Tensor b2 = slice_channels(cat, 3, 8);
    CHECK(ref::max_abs_diff(ref::Plane::of(a), a2) == 0.0);
    CHECK(ref::max_abs_diff(ref::Plane::of(b), b2) == 0.0);

    Tensor ag = Tensor::randn({1, 2, 3, 3}, rng).set_requires_grad(true);
    Tensor bg = Tensor::randn({1, 3, 3, 3}, rng).set_requires_grad(true);
    auto loss = [&] {
        Tensor c = concat_channels({ag, bg});
        Tensor s = slice_channels(c, 1, 4);
        return mean_all(mul(s, s));
    };
    CHECK(ref::gradcheck(loss, {ag, bg}) < 1e-6);
}

TEST_CASE("broadcast mul covers per-pixel and per-channel patterns") {
    Rng rng(19);
    Tensor x = Tensor::randn({2, 4, 3, 3}, rng).set_requires_grad(true);
    Tensor wpix = Tensor::randn({2, 1, 3, 3}, rng).set_requires_grad(true);
    Tensor wch = Tensor::randn({2, 4, 1, 1}, rng).set_requires_grad(true);

    Tensor y = mul(x, wpix);
    for (int64_t c = 0; c < 4; ++c)
        CHECK(y.at(0, c, 1, 2) == doctest::Approx(x.at(0, c, 1, 2) * wpix.at(0, 0, 1, 2)));

    auto loss = [&] {
        Tensor t = mul(mul(x, wpix), wch);
        return mean_all(mul(t, t));
    };
    CHECK(ref::gradcheck(loss, {x, wpix, wch}) < 5e-6);
}

TEST_CASE("elementwise chain gradients (affine/clamp/log/sigmoid)") {
    Rng rng(20);
    Tensor x = Tensor::rand_uniform({1, 2, 3, 3}, rng, -2.0, 2.0).set_requires_grad(true);
    auto loss = [&] {
        Tensor p = sigmoid(x);
        Tensor q = clamp(p, 1e-7, 1.0 - 1e-7);
        return mean_all(mul(log_op(q), affine(q, -2.0, 1.5)));
    };
    CHECK(ref::gradcheck(loss, {x}) < 1e-6);
}

TEST_CASE("NoGradGuard suppresses graph construction") {
    Rng rng(21);
    Tensor x = Tensor::randn({1, 2, 3, 3}, rng).set_requires_grad(true);
    {
        NoGradGuard ng;
        Tensor y = mean_all(relu(x));
        CHECK_THROWS(y.backward());
    }
    CHECK_FALSE(x.grad().defined());
}

TEST_CASE("ops are deterministic") {
    Rng rng(22);
    Tensor x = Tensor::randn({2, 6, 9, 9}, rng);
    Tensor w = Tensor::randn({4, 6, 3, 3}, rng, 0.2);
    Tensor y1 = conv2d(x, w, Tensor(), 2, 1);
    Tensor y2 = conv2d(x, w, Tensor(), 2, 1);
    CHECK(std::memcmp(y1.data(), y2.data(), sizeof(double) * static_cast<size_t>(y1.numel())) == 0);
}

TEST_CASE("gradient accumulates across two uses of one tensor") {
    Tensor x = Tensor::from_data({1, 1, 1, 1}, {3.0}).set_requires_grad(true);
    Tensor y = mul(x, x);  // d/dx x^2 = 2x
    y.backward();
    CHECK(x.grad().value() == doctest::Approx(6.0));
}
