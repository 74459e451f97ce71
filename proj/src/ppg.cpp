#include "mgnet/ppg.hpp"

namespace mgnet {

Aspp::Aspp(int in_ch, Rng& rng)
    : rate6(in_ch, in_ch, 3, 1, 6, rng, true, 6),
      rate12(in_ch, in_ch, 3, 1, 12, rng, true, 12),
      rate18(in_ch, in_ch, 3, 1, 18, rng, true, 18),
      pool_proj(in_ch, in_ch, 1, 1, 0, rng),
      fuse(4 * in_ch, 128, 1, 1, 0, rng) {}

Tensor Aspp::forward(const Tensor& x) const {
    check(x.dim(2) >= 1 && x.dim(3) >= 1, "aspp: empty spatial extent");
    Tensor b6 = relu(rate6.forward(x));
    Tensor b12 = relu(rate12.forward(x));
    Tensor b18 = relu(rate18.forward(x));
    Tensor pooled = relu(pool_proj.forward(global_avg_pool(x)));
    Tensor bp = bilinear_resize(pooled, x.dim(2), x.dim(3));
    return relu(fuse.forward(concat_channels({b6, b12, b18, bp})));
}

void Aspp::params(NamedTensors& out, const std::string& prefix) const {
    rate6.params(out, join_name(prefix, "rate6"));
    rate12.params(out, join_name(prefix, "rate12"));
    rate18.params(out, join_name(prefix, "rate18"));
    pool_proj.params(out, join_name(prefix, "pool_proj"));
    fuse.params(out, join_name(prefix, "fuse"));
}

Refiner::Refiner(Rng& rng)
    : block1_a(33, 33, 3, 1, 1, rng),
      block1_b(33, 32, 3, 1, 1, rng),
      block2_a(32, 32, 3, 1, 1, rng),
      block2_b(32, 32, 3, 1, 1, rng),
      block3_a(32, 32, 3, 1, 1, rng),
      block3_b(32, 32, 3, 1, 1, rng),
      aspp(32, rng),
      head_a(128, 32, 1, 1, 0, rng),
      head_b(32, 1, 1, 1, 0, rng) {}

Tensor Refiner::refine_step(const Tensor& x, const Tensor& m_prev) const {
    check(x.dim(1) == 32, "refine_step: decoder feature must have 32 channels");
    check(m_prev.dim(1) == 1, "refine_step: logits map must be single-channel");
    check(m_prev.dim(2) == x.dim(2) && m_prev.dim(3) == x.dim(3),
          "refine_step: logits map must match the decoder feature size");

    Tensor cat = concat_channels({x, m_prev});  // 33 channels
    Tensor k1 = add(x, relu(block1_b.forward(relu(block1_a.forward(cat)))));
    Tensor k2 = add(k1, relu(block2_b.forward(relu(block2_a.forward(k1)))));
    Tensor k3 = add(k2, relu(block3_b.forward(relu(block3_a.forward(k2)))));
    Tensor a = aspp.forward(k3);
    return head_b.forward(head_a.forward(a));
}

Refiner::Result Refiner::refine(const Tensor& x, const Tensor& m0, int t_max) const {
    check(t_max >= 0, "refine: t_max must be nonnegative");
    Result r;
    r.trace.push_back(m0);
    Tensor m = m0;
    for (int t = 0; t < t_max; ++t) {
        m = refine_step(x, m);
        r.trace.push_back(m);
    }
    r.final_logits = m;
    return r;
}

void Refiner::params(NamedTensors& out, const std::string& prefix) const {
    block1_a.params(out, join_name(prefix, "block1_a"));
    block1_b.params(out, join_name(prefix, "block1_b"));
    block2_a.params(out, join_name(prefix, "block2_a"));
    block2_b.params(out, join_name(prefix, "block2_b"));
    block3_a.params(out, join_name(prefix, "block3_a"));
    block3_b.params(out, join_name(prefix, "block3_b"));
    aspp.params(out, join_name(prefix, "aspp"));
    head_a.params(out, join_name(prefix, "head_a"));
    head_b.params(out, join_name(prefix, "head_b"));
}

}  // namespace mgnet
