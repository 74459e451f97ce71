#include "mgnet/tensor.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <unordered_set>

namespace mgnet {

namespace {

thread_local bool g_grad_enabled = true;

using RowMajorMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMajorMat>;
using ConstMapMat = Eigen::Map<const RowMajorMat>;
using StridedMap = Eigen::Map<RowMajorMat, 0, Eigen::OuterStride<>>;
using ConstStridedMap = Eigen::Map<const RowMajorMat, 0, Eigen::OuterStride<>>;

std::shared_ptr<TensorImpl> make_impl(const Shape& shape) {
    auto impl = std::make_shared<TensorImpl>();
    impl->shape = shape;
    impl->data.assign(static_cast<size_t>(numel_of(shape)), 0.0);
    return impl;
}

double* grad_buf(TensorImpl& t) {
    if (!t.grad) t.grad = std::make_shared<std::vector<double>>(t.data.size(), 0.0);
    return t.grad->data();
}

bool any_requires_grad(const std::vector<Tensor>& ts) {
    for (const auto& t : ts)
        if (t.defined() && t.requires_grad()) return true;
    return false;
}

// Wraps op results: attaches the backward node when recording is on.
Tensor make_result(std::shared_ptr<TensorImpl> out, const std::vector<Tensor>& inputs,
                   std::function<void(const TensorImpl&)> backward) {
    if (g_grad_enabled && any_requires_grad(inputs)) {
        out->requires_grad = true;
        auto node = std::make_shared<GradNode>();
        for (const auto& t : inputs)
            if (t.defined()) node->inputs.push_back(t.impl());
        node->backward = std::move(backward);
        out->grad_fn = std::move(node);
    }
    return Tensor(std::move(out));
}

void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    check(a.shape() == b.shape(), std::string(op) + ": shape mismatch");
}

struct Dims4 {
    int64_t n, c, h, w;
};

Dims4 dims4(const Tensor& t) {
    check(t.ndim() == 4, "expected a 4D NCHW tensor");
    return {t.dim(0), t.dim(1), t.dim(2), t.dim(3)};
}

}  // namespace

int64_t numel_of(const Shape& shape) {
    int64_t n = 1;
    for (int64_t d : shape) {
        check(d > 0, "tensor dims must be positive");
        n *= d;
    }
    return n;
}

NoGradGuard::NoGradGuard() : prev(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = prev; }
bool grad_enabled() { return g_grad_enabled; }

Tensor Tensor::zeros(const Shape& shape) { return Tensor(make_impl(shape)); }

Tensor Tensor::full(const Shape& shape, double value) {
    auto impl = make_impl(shape);
    std::fill(impl->data.begin(), impl->data.end(), value);
    return Tensor(std::move(impl));
}

Tensor Tensor::from_data(const Shape& shape, std::vector<double> values) {
    check(static_cast<int64_t>(values.size()) == numel_of(shape), "from_data: size mismatch");
    auto impl = std::make_shared<TensorImpl>();
    impl->shape = shape;
    impl->data = std::move(values);
    return Tensor(std::move(impl));
}

Tensor Tensor::randn(const Shape& shape, Rng& rng, double stddev, double mean) {
    auto impl = make_impl(shape);
    for (auto& v : impl->data) v = rng.normal(mean, stddev);
    return Tensor(std::move(impl));
}

Tensor Tensor::rand_uniform(const Shape& shape, Rng& rng, double lo, double hi) {
    auto impl = make_impl(shape);
    for (auto& v : impl->data) v = rng.uniform(lo, hi);
    return Tensor(std::move(impl));
}

double Tensor::at(int64_t n, int64_t c, int64_t h, int64_t w) const {
    auto d = dims4(*this);
    return impl_->data[static_cast<size_t>(((n * d.c + c) * d.h + h) * d.w + w)];
}

double& Tensor::at(int64_t n, int64_t c, int64_t h, int64_t w) {
    auto d = dims4(*this);
    return impl_->data[static_cast<size_t>(((n * d.c + c) * d.h + h) * d.w + w)];
}

double Tensor::value() const {
    check(numel() == 1, "value(): tensor is not a scalar");
    return impl_->data[0];
}

Tensor& Tensor::set_requires_grad(bool v) {
    impl_->requires_grad = v;
    return *this;
}

Tensor Tensor::grad() const {
    if (!impl_->grad) return Tensor();
    auto g = std::make_shared<TensorImpl>();
    g->shape = impl_->shape;
    g->data = *impl_->grad;
    return Tensor(std::move(g));
}

void Tensor::zero_grad() { impl_->grad.reset(); }

Tensor Tensor::detach() const {
    auto impl = std::make_shared<TensorImpl>();
    impl->shape = impl_->shape;
    impl->data = impl_->data;
    return Tensor(std::move(impl));
}

Tensor Tensor::clone() const {
    Tensor out = detach();
    out.set_requires_grad(impl_->requires_grad);
    return out;
}

void Tensor::backward() {
    check(defined() && numel() == 1, "backward(): loss must be a defined scalar");
    check(impl_->grad_fn || impl_->requires_grad, "backward(): tensor does not require grad");

    // Post-order over the graph, then run nodes in reverse. The order list
    // owns the impls: freeing a node's closure must not drop inputs that are
    // still pending.
    std::vector<std::shared_ptr<TensorImpl>> order;
    std::unordered_set<TensorImpl*> seen;
    std::vector<std::pair<std::shared_ptr<TensorImpl>, size_t>> stack;
    stack.emplace_back(impl_, 0);
    seen.insert(impl_.get());
    while (!stack.empty()) {
        auto& [node, idx] = stack.back();
        if (!node->grad_fn || idx >= node->grad_fn->inputs.size()) {
            order.push_back(node);
            stack.pop_back();
            continue;
        }
        const std::shared_ptr<TensorImpl>& child = node->grad_fn->inputs[idx++];
        if ((child->grad_fn || child->requires_grad) && seen.insert(child.get()).second)
            stack.emplace_back(child, 0);
    }

    grad_buf(*impl_)[0] += 1.0;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        TensorImpl* t = it->get();
        if (!t->grad_fn) continue;
        if (t->grad) t->grad_fn->backward(*t);
        t->grad_fn.reset();
        t->grad.reset();  // intermediates do not keep gradients
    }
}

// ---------------------------------------------------------------------------
// elementwise
// ---------------------------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "add");
    auto out = make_impl(a.shape());
    const double* pa = a.data();
    const double* pb = b.data();
    for (size_t i = 0; i < out->data.size(); ++i) out->data[i] = pa[i] + pb[i];
    auto ia = a.impl(), ib = b.impl();
    return make_result(std::move(out), {a, b}, [ia, ib](const TensorImpl& o) {
        const double* go = o.grad->data();
        if (ia->requires_grad || ia->grad_fn) {
            double* g = grad_buf(*ia);
            for (size_t i = 0; i < o.data.size(); ++i) g[i] += go[i];
        }
        if (ib->requires_grad || ib->grad_fn) {
            double* g = grad_buf(*ib);
            for (size_t i = 0; i < o.data.size(); ++i) g[i] += go[i];
        }
    });
}

Tensor sub(const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "sub");
    auto out = make_impl(a.shape());
    const double* pa = a.data();
    const double* pb = b.data();
    for (size_t i = 0; i < out->data.size(); ++i) out->data[i] = pa[i] - pb[i];
    auto ia = a.impl(), ib = b.impl();
    return make_result(std::move(out), {a, b}, [ia, ib](const TensorImpl& o) {
        const double* go = o.grad->data();
        if (ia->requires_grad || ia->grad_fn) {
            double* g = grad_buf(*ia);
            for (size_t i = 0; i < o.data.size(); ++i) g[i] += go[i];
        }
        if (ib->requires_grad || ib->grad_fn) {
            double* g = grad_buf(*ib);
            for (size_t i = 0; i < o.data.size(); ++i) g[i] -= go[i];
        }
    });
}

namespace {

// Broadcast-aware flat index into a tensor of shape `s` given out coords.
inline size_t bidx(const Shape& s, int64_t n, int64_t c, int64_t h, int64_t w) {
    int64_t sn = s[0] == 1 ? 0 : n;
    int64_t sc = s[1] == 1 ? 0 : c;
    int64_t sh = s[2] == 1 ? 0 : h;
    int64_t sw = s[3] == 1 ? 0 : w;
    return static_cast<size_t>(((sn * s[1] + sc) * s[2] + sh) * s[3] + sw);
}

}  // namespace

Tensor mul(const Tensor& a, const Tensor& b) {
    if (a.shape() == b.shape()) {
        auto out = make_impl(a.shape());
        const double* pa = a.data();
        const double* pb = b.data();
        for (size_t i = 0; i < out->data.size(); ++i) out->data[i] = pa[i] * pb[i];
        auto ia = a.impl(), ib = b.impl();
        return make_result(std::move(out), {a, b}, [ia, ib](const TensorImpl& o) {
            const double* go = o.grad->data();
            if (ia->requires_grad || ia->grad_fn) {
                double* g = grad_buf(*ia);
                for (size_t i = 0; i < o.data.size(); ++i) g[i] += go[i] * ib->data[i];
            }
            if (ib->requires_grad || ib->grad_fn) {
                double* g = grad_buf(*ib);
                for (size_t i = 0; i < o.data.size(); ++i) g[i] += go[i] * ia->data[i];
            }
        });
    }

    check(a.ndim() == 4 && b.ndim() == 4, "mul: broadcasting needs 4D tensors");
    Shape os(4);
    for (int i = 0; i < 4; ++i) {
        int64_t da = a.dim(i), db = b.dim(i);
        check(da == db || da == 1 || db == 1, "mul: incompatible shapes");
        os[static_cast<size_t>(i)] = std::max(da, db);
    }
    auto out = make_impl(os);
    const Shape sa = a.shape(), sb = b.shape();
    {
        const double* pa = a.data();
        const double* pb = b.data();
        size_t i = 0;
        for (int64_t n = 0; n < os[0]; ++n)
            for (int64_t c = 0; c < os[1]; ++c)
                for (int64_t h = 0; h < os[2]; ++h)
                    for (int64_t w = 0; w < os[3]; ++w, ++i)
                        out->data[i] = pa[bidx(sa, n, c, h, w)] * pb[bidx(sb, n, c, h, w)];
    }
    auto ia = a.impl(), ib = b.impl();
    return make_result(std::move(out), {a, b}, [ia, ib, sa, sb, os](const TensorImpl& o) {
        const double* go = o.grad->data();
        const bool need_a = ia->requires_grad || ia->grad_fn;
        const bool need_b = ib->requires_grad || ib->grad_fn;
        double* ga = need_a ? grad_buf(*ia) : nullptr;
        double* gb = need_b ? grad_buf(*ib) : nullptr;
        size_t i = 0;
        for (int64_t n = 0; n < os[0]; ++n)
            for (int64_t c = 0; c < os[1]; ++c)
                for (int64_t h = 0; h < os[2]; ++h)
                    for (int64_t w = 0; w < os[3]; ++w, ++i) {
                        size_t xi = bidx(sa, n, c, h, w);
                        size_t yi = bidx(sb, n, c, h, w);
                        if (need_a) ga[xi] += go[i] * ib->data[yi];
                        if (need_b) gb[yi] += go[i] * ia->data[xi];
                    }
    });
}

Tensor affine(const Tensor& x, double scale, double shift) {
    auto out = make_impl(x.shape());
    const double* px = x.data();
    for (size_t i = 0; i < out->data.size(); ++i) out->data[i] = scale * px[i] + shift;
    auto ix = x.impl();
    return make_result(std::move(out), {x}, [ix, scale](const TensorImpl& o) {
        const double* go = o.grad->data();
        double* g = grad_buf(*ix);
        for (size_t i = 0; i < o.data.size(); ++i) g[i] += scale * go[i];
    });
}

Tensor relu(const Tensor& x) {
    auto out = make_impl(x.shape());
    const double* px = x.data();
    for (size_t i = 0; i < out->data.size(); ++i) out->data[i] = px[i] > 0.0 ? px[i] : 0.0;
    auto ix = x.impl();
    return make_result(std::move(out), {x}, [ix](const TensorImpl& o) {
        const double* go = o.grad->data();
        double* g = grad_buf(*ix);
        for (size_t i = 0; i < o.data.size(); ++i)
            if (o.data[i] > 0.0) g[i] += go[i];
    });
}

Tensor sigmoid(const Tensor& x) {
    auto out = make_impl(x.shape());
    const double* px = x.data();
    for (size_t i = 0; i < out->data.size(); ++i) {
        double v = px[i];
        out->data[i] = v >= 0.0 ? 1.0 / (1.0 + std::exp(-v))
                                : std::exp(v) / (1.0 + std::exp(v));
    }
    auto ix = x.impl();
    return make_result(std::move(out), {x}, [ix](const TensorImpl& o) {
        const double* go = o.grad->data();
        double* g = grad_buf(*ix);
        for (size_t i = 0; i < o.data.size(); ++i) {
            double y = o.data[i];
            g[i] += go[i] * y * (1.0 - y);
        }
    });
}

Tensor log_op(const Tensor& x) {
    auto out = make_impl(x.shape());
    const double* px = x.data();
    for (size_t i = 0; i < out->data.size(); ++i) out->data[i] = std::log(px[i]);
    auto ix = x.impl();
    return make_result(std::move(out), {x}, [ix](const TensorImpl& o) {
        const double* go = o.grad->data();
        double* g = grad_buf(*ix);
        for (size_t i = 0; i < o.data.size(); ++i) g[i] += go[i] / ix->data[i];
    });
}

Tensor clamp(const Tensor& x, double lo, double hi) {
    auto out = make_impl(x.shape());
    const double* px = x.data();
    for (size_t i = 0; i < out->data.size(); ++i) out->data[i] = std::clamp(px[i], lo, hi);
    auto ix = x.impl();
    return make_result(std::move(out), {x}, [ix, lo, hi](const TensorImpl& o) {
        const double* go = o.grad->data();
        double* g = grad_buf(*ix);
        for (size_t i = 0; i < o.data.size(); ++i) {
            double v = ix->data[i];
            if (v > lo && v < hi) g[i] += go[i];
        }
    });
}

Tensor softmax_channels(const Tensor& x) {
    auto d = dims4(x);
    auto out = make_impl(x.shape());
    const double* px = x.data();
    double* po = out->data.data();
    const int64_t hw = d.h * d.w;
    const int64_t chw = d.c * hw;
    for (int64_t n = 0; n < d.n; ++n)
        for (int64_t p = 0; p < hw; ++p) {
            const double* col = px + n * chw + p;
            double* ocol = po + n * chw + p;
            double mx = col[0];
            for (int64_t c = 1; c < d.c; ++c) mx = std::max(mx, col[c * hw]);
            double sum = 0.0;
            for (int64_t c = 0; c < d.c; ++c) {
                double e = std::exp(col[c * hw] - mx);
                ocol[c * hw] = e;
                sum += e;
            }
            for (int64_t c = 0; c < d.c; ++c) ocol[c * hw] /= sum;
        }
    auto ix = x.impl();
    return make_result(std::move(out), {x}, [ix, d, hw, chw](const TensorImpl& o) {
        const double* go = o.grad->data();
        const double* y = o.data.data();
        double* g = grad_buf(*ix);
        for (int64_t n = 0; n < d.n; ++n)
            for (int64_t p = 0; p < hw; ++p) {
                const size_t base = static_cast<size_t>(n * chw + p);
                double dot = 0.0;
                for (int64_t c = 0; c < d.c; ++c) {
                    size_t i = base + static_cast<size_t>(c * hw);
                    dot += go[i] * y[i];
                }
                for (int64_t c = 0; c < d.c; ++c) {
                    size_t i = base + static_cast<size_t>(c * hw);
                    g[i] += y[i] * (go[i] - dot);
                }
            }
    });
}

Tensor mean_all(const Tensor& x) {
    double sum = 0.0;
    for (int64_t i = 0; i < x.numel(); ++i) sum += x.data()[i];
    const double inv = 1.0 / static_cast<double>(x.numel());
    auto out = make_impl({1});
    out->data[0] = sum * inv;
    auto ix = x.impl();
    return make_result(std::move(out), {x}, [ix, inv](const TensorImpl& o) {
        const double go = (*o.grad)[0] * inv;
        double* g = grad_buf(*ix);
        for (size_t i = 0; i < ix->data.size(); ++i) g[i] += go;
    });
}

Tensor sum_all(const Tensor& x) {
    double sum = 0.0;
    for (int64_t i = 0; i < x.numel(); ++i) sum += x.data()[i];
    auto out = make_impl({1});
    out->data[0] = sum;
    auto ix = x.impl();
    return make_result(std::move(out), {x}, [ix](const TensorImpl& o) {
        const double go = (*o.grad)[0];
        double* g = grad_buf(*ix);
        for (size_t i = 0; i < ix->data.size(); ++i) g[i] += go;
    });
}

// ---------------------------------------------------------------------------
// channel concat / slice
// ---------------------------------------------------------------------------

Tensor concat_channels(const std::vector<Tensor>& xs) {
    check(!xs.empty(), "concat_channels: no inputs");
    auto d0 = dims4(xs[0]);
    int64_t ctotal = 0;
    for (const auto& x : xs) {
        auto d = dims4(x);
        check(d.n == d0.n && d.h == d0.h && d.w == d0.w, "concat_channels: spatial/batch mismatch");
        ctotal += d.c;
    }
    auto out = make_impl({d0.n, ctotal, d0.h, d0.w});
    const int64_t hw = d0.h * d0.w;
    int64_t coff = 0;
    for (const auto& x : xs) {
        auto d = dims4(x);
        for (int64_t n = 0; n < d.n; ++n)
            std::memcpy(out->data.data() + ((n * ctotal + coff) * hw),
                        x.data() + n * d.c * hw, static_cast<size_t>(d.c * hw) * sizeof(double));
        coff += d.c;
    }
    std::vector<std::shared_ptr<TensorImpl>> impls;
    std::vector<int64_t> chans;
    for (const auto& x : xs) {
        impls.push_back(x.impl());
        chans.push_back(x.dim(1));
    }
    return make_result(std::move(out), xs, [impls, chans, d0, hw, ctotal](const TensorImpl& o) {
        const double* go = o.grad->data();
        int64_t coff = 0;
        for (size_t k = 0; k < impls.size(); ++k) {
            auto& in = *impls[k];
            const int64_t c = chans[k];
            if (in.requires_grad || in.grad_fn) {
                double* g = grad_buf(in);
                for (int64_t n = 0; n < d0.n; ++n) {
                    const double* src = go + ((n * ctotal + coff) * hw);
                    double* dst = g + n * c * hw;
                    for (int64_t i = 0; i < c * hw; ++i) dst[i] += src[i];
                }
            }
            coff += c;
        }
    });
}

Tensor slice_channels(const Tensor& x, int64_t c0, int64_t c1) {
    auto d = dims4(x);
    check(0 <= c0 && c0 < c1 && c1 <= d.c, "slice_channels: bad range");
    const int64_t cs = c1 - c0;
    const int64_t hw = d.h * d.w;
    auto out = make_impl({d.n, cs, d.h, d.w});
    for (int64_t n = 0; n < d.n; ++n)
        std::memcpy(out->data.data() + n * cs * hw, x.data() + ((n * d.c + c0) * hw),
                    static_cast<size_t>(cs * hw) * sizeof(double));
    auto ix = x.impl();
    return make_result(std::move(out), {x}, [ix, d, c0, cs, hw](const TensorImpl& o) {
        const double* go = o.grad->data();
        double* g = grad_buf(*ix);
        for (int64_t n = 0; n < d.n; ++n) {
            const double* src = go + n * cs * hw;
            double* dst = g + ((n * d.c + c0) * hw);
            for (int64_t i = 0; i < cs * hw; ++i) dst[i] += src[i];
        }
    });
}

// ---------------------------------------------------------------------------
// conv2d: blocked im2col + GEMM
// ---------------------------------------------------------------------------

namespace {

struct ConvGeom {
    int64_t N, Cin, H, W, Cout, kh, kw, OH, OW;
    int stride, padding, dilation, groups;
    int64_t cin_g, cout_g, K, P;  // per-group channels, patch size, pixels
};

ConvGeom conv_geom(const Tensor& x, const Tensor& w, int stride, int padding, int dilation,
                   int groups) {
    auto dx = dims4(x);
    check(w.ndim() == 4, "conv2d: weight must be 4D");
    ConvGeom g;
    g.N = dx.n;
    g.Cin = dx.c;
    g.H = dx.h;
    g.W = dx.w;
    g.Cout = w.dim(0);
    g.kh = w.dim(2);
    g.kw = w.dim(3);
    g.stride = stride;
    g.padding = padding;
    g.dilation = dilation;
    g.groups = groups;
    check(stride >= 1 && dilation >= 1 && padding >= 0 && groups >= 1, "conv2d: bad hyperparams");
    check(g.Cin % groups == 0 && g.Cout % groups == 0, "conv2d: channels not divisible by groups");
    g.cin_g = g.Cin / groups;
    g.cout_g = g.Cout / groups;
    check(w.dim(1) == g.cin_g, "conv2d: weight input-channel mismatch");
    g.OH = (g.H + 2 * padding - dilation * (g.kh - 1) - 1) / stride + 1;
    g.OW = (g.W + 2 * padding - dilation * (g.kw - 1) - 1) / stride + 1;
    check(g.OH >= 1 && g.OW >= 1, "conv2d: output collapses to zero size");
    g.K = g.cin_g * g.kh * g.kw;
    g.P = g.OH * g.OW;
    return g;
}

// In-bounds output-x interval [lo, hi) for one kernel column: pixels whose
// sampled ix = ox*stride - padding + kx*dilation lands inside [0, W).
inline void ox_bounds(const ConvGeom& g, int64_t kx, int64_t& lo, int64_t& hi) {
    const int64_t off = kx * g.dilation - g.padding;
    lo = off < 0 ? (-off + g.stride - 1) / g.stride : 0;
    hi = std::min(g.OW, off < g.W ? (g.W - 1 - off) / g.stride + 1 : int64_t(0));
    if (hi < lo) hi = lo;
}

// Fill col (row-major K x B) from x for pixels [p0, p0+B) of sample n, group grp.
void im2col_block(const ConvGeom& g, const double* x, int64_t n, int grp, int64_t p0, int64_t B,
                  double* col) {
    for (int64_t cg = 0; cg < g.cin_g; ++cg) {
        const double* xc = x + ((n * g.Cin + grp * g.cin_g + cg) * g.H) * g.W;
        for (int64_t ky = 0; ky < g.kh; ++ky)
            for (int64_t kx = 0; kx < g.kw; ++kx) {
                double* row = col + ((cg * g.kh + ky) * g.kw + kx) * B;
                int64_t lo, hi;
                ox_bounds(g, kx, lo, hi);
                const int64_t xoff = kx * g.dilation - g.padding;
                int64_t b = 0;
                int64_t oy = p0 / g.OW;
                int64_t ox = p0 % g.OW;
                while (b < B) {
                    const int64_t span = std::min(g.OW - ox, B - b);
                    const int64_t iy = oy * g.stride - g.padding + ky * g.dilation;
                    if (iy < 0 || iy >= g.H) {
                        std::fill(row + b, row + b + span, 0.0);
                    } else {
                        const double* src = xc + iy * g.W;
                        const int64_t c_lo = std::max(lo, ox), c_hi = std::min(hi, ox + span);
                        for (int64_t j = ox; j < std::min(c_lo, ox + span); ++j)
                            row[b + j - ox] = 0.0;
                        if (g.stride == 1)
                            for (int64_t j = c_lo; j < c_hi; ++j) row[b + j - ox] = src[j + xoff];
                        else
                            for (int64_t j = c_lo; j < c_hi; ++j)
                                row[b + j - ox] = src[j * g.stride + xoff];
                        for (int64_t j = std::max(c_hi, ox); j < ox + span; ++j)
                            row[b + j - ox] = 0.0;
                    }
                    b += span;
                    ox += span;
                    if (ox == g.OW) {
                        ox = 0;
                        ++oy;
                    }
                }
            }
    }
}

// Scatter-add of colgrad (row-major K x B) back into grad_x.
void col2im_block(const ConvGeom& g, double* gx, int64_t n, int grp, int64_t p0, int64_t B,
                  const double* col) {
    for (int64_t cg = 0; cg < g.cin_g; ++cg) {
        double* xc = gx + ((n * g.Cin + grp * g.cin_g + cg) * g.H) * g.W;
        for (int64_t ky = 0; ky < g.kh; ++ky)
            for (int64_t kx = 0; kx < g.kw; ++kx) {
                const double* row = col + ((cg * g.kh + ky) * g.kw + kx) * B;
                int64_t lo, hi;
                ox_bounds(g, kx, lo, hi);
                const int64_t xoff = kx * g.dilation - g.padding;
                int64_t b = 0;
                int64_t oy = p0 / g.OW;
                int64_t ox = p0 % g.OW;
                while (b < B) {
                    const int64_t span = std::min(g.OW - ox, B - b);
                    const int64_t iy = oy * g.stride - g.padding + ky * g.dilation;
                    if (iy >= 0 && iy < g.H) {
                        double* dst = xc + iy * g.W;
                        const int64_t c_lo = std::max(lo, ox), c_hi = std::min(hi, ox + span);
                        if (g.stride == 1)
                            for (int64_t j = c_lo; j < c_hi; ++j) dst[j + xoff] += row[b + j - ox];
                        else
                            for (int64_t j = c_lo; j < c_hi; ++j)
                                dst[j * g.stride + xoff] += row[b + j - ox];
                    }
                    b += span;
                    ox += span;
                    if (ox == g.OW) {
                        ox = 0;
                        ++oy;
                    }
                }
            }
    }
}

int64_t conv_block_size(const ConvGeom& g) {
    constexpr int64_t kMaxColElems = int64_t(1) << 21;  // 16 MB of doubles
    return std::max<int64_t>(int64_t(64), std::min(g.P, kMaxColElems / std::max<int64_t>(1, g.K)));
}

bool is_pointwise(const ConvGeom& g) {
    return g.kh == 1 && g.kw == 1 && g.stride == 1 && g.padding == 0 && g.dilation == 1;
}

}  // namespace

Tensor conv2d(const Tensor& x, const Tensor& weight, const Tensor& bias, int stride, int padding,
              int dilation, int groups) {
    const ConvGeom g = conv_geom(x, weight, stride, padding, dilation, groups);
    if (bias.defined()) check(bias.numel() == g.Cout, "conv2d: bias size mismatch");

    auto out = make_impl({g.N, g.Cout, g.OH, g.OW});
    const double* px = x.data();
    double* po = out->data.data();
    const int64_t Bmax = conv_block_size(g);
    std::vector<double> colbuf;
    if (!is_pointwise(g)) colbuf.resize(static_cast<size_t>(g.K * std::min(Bmax, g.P)));

    for (int64_t n = 0; n < g.N; ++n)
        for (int grp = 0; grp < g.groups; ++grp) {
            ConstMapMat W(weight.data() + grp * g.cout_g * g.K, g.cout_g, g.K);
            if (is_pointwise(g)) {
                ConstMapMat col(px + ((n * g.Cin + grp * g.cin_g) * g.P), g.cin_g, g.P);
                StridedMap dst(po + ((n * g.Cout + grp * g.cout_g) * g.P), g.cout_g, g.P,
                               Eigen::OuterStride<>(g.P));
                dst.noalias() = W * col;
            } else {
                for (int64_t p0 = 0; p0 < g.P; p0 += Bmax) {
                    const int64_t B = std::min(Bmax, g.P - p0);
                    im2col_block(g, px, n, grp, p0, B, colbuf.data());
                    ConstMapMat col(colbuf.data(), g.K, B);
                    StridedMap dst(po + ((n * g.Cout + grp * g.cout_g) * g.P + p0), g.cout_g, B,
                                   Eigen::OuterStride<>(g.P));
                    dst.noalias() = W * col;
                }
            }
        }

    if (bias.defined()) {
        const double* pb = bias.data();
        for (int64_t n = 0; n < g.N; ++n)
            for (int64_t c = 0; c < g.Cout; ++c) {
                double* row = po + (n * g.Cout + c) * g.P;
                const double b = pb[c];
                for (int64_t p = 0; p < g.P; ++p) row[p] += b;
            }
    }

    auto ix = x.impl();
    auto iw = weight.impl();
    auto ib = bias.defined() ? bias.impl() : nullptr;
    std::vector<Tensor> inputs = {x, weight};
    if (bias.defined()) inputs.push_back(bias);

    return make_result(std::move(out), inputs, [ix, iw, ib, g, Bmax](const TensorImpl& o) {
        const double* go = o.grad->data();
        const bool need_x = ix->requires_grad || ix->grad_fn;
        const bool need_w = iw->requires_grad || iw->grad_fn;
        const bool need_b = ib && (ib->requires_grad || ib->grad_fn);

        if (need_b) {
            double* gb = grad_buf(*ib);
            for (int64_t n = 0; n < g.N; ++n)
                for (int64_t c = 0; c < g.Cout; ++c) {
                    const double* row = go + (n * g.Cout + c) * g.P;
                    double s = 0.0;
                    for (int64_t p = 0; p < g.P; ++p) s += row[p];
                    gb[c] += s;
                }
        }
        if (!need_x && !need_w) return;

        double* gx = need_x ? grad_buf(*ix) : nullptr;
        double* gw = need_w ? grad_buf(*iw) : nullptr;
        std::vector<double> colbuf, cgrad;
        if (!is_pointwise(g)) {
            if (need_w) colbuf.resize(static_cast<size_t>(g.K * std::min(Bmax, g.P)));
            if (need_x) cgrad.resize(static_cast<size_t>(g.K * std::min(Bmax, g.P)));
        }

        for (int64_t n = 0; n < g.N; ++n)
            for (int grp = 0; grp < g.groups; ++grp) {
                ConstMapMat W(iw->data.data() + grp * g.cout_g * g.K, g.cout_g, g.K);
                if (is_pointwise(g)) {
                    ConstStridedMap goB(go + ((n * g.Cout + grp * g.cout_g) * g.P), g.cout_g, g.P,
                                        Eigen::OuterStride<>(g.P));
                    if (need_w) {
                        ConstMapMat col(ix->data.data() + ((n * g.Cin + grp * g.cin_g) * g.P),
                                        g.cin_g, g.P);
                        MapMat gwm(gw + grp * g.cout_g * g.K, g.cout_g, g.K);
                        gwm.noalias() += goB * col.transpose();
                    }
                    if (need_x) {
                        StridedMap gxm(gx + ((n * g.Cin + grp * g.cin_g) * g.P), g.cin_g, g.P,
                                       Eigen::OuterStride<>(g.P));
                        gxm.noalias() += W.transpose() * goB;
                    }
                } else {
                    for (int64_t p0 = 0; p0 < g.P; p0 += Bmax) {
                        const int64_t B = std::min(Bmax, g.P - p0);
                        ConstStridedMap goB(go + ((n * g.Cout + grp * g.cout_g) * g.P + p0),
                                            g.cout_g, B, Eigen::OuterStride<>(g.P));
                        if (need_w) {
                            im2col_block(g, ix->data.data(), n, grp, p0, B, colbuf.data());
                            ConstMapMat col(colbuf.data(), g.K, B);
                            MapMat gwm(gw + grp * g.cout_g * g.K, g.cout_g, g.K);
                            gwm.noalias() += goB * col.transpose();
                        }
                        if (need_x) {
                            MapMat cg(cgrad.data(), g.K, B);
                            cg.noalias() = W.transpose() * goB;
                            col2im_block(g, gx, n, grp, p0, B, cgrad.data());
                        }
                    }
                }
            }
    });
}

// ---------------------------------------------------------------------------
// batch norm
// ---------------------------------------------------------------------------

Tensor batch_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, Tensor running_mean,
                  Tensor running_var, bool training, double momentum, double eps) {
    auto d = dims4(x);
    check(gamma.numel() == d.c && beta.numel() == d.c, "batch_norm: affine size mismatch");
    check(running_mean.numel() == d.c && running_var.numel() == d.c,
          "batch_norm: running stats size mismatch");

    const int64_t hw = d.h * d.w;
    const int64_t count = d.n * hw;
    std::vector<double> mean(static_cast<size_t>(d.c)), invstd(static_cast<size_t>(d.c));

    if (training) {
        for (int64_t c = 0; c < d.c; ++c) {
            double s = 0.0, s2 = 0.0;
            for (int64_t n = 0; n < d.n; ++n) {
                const double* row = x.data() + (n * d.c + c) * hw;
                for (int64_t p = 0; p < hw; ++p) {
                    s += row[p];
                    s2 += row[p] * row[p];
                }
            }
            const double m = s / static_cast<double>(count);
            const double var = std::max(0.0, s2 / static_cast<double>(count) - m * m);
            mean[static_cast<size_t>(c)] = m;
            invstd[static_cast<size_t>(c)] = 1.0 / std::sqrt(var + eps);
            const double unbiased =
                count > 1 ? var * static_cast<double>(count) / static_cast<double>(count - 1) : var;
            running_mean.data()[c] = (1.0 - momentum) * running_mean.data()[c] + momentum * m;
            running_var.data()[c] = (1.0 - momentum) * running_var.data()[c] + momentum * unbiased;
        }
    } else {
        for (int64_t c = 0; c < d.c; ++c) {
            mean[static_cast<size_t>(c)] = running_mean.data()[c];
            invstd[static_cast<size_t>(c)] = 1.0 / std::sqrt(running_var.data()[c] + eps);
        }
    }

    auto xhat = std::make_shared<std::vector<double>>(x.vec().size());
    auto out = make_impl(x.shape());
    for (int64_t n = 0; n < d.n; ++n)
        for (int64_t c = 0; c < d.c; ++c) {
            const double* row = x.data() + (n * d.c + c) * hw;
            double* hrow = xhat->data() + (n * d.c + c) * hw;
            double* orow = out->data.data() + (n * d.c + c) * hw;
            const double m = mean[static_cast<size_t>(c)];
            const double is = invstd[static_cast<size_t>(c)];
            const double gm = gamma.data()[c];
            const double bt = beta.data()[c];
            for (int64_t p = 0; p < hw; ++p) {
                const double h = (row[p] - m) * is;
                hrow[p] = h;
                orow[p] = gm * h + bt;
            }
        }

    auto ix = x.impl();
    auto ig = gamma.impl();
    auto ibt = beta.impl();
    return make_result(
        std::move(out), {x, gamma, beta},
        [ix, ig, ibt, xhat, invstd, d, hw, count, training](const TensorImpl& o) {
            const double* go = o.grad->data();
            const bool need_x = ix->requires_grad || ix->grad_fn;
            const bool need_g = ig->requires_grad || ig->grad_fn;
            const bool need_b = ibt->requires_grad || ibt->grad_fn;
            double* gx = need_x ? grad_buf(*ix) : nullptr;
            double* gg = need_g ? grad_buf(*ig) : nullptr;
            double* gb = need_b ? grad_buf(*ibt) : nullptr;

            for (int64_t c = 0; c < d.c; ++c) {
                double sum_go = 0.0, sum_gh = 0.0;
                for (int64_t n = 0; n < d.n; ++n) {
                    const double* grow = go + (n * d.c + c) * hw;
                    const double* hrow = xhat->data() + (n * d.c + c) * hw;
                    for (int64_t p = 0; p < hw; ++p) {
                        sum_go += grow[p];
                        sum_gh += grow[p] * hrow[p];
                    }
                }
                if (need_g) gg[c] += sum_gh;
                if (need_b) gb[c] += sum_go;
                if (!need_x) continue;
                const double gm = ig->data[static_cast<size_t>(c)];
                const double is = invstd[static_cast<size_t>(c)];
                if (training) {
                    const double invm = 1.0 / static_cast<double>(count);
                    for (int64_t n = 0; n < d.n; ++n) {
                        double* grow_x = gx + (n * d.c + c) * hw;
                        const double* grow = go + (n * d.c + c) * hw;
                        const double* hrow = xhat->data() + (n * d.c + c) * hw;
                        for (int64_t p = 0; p < hw; ++p)
                            grow_x[p] += gm * is *
                                         (grow[p] - sum_go * invm - hrow[p] * sum_gh * invm);
                    }
                } else {
                    for (int64_t n = 0; n < d.n; ++n) {
                        double* grow_x = gx + (n * d.c + c) * hw;
                        const double* grow = go + (n * d.c + c) * hw;
                        for (int64_t p = 0; p < hw; ++p) grow_x[p] += gm * is * grow[p];
                    }
                }
            }
        });
}

// ---------------------------------------------------------------------------
// resize & pooling
// ---------------------------------------------------------------------------

namespace {

struct LerpIdx {
    int64_t i0, i1;
    double w0, w1;
};

// Half-pixel source mapping, clamped at borders.
LerpIdx lerp_index(int64_t o, int64_t in_size, int64_t out_size) {
    const double src = (static_cast<double>(o) + 0.5) * static_cast<double>(in_size) /
                           static_cast<double>(out_size) -
                       0.5;
    double f = std::floor(src);
    double t = src - f;
    int64_t i0 = static_cast<int64_t>(f);
    int64_t i1 = i0 + 1;
    if (i0 < 0) i0 = 0;
    if (i1 < 0) i1 = 0;
    if (i0 > in_size - 1) i0 = in_size - 1;
    if (i1 > in_size - 1) i1 = in_size - 1;
    return {i0, i1, 1.0 - t, t};
}

}  // namespace

Tensor bilinear_resize(const Tensor& x, int64_t out_h, int64_t out_w) {
    auto d = dims4(x);
    check(out_h >= 1 && out_w >= 1, "bilinear_resize: bad target size");
    auto out = make_impl({d.n, d.c, out_h, out_w});

    std::vector<LerpIdx> ys(static_cast<size_t>(out_h)), xs(static_cast<size_t>(out_w));
    for (int64_t o = 0; o < out_h; ++o) ys[static_cast<size_t>(o)] = lerp_index(o, d.h, out_h);
    for (int64_t o = 0; o < out_w; ++o) xs[static_cast<size_t>(o)] = lerp_index(o, d.w, out_w);

    const double* px = x.data();
    double* po = out->data.data();
    for (int64_t n = 0; n < d.n; ++n)
        for (int64_t c = 0; c < d.c; ++c) {
            const double* plane = px + (n * d.c + c) * d.h * d.w;
            double* oplane = po + (n * d.c + c) * out_h * out_w;
            for (int64_t oy = 0; oy < out_h; ++oy) {
                const auto& Y = ys[static_cast<size_t>(oy)];
                for (int64_t ox = 0; ox < out_w; ++ox) {
                    const auto& X = xs[static_cast<size_t>(ox)];
                    oplane[oy * out_w + ox] =
                        Y.w0 * (X.w0 * plane[Y.i0 * d.w + X.i0] + X.w1 * plane[Y.i0 * d.w + X.i1]) +
                        Y.w1 * (X.w0 * plane[Y.i1 * d.w + X.i0] + X.w1 * plane[Y.i1 * d.w + X.i1]);
                }
            }
        }

    auto ix = x.impl();
    return make_result(std::move(out), {x}, [ix, d, ys, xs, out_h, out_w](const TensorImpl& o) {
        const double* go = o.grad->data();
        double* g = grad_buf(*ix);
        for (int64_t n = 0; n < d.n; ++n)
            for (int64_t c = 0; c < d.c; ++c) {
                double* gplane = g + (n * d.c + c) * d.h * d.w;
                const double* oplane = go + (n * d.c + c) * out_h * out_w;
                for (int64_t oy = 0; oy < out_h; ++oy) {
                    const auto& Y = ys[static_cast<size_t>(oy)];
                    for (int64_t ox = 0; ox < out_w; ++ox) {
                        const auto& X = xs[static_cast<size_t>(ox)];
                        const double v = oplane[oy * out_w + ox];
                        gplane[Y.i0 * d.w + X.i0] += Y.w0 * X.w0 * v;
                        gplane[Y.i0 * d.w + X.i1] += Y.w0 * X.w1 * v;
                        gplane[Y.i1 * d.w + X.i0] += Y.w1 * X.w0 * v;
                        gplane[Y.i1 * d.w + X.i1] += Y.w1 * X.w1 * v;
                    }
                }
            }
    });
}

namespace {

inline int64_t pool_start(int64_t o, int64_t in, int64_t out) { return (o * in) / out; }
inline int64_t pool_end(int64_t o, int64_t in, int64_t out) {
    return ((o + 1) * in + out - 1) / out;
}

}  // namespace

Tensor adaptive_avg_pool(const Tensor& x, int64_t out_h, int64_t out_w) {
    auto d = dims4(x);
    check(out_h >= 1 && out_w >= 1 && out_h <= d.h && out_w <= d.w,
          "adaptive_avg_pool: bad target size");
    auto out = make_impl({d.n, d.c, out_h, out_w});
    const double* px = x.data();
    double* po = out->data.data();
    for (int64_t n = 0; n < d.n; ++n)
        for (int64_t c = 0; c < d.c; ++c) {
            const double* plane = px + (n * d.c + c) * d.h * d.w;
            double* oplane = po + (n * d.c + c) * out_h * out_w;
            for (int64_t oy = 0; oy < out_h; ++oy) {
                const int64_t y0 = pool_start(oy, d.h, out_h), y1 = pool_end(oy, d.h, out_h);
                for (int64_t ox = 0; ox < out_w; ++ox) {
                    const int64_t x0 = pool_start(ox, d.w, out_w), x1 = pool_end(ox, d.w, out_w);
                    double s = 0.0;
                    for (int64_t y = y0; y < y1; ++y)
                        for (int64_t xx = x0; xx < x1; ++xx) s += plane[y * d.w + xx];
                    oplane[oy * out_w + ox] = s / static_cast<double>((y1 - y0) * (x1 - x0));
                }
            }
        }
    auto ix = x.impl();
    return make_result(std::move(out), {x}, [ix, d, out_h, out_w](const TensorImpl& o) {
        const double* go = o.grad->data();
        double* g = grad_buf(*ix);
        for (int64_t n = 0; n < d.n; ++n)
            for (int64_t c = 0; c < d.c; ++c) {
                double* gplane = g + (n * d.c + c) * d.h * d.w;
                const double* oplane = go + (n * d.c + c) * out_h * out_w;
                for (int64_t oy = 0; oy < out_h; ++oy) {
                    const int64_t y0 = pool_start(oy, d.h, out_h), y1 = pool_end(oy, d.h, out_h);
                    for (int64_t ox = 0; ox < out_w; ++ox) {
                        const int64_t x0 = pool_start(ox, d.w, out_w),
                                      x1 = pool_end(ox, d.w, out_w);
                        const double v = oplane[oy * out_w + ox] /
                                         static_cast<double>((y1 - y0) * (x1 - x0));
                        for (int64_t y = y0; y < y1; ++y)
                            for (int64_t xx = x0; xx < x1; ++xx) gplane[y * d.w + xx] += v;
                    }
                }
            }
    });
}

Tensor adaptive_max_pool(const Tensor& x, int64_t out_h, int64_t out_w) {
    auto d = dims4(x);
    check(out_h >= 1 && out_w >= 1 && out_h <= d.h && out_w <= d.w,
          "adaptive_max_pool: bad target size");
    auto out = make_impl({d.n, d.c, out_h, out_w});
    auto argmax = std::make_shared<std::vector<int64_t>>(out->data.size());
    const double* px = x.data();
    double* po = out->data.data();
    size_t oi = 0;
    for (int64_t n = 0; n < d.n; ++n)
        for (int64_t c = 0; c < d.c; ++c) {
            const double* plane = px + (n * d.c + c) * d.h * d.w;
            for (int64_t oy = 0; oy < out_h; ++oy) {
                const int64_t y0 = pool_start(oy, d.h, out_h), y1 = pool_end(oy, d.h, out_h);
                for (int64_t ox = 0; ox < out_w; ++ox, ++oi) {
                    const int64_t x0 = pool_start(ox, d.w, out_w), x1 = pool_end(ox, d.w, out_w);
                    double best = plane[y0 * d.w + x0];
                    int64_t besti = y0 * d.w + x0;
                    for (int64_t y = y0; y < y1; ++y)
                        for (int64_t xx = x0; xx < x1; ++xx)
                            if (plane[y * d.w + xx] > best) {
                                best = plane[y * d.w + xx];
                                besti = y * d.w + xx;
                            }
                    po[oi] = best;
                    (*argmax)[oi] = (n * d.c + c) * d.h * d.w + besti;
                }
            }
        }
    auto ix = x.impl();
    return make_result(std::move(out), {x}, [ix, argmax](const TensorImpl& o) {
        const double* go = o.grad->data();
        double* g = grad_buf(*ix);
        for (size_t i = 0; i < o.data.size(); ++i) g[(*argmax)[i]] += go[i];
    });
}

Tensor max_pool2d(const Tensor& x, int kernel, int stride, int padding) {
    auto d = dims4(x);
    const int64_t oh = (d.h + 2 * padding - kernel) / stride + 1;
    const int64_t ow = (d.w + 2 * padding - kernel) / stride + 1;
    check(oh >= 1 && ow >= 1, "max_pool2d: output collapses to zero size");
    auto out = make_impl({d.n, d.c, oh, ow});
    auto argmax = std::make_shared<std::vector<int64_t>>(out->data.size());
    const double* px = x.data();
    double* po = out->data.data();
    size_t oi = 0;
    for (int64_t n = 0; n < d.n; ++n)
        for (int64_t c = 0; c < d.c; ++c) {
            const double* plane = px + (n * d.c + c) * d.h * d.w;
            for (int64_t oy = 0; oy < oh; ++oy)
                for (int64_t ox = 0; ox < ow; ++ox, ++oi) {
                    double best = -1e300;
                    int64_t besti = -1;
                    for (int64_t ky = 0; ky < kernel; ++ky)
                        for (int64_t kx = 0; kx < kernel; ++kx) {
                            const int64_t iy = oy * stride - padding + ky;
                            const int64_t ix = ox * stride - padding + kx;
                            if (iy < 0 || iy >= d.h || ix < 0 || ix >= d.w) continue;
                            if (plane[iy * d.w + ix] > best) {
                                best = plane[iy * d.w + ix];
                                besti = iy * d.w + ix;
                            }
                        }
                    po[oi] = best;
                    (*argmax)[oi] = (n * d.c + c) * d.h * d.w + besti;
                }
        }
    auto ix = x.impl();
    return make_result(std::move(out), {x}, [ix, argmax](const TensorImpl& o) {
        const double* go = o.grad->data();
        double* g = grad_buf(*ix);
        for (size_t i = 0; i < o.data.size(); ++i) g[(*argmax)[i]] += go[i];
    });
}

Tensor global_avg_pool(const Tensor& x) { return adaptive_avg_pool(x, 1, 1); }

bool all_finite(const Tensor& x) {
    for (int64_t i = 0; i < x.numel(); ++i)
        if (!std::isfinite(x.data()[i])) return false;
    return true;
}

}  // namespace mgnet
