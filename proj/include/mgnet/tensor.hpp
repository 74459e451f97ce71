#pragma once

#include <functional>
#include <memory>
#include <vector>

#include "mgnet/common.hpp"

namespace mgnet {

// Dense double tensor with reverse-mode autodiff. Shapes are NCHW for feature
// maps; losses are shape {1}. Storage is shared between handles, so copying a
// Tensor is cheap and mutating data through one handle is visible to all.

using Shape = std::vector<int64_t>;

struct TensorImpl;

struct GradNode {
    std::vector<std::shared_ptr<TensorImpl>> inputs;
    std::function<void(const TensorImpl& out)> backward;  // reads out.grad, accumulates into inputs
};

struct TensorImpl {
    Shape shape;
    std::vector<double> data;
    bool requires_grad = false;
    std::shared_ptr<std::vector<double>> grad;  // lazily allocated, same numel as data
    std::shared_ptr<GradNode> grad_fn;
};

class Tensor {
public:
    Tensor() = default;
    explicit Tensor(std::shared_ptr<TensorImpl> impl) : impl_(std::move(impl)) {}

    static Tensor zeros(const Shape& shape);
    static Tensor full(const Shape& shape, double value);
    static Tensor from_data(const Shape& shape, std::vector<double> values);
    static Tensor scalar(double value) { return from_data({1}, {value}); }
    static Tensor randn(const Shape& shape, Rng& rng, double stddev = 1.0, double mean = 0.0);
    static Tensor rand_uniform(const Shape& shape, Rng& rng, double lo = 0.0, double hi = 1.0);

    bool defined() const { return impl_ != nullptr; }
    const Shape& shape() const { return impl_->shape; }
    int64_t dim(int i) const { return impl_->shape[static_cast<size_t>(i)]; }
    int ndim() const { return static_cast<int>(impl_->shape.size()); }
    int64_t numel() const { return static_cast<int64_t>(impl_->data.size()); }

    double* data() { return impl_->data.data(); }
    const double* data() const { return impl_->data.data(); }
    std::vector<double>& vec() { return impl_->data; }
    const std::vector<double>& vec() const { return impl_->data; }

    // NCHW accessor (tests and glue code; hot loops index manually)
    double at(int64_t n, int64_t c, int64_t h, int64_t w) const;
    double& at(int64_t n, int64_t c, int64_t h, int64_t w);
    double value() const;  // single-element tensors

    Tensor& set_requires_grad(bool v);
    bool requires_grad() const { return impl_->requires_grad; }
    Tensor grad() const;  // undefined Tensor when no grad accumulated
    void zero_grad();
    void backward();  // scalar tensors only; frees the graph as it goes

    Tensor detach() const;
    Tensor clone() const;

    std::shared_ptr<TensorImpl> impl() const { return impl_; }

private:
    std::shared_ptr<TensorImpl> impl_;
};

// Grad recording is on by default; disable for eval-mode forward passes.
// Thread-local so concurrent eval passes stay independent.
struct NoGradGuard {
    NoGradGuard();
    ~NoGradGuard();
    bool prev;
};
bool grad_enabled();

int64_t numel_of(const Shape& shape);

// ---------------------------------------------------------------------------
// Ops. All return fresh tensors and record backward closures when needed.
// ---------------------------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
// Elementwise product with size-1 broadcasting on either side (4D or equal shapes).
Tensor mul(const Tensor& a, const Tensor& b);
Tensor affine(const Tensor& x, double scale, double shift);  // scale*x + shift
Tensor relu(const Tensor& x);
Tensor sigmoid(const Tensor& x);
Tensor log_op(const Tensor& x);
Tensor clamp(const Tensor& x, double lo, double hi);
Tensor softmax_channels(const Tensor& x);  // over dim 1 of NCHW
Tensor mean_all(const Tensor& x);          // -> shape {1}
Tensor sum_all(const Tensor& x);           // -> shape {1}

Tensor concat_channels(const std::vector<Tensor>& xs);
Tensor slice_channels(const Tensor& x, int64_t c0, int64_t c1);  // [c0, c1)

Tensor conv2d(const Tensor& x, const Tensor& weight, const Tensor& bias,
              int stride = 1, int padding = 0, int dilation = 1, int groups = 1);

// Training mode uses batch statistics and updates the running buffers in
// place; eval mode reads the running buffers. gamma/beta are [C].
Tensor batch_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                  Tensor running_mean, Tensor running_var, bool training,
                  double momentum = 0.1, double eps = 1e-5);

Tensor bilinear_resize(const Tensor& x, int64_t out_h, int64_t out_w);  // half-pixel centers
Tensor adaptive_avg_pool(const Tensor& x, int64_t out_h, int64_t out_w);
Tensor adaptive_max_pool(const Tensor& x, int64_t out_h, int64_t out_w);
Tensor max_pool2d(const Tensor& x, int kernel, int stride, int padding);
Tensor global_avg_pool(const Tensor& x);  // -> [N,C,1,1]

bool all_finite(const Tensor& x);

}  // namespace mgnet
