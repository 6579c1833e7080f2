// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace peerkd {

struct ShapeError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct ContractError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct NumericError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct IoError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

using Shape = std::vector<int64_t>;

int64_t shape_size(const Shape& s);
std::string shape_str(const Shape& s);

namespace detail {

struct TensorNode {
    Shape shape;
    std::vector<double> values;
    std::vector<double> grad; // empty until populated by backward()
    bool requires_grad = false;
    std::vector<std::shared_ptr<TensorNode>> parents;
    std::function<void(const TensorNode&)> backprop; // pushes grad into parents

    void accumulate(std::span<const double> g);
};

} // namespace detail

// Dense row-major f64 tensor participating in a define-by-run reverse-mode
// differentiation graph. Copying a Tensor copies the handle, not the data.
class Tensor {
public:
    Tensor() = default;
    explicit Tensor(Shape shape, double fill = 0.0, bool requires_grad = false);
    Tensor(Shape shape, std::vector<double> values, bool requires_grad = false);

    static Tensor scalar(double v) { return Tensor(Shape{}, {v}); }

    bool defined() const { return node_ != nullptr; }
    const Shape& shape() const { return node_->shape; }
    int64_t size() const { return static_cast<int64_t>(node_->values.size()); }
    int64_t dim(size_t i) const { return node_->shape.at(i); }
    int rank() const { return static_cast<int>(node_->shape.size()); }

    std::span<const double> values() const { return node_->values; }
    // Direct value access for leaves (parameter updates, EMA averaging).
    std::vector<double>& raw() { return node_->values; }

    double item() const;

    bool requires_grad() const { return node_->requires_grad; }
    Tensor& set_requires_grad(bool rg);

    bool has_grad() const { return !node_->grad.empty(); }
    std::span<const double> grad() const;
    void zero_grad() { node_->grad.clear(); }

    detail::TensorNode* node() const { return node_.get(); }
    const std::shared_ptr<detail::TensorNode>& node_ptr() const { return node_; }

private:
    std::shared_ptr<detail::TensorNode> node_;
};

// Gradient recording is on by default; a NoGradGuard disables it for its
// scope (teacher forwards, evaluation).
bool grad_enabled();
class NoGradGuard {
public:
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;
};

// Elementwise and structural ops. Every op records its gradient rule when
// recording is enabled and any input requires grad.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double c);
Tensor add_row_vector(const Tensor& x, const Tensor& bias);     // [n,d] + [d]
Tensor add_channel_vector(const Tensor& x, const Tensor& bias); // [n,c,h,w] + [c]
Tensor relu(const Tensor& a);
Tensor exp(const Tensor& a);
Tensor clamp_min(const Tensor& a, double lo);
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor conv2d(const Tensor& x, const Tensor& k, int stride, int padding);
Tensor log_softmax(const Tensor& z); // [n,C] rows, C >= 2
Tensor sum(const Tensor& a);         // -> scalar
Tensor mean(const Tensor& a);        // -> scalar
Tensor concat_columns(std::span<const Tensor> parts); // [n,d_i] -> [n, sum d_i]
Tensor global_avg_pool(const Tensor& x);              // [n,c,h,w] -> [n,c]
Tensor flatten_rows(const Tensor& x);                 // [n,...] -> [n, rest]
Tensor detach(const Tensor& a);

// Batch normalization over the channel axis: per-feature for [n,f] input,
// per-channel over (n,h,w) for [n,c,h,w]. In training mode batch statistics
// normalize and the running buffers are updated in place; in eval mode the
// buffers normalize.
Tensor batch_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                  Tensor& running_mean, Tensor& running_var, bool training,
                  double momentum = 0.1, double eps = 1e-5);

// Reverse-mode sweep from a scalar loss. Gradients accumulate additively into
// every requires-grad leaf that influences the loss.
void backward(const Tensor& loss);

} // namespace peerkd
