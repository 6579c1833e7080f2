// SPDX-License-Identifier: Apache-2.0
#include "peerkd/nn.hpp"

#include <algorithm>
#include <cmath>

namespace peerkd {

void ParamStore::check_unique(const std::string& name) const {
    for (const Entry& e : params_)
        if (e.name == name) throw ContractError("duplicate parameter name: " + name);
    for (const Entry& e : buffers_)
        if (e.name == name) throw ContractError("duplicate buffer name: " + name);
}

Tensor& ParamStore::add_param(std::string name, Tensor t, bool norm_affine) {
    check_unique(name);
    t.set_requires_grad(true);
    params_.push_back(Entry{std::move(name), std::move(t), norm_affine});
    return params_.back().tensor;
}

Tensor& ParamStore::add_buffer(std::string name, Tensor t) {
    check_unique(name);
    t.set_requires_grad(false);
    buffers_.push_back(Entry{std::move(name), std::move(t), false});
    return buffers_.back().tensor;
}

Tensor* ParamStore::find_param(std::string_view name) {
    for (Entry& e : params_)
        if (e.name == name) return &e.tensor;
    return nullptr;
}

int64_t ParamStore::param_count() const {
    int64_t n = 0;
    for (const Entry& e : params_) n += e.tensor.size();
    return n;
}

namespace {

// Kaiming-uniform fan-in initialization: U(-b, b) with b = sqrt(6 / fan_in).
Tensor kaiming_uniform(const Shape& shape, int64_t fan_in, Rng& init) {
    const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
    std::vector<double> v(static_cast<size_t>(shape_size(shape)));
    for (double& x : v) x = init.uniform(-bound, bound);
    return Tensor(shape, std::move(v));
}

} // namespace

LinearLayer::LinearLayer(int in, int out, Rng& init)
    : weight(kaiming_uniform(Shape{in, out}, in, init)), bias(Shape{out}, 0.0) {}

Tensor LinearLayer::forward(const Tensor& x, bool) {
    return add_row_vector(matmul(x, weight), bias);
}

void LinearLayer::register_into(ParamStore& store, const std::string& prefix) {
    store.add_param(prefix + ".weight", weight);
    store.add_param(prefix + ".bias", bias);
}

Tensor ReluLayer::forward(const Tensor& x, bool) { return relu(x); }

ConvLayer::ConvLayer(int in, int out, int ksize, int stride_, int padding_, Rng& init)
    : weight(kaiming_uniform(Shape{out, in, ksize, ksize},
                             static_cast<int64_t>(in) * ksize * ksize, init)),
      bias(Shape{out}, 0.0),
      stride(stride_),
      padding(padding_) {}

Tensor ConvLayer::forward(const Tensor& x, bool) {
    return add_channel_vector(conv2d(x, weight, stride, padding), bias);
}

void ConvLayer::register_into(ParamStore& store, const std::string& prefix) {
    store.add_param(prefix + ".weight", weight);
    store.add_param(prefix + ".bias", bias);
}

BatchNormLayer::BatchNormLayer(int channels)
    : gamma(Shape{channels}, 1.0),
      beta(Shape{channels}, 0.0),
      running_mean(Shape{channels}, 0.0),
      running_var(Shape{channels}, 1.0) {}

Tensor BatchNormLayer::forward(const Tensor& x, bool training) {
    return batch_norm(x, gamma, beta, running_mean, running_var, training, momentum, eps);
}

void BatchNormLayer::register_into(ParamStore& store, const std::string& prefix) {
    store.add_param(prefix + ".gamma", gamma, /*norm_affine=*/true);
    store.add_param(prefix + ".beta", beta, /*norm_affine=*/true);
    store.add_buffer(prefix + ".running_mean", running_mean);
    store.add_buffer(prefix + ".running_var", running_var);
}

Tensor GlobalAvgPoolLayer::forward(const Tensor& x, bool) { return global_avg_pool(x); }

Tensor FlattenLayer::forward(const Tensor& x, bool) { return flatten_rows(x); }

std::unique_ptr<Layer> make_layer(const LayerDesc& d, Rng& init) {
    switch (d.kind) {
        case LayerKind::Linear: return std::make_unique<LinearLayer>(d.in, d.out, init);
        case LayerKind::Relu: return std::make_unique<ReluLayer>();
        case LayerKind::Conv:
            return std::make_unique<ConvLayer>(d.in, d.out, d.ksize, d.stride, d.padding, init);
        case LayerKind::BatchNorm: return std::make_unique<BatchNormLayer>(d.out);
        case LayerKind::GlobalAvgPool: return std::make_unique<GlobalAvgPoolLayer>();
        case LayerKind::Flatten: return std::make_unique<FlattenLayer>();
    }
    throw ContractError("unknown layer kind");
}

double LrSchedule::at(int epoch) const {
    double lr = base;
    for (int m : milestones)
        if (epoch >= m) lr *= decay;
    return lr;
}

SgdOptimizer::SgdOptimizer(double momentum, double weight_decay, LrSchedule schedule,
                           bool decay_norm_params)
    : momentum_(momentum),
      weight_decay_(weight_decay),
      schedule_(std::move(schedule)),
      decay_norm_params_(decay_norm_params) {}

void SgdOptimizer::add_params(ParamStore& store) {
    for (ParamStore::Entry& e : store.params()) {
        slots_.push_back(Slot{e.name, e.tensor,
                              std::vector<double>(static_cast<size_t>(e.tensor.size()), 0.0),
                              !e.norm_affine || decay_norm_params_});
    }
}

void SgdOptimizer::step(int epoch) {
    const double lr = schedule_.at(epoch);
    if (!(lr > 0.0)) throw ContractError("learning rate must be positive");
    for (Slot& s : slots_) {
        if (!s.param.has_grad())
            throw ContractError("parameter '" + s.name + "' has no gradient; run backward first");
        auto g = s.param.grad();
        auto& w = s.param.raw();
        const double wd = s.apply_decay ? weight_decay_ : 0.0;
        for (size_t i = 0; i < w.size(); ++i) {
            const double d = g[i] + wd * w[i];
            s.velocity[i] = momentum_ * s.velocity[i] - lr * d;
            w[i] += momentum_ * s.velocity[i] - lr * d;
        }
    }
}

void SgdOptimizer::zero_grad() {
    for (Slot& s : slots_) s.param.zero_grad();
}

BackboneSpec BackboneSpec::make(const std::string& preset, const Shape& input_shape,
                                int split_override) {
    BackboneSpec spec;
    spec.preset = preset;
    spec.input_shape = input_shape;
    if (preset == "mlp-small") {
        if (input_shape.size() != 1)
            throw ConfigError("mlp-small expects flat [f] samples, got " + shape_str(input_shape));
        const int f = static_cast<int>(input_shape[0]);
        spec.layers = {
            {LayerKind::Linear, f, 64},
            {LayerKind::Relu},
            {LayerKind::Linear, 64, 64},
            {LayerKind::Relu},
            {LayerKind::Linear, 64, 32},
            {LayerKind::Relu},
        };
        spec.split_index = 4; // final block (last linear + relu) is per-branch
        spec.feature_dim = 32;
    } else if (preset == "cnn-small") {
        if (input_shape.size() != 3)
            throw ConfigError("cnn-small expects [c,h,w] samples, got " + shape_str(input_shape));
        const int c = static_cast<int>(input_shape[0]);
        spec.layers = {
            {LayerKind::Conv, c, 16, 3, 1, 1},
            {LayerKind::BatchNorm, 0, 16},
            {LayerKind::Relu},
            {LayerKind::Conv, 16, 32, 3, 2, 1},
            {LayerKind::BatchNorm, 0, 32},
            {LayerKind::Relu},
            {LayerKind::Conv, 32, 64, 3, 2, 1},
            {LayerKind::BatchNorm, 0, 64},
            {LayerKind::Relu},
            {LayerKind::GlobalAvgPool},
        };
        spec.split_index = 6; // last conv block + pooling is per-branch
        spec.feature_dim = 64;
    } else {
        throw ConfigError("unknown backbone preset: " + preset);
    }
    if (split_override != 0) spec.split_index = split_override;
    if (spec.split_index <= 0 || spec.split_index >= static_cast<int>(spec.layers.size()))
        throw ConfigError("split_index must be in (0, " + std::to_string(spec.layers.size()) +
                          "), got " + std::to_string(spec.split_index));
    return spec;
}

} // namespace peerkd
