// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <memory>
#include <string>
#include <vector>

#include "peerkd/rng.hpp"
#include "peerkd/tensor.hpp"

namespace peerkd {

// Ordered registry of named parameters and buffers. Iteration order is
// insertion order, which fixes the optimizer update order.
class ParamStore {
public:
    struct Entry {
        std::string name;
        Tensor tensor;
        bool norm_affine = false; // normalization gamma/beta (weight-decay flag)
    };

    Tensor& add_param(std::string name, Tensor t, bool norm_affine = false);
    Tensor& add_buffer(std::string name, Tensor t);

    const std::vector<Entry>& params() const { return params_; }
    const std::vector<Entry>& buffers() const { return buffers_; }
    std::vector<Entry>& params() { return params_; }
    std::vector<Entry>& buffers() { return buffers_; }

    Tensor* find_param(std::string_view name);
    int64_t param_count() const;

private:
    void check_unique(const std::string& name) const;
    std::vector<Entry> params_;
    std::vector<Entry> buffers_;
};

enum class LayerKind { Linear, Relu, Conv, BatchNorm, GlobalAvgPool, Flatten };

struct LayerDesc {
    LayerKind kind;
    int in = 0;
    int out = 0;
    int ksize = 0;
    int stride = 1;
    int padding = 0;
};

class Layer {
public:
    virtual ~Layer() = default;
    virtual Tensor forward(const Tensor& x, bool training) = 0;
    virtual void register_into(ParamStore& store, const std::string& prefix) = 0;
};

class LinearLayer : public Layer {
public:
    LinearLayer(int in, int out, Rng& init);
    Tensor forward(const Tensor& x, bool training) override;
    void register_into(ParamStore& store, const std::string& prefix) override;
    Tensor weight; // [in, out]
    Tensor bias;   // [out]
};

class ReluLayer : public Layer {
public:
    Tensor forward(const Tensor& x, bool training) override;
    void register_into(ParamStore&, const std::string&) override {}
};

class ConvLayer : public Layer {
public:
    ConvLayer(int in, int out, int ksize, int stride, int padding, Rng& init);
    Tensor forward(const Tensor& x, bool training) override;
    void register_into(ParamStore& store, const std::string& prefix) override;
    Tensor weight; // [out, in, k, k]
    Tensor bias;   // [out]
    int stride;
    int padding;
};

class BatchNormLayer : public Layer {
public:
    explicit BatchNormLayer(int channels);
    Tensor forward(const Tensor& x, bool training) override;
    void register_into(ParamStore& store, const std::string& prefix) override;
    Tensor gamma, beta, running_mean, running_var;
    double momentum = 0.1;
    double eps = 1e-5;
};

class GlobalAvgPoolLayer : public Layer {
public:
    Tensor forward(const Tensor& x, bool training) override;
    void register_into(ParamStore&, const std::string&) override {}
};

class FlattenLayer : public Layer {
public:
    Tensor forward(const Tensor& x, bool training) override;
    void register_into(ParamStore&, const std::string&) override {}
};

std::unique_ptr<Layer> make_layer(const LayerDesc& desc, Rng& init);

// Step-decay learning-rate schedule: base rate multiplied by `decay` once per
// milestone epoch reached (milestone epoch itself already decayed).
struct LrSchedule {
    double base = 0.1;
    std::vector<int> milestones{150, 225};
    double decay = 0.1;
    double at(int epoch) const;
};

// SGD with Nesterov momentum and weight decay folded into the gradient.
class SgdOptimizer {
public:
    SgdOptimizer(double momentum, double weight_decay, LrSchedule schedule, bool decay_norm_params = true);

    void add_params(ParamStore& store);
    void step(int epoch);
    void zero_grad();

    double lr_at(int epoch) const { return schedule_.at(epoch); }
    size_t slot_count() const { return slots_.size(); }
    const std::vector<double>& velocity(size_t i) const { return slots_[i].velocity; }
    const std::string& slot_name(size_t i) const { return slots_[i].name; }
    std::vector<double>& velocity_mutable(size_t i) { return slots_[i].velocity; }

private:
    struct Slot {
        std::string name;
        Tensor param;
        std::vector<double> velocity;
        bool apply_decay;
    };
    std::vector<Slot> slots_;
    double momentum_;
    double weight_decay_;
    LrSchedule schedule_;
    bool decay_norm_params_;
};

// Layer stack of one backbone: shared low-level layers up to split_index,
// per-branch high-level layers after it, feature width `feature_dim` before
// the branch classifier.
struct BackboneSpec {
    std::string preset;
    std::vector<LayerDesc> layers;
    int split_index = 0;
    int feature_dim = 0;
    Shape input_shape; // per-sample shape

    // `preset` is "mlp-small" or "cnn-small"; split_override 0 keeps the
    // preset's default split.
    static BackboneSpec make(const std::string& preset, const Shape& input_shape,
                             int split_override = 0);
};

} // namespace peerkd
