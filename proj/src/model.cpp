// SPDX-License-Identifier: Apache-2.0
#include "peerkd/model.hpp"

#include <algorithm>
#include <cmath>

namespace peerkd {

MultiBranchModel::MultiBranchModel(const BackboneSpec& spec, int m, int num_classes,
                                   bool with_ensemble, Rng& init)
    : spec_(spec), num_classes_(num_classes) {
    if (m < 1) throw ContractError("branch count m must be >= 1, got " + std::to_string(m));
    if (num_classes < 2) throw ContractError("need at least 2 classes");

    const size_t split = static_cast<size_t>(spec.split_index);
    for (size_t i = 0; i < split; ++i) trunk_.push_back(make_layer(spec.layers[i], init));
    for (size_t i = 0; i < trunk_.size(); ++i)
        trunk_[i]->register_into(trunk_store_, "layer" + std::to_string(i));

    heads_.resize(static_cast<size_t>(m));
    head_stores_.resize(static_cast<size_t>(m));
    for (int j = 0; j < m; ++j) {
        Head& h = heads_[static_cast<size_t>(j)];
        for (size_t i = split; i < spec.layers.size(); ++i)
            h.layers.push_back(make_layer(spec.layers[i], init));
        h.classifier = std::make_unique<LinearLayer>(spec.feature_dim, num_classes, init);
        ParamStore& store = head_stores_[static_cast<size_t>(j)];
        for (size_t i = 0; i < h.layers.size(); ++i)
            h.layers[i]->register_into(store, "layer" + std::to_string(split + i));
        h.classifier->register_into(store, "classifier");
    }

    if (with_ensemble) {
        ensemble_classifier_ =
            std::make_unique<LinearLayer>(m * spec.feature_dim, num_classes, init);
        ensemble_classifier_->register_into(ensemble_store_, "classifier");
    }
}

Tensor MultiBranchModel::trunk_forward(const Tensor& x, bool training) {
    Tensor t = x;
    for (auto& layer : trunk_) t = layer->forward(t, training);
    return t;
}

std::pair<Tensor, Tensor> MultiBranchModel::head_forward(int j, const Tensor& trunk_out,
                                                         bool training) {
    if (j < 0 || j >= m()) throw ContractError("branch index " + std::to_string(j) + " out of range");
    Head& h = heads_[static_cast<size_t>(j)];
    Tensor t = trunk_out;
    for (auto& layer : h.layers) t = layer->forward(t, training);
    Tensor logits = h.classifier->forward(t, training);
    return {t, logits};
}

PeerOutputs MultiBranchModel::forward_peers(std::span<const Tensor> views, bool training) {
    if (static_cast<int>(views.size()) != m())
        throw ContractError("forward_peers expects " + std::to_string(m()) + " views, got " +
                            std::to_string(views.size()));
    PeerOutputs out;
    out.features.reserve(views.size());
    out.logits.reserve(views.size());
    for (int j = 0; j < m(); ++j) {
        Tensor t = trunk_forward(views[static_cast<size_t>(j)], training);
        auto [feat, logits] = head_forward(j, t, training);
        out.features.push_back(std::move(feat));
        out.logits.push_back(std::move(logits));
    }
    return out;
}

Tensor MultiBranchModel::forward_ensemble(std::span<const Tensor> features, bool training) {
    if (!ensemble_classifier_) throw ContractError("model has no ensemble classifier");
    if (static_cast<int>(features.size()) != m())
        throw ContractError("forward_ensemble expects " + std::to_string(m()) + " feature tensors");
    Tensor cat = concat_columns(features);
    return ensemble_classifier_->forward(cat, training);
}

Tensor MultiBranchModel::forward_branch(int j, const Tensor& x, bool training) {
    Tensor t = trunk_forward(x, training);
    return head_forward(j, t, training).second;
}

void MultiBranchModel::for_each_store(
    const std::function<void(const std::string&, ParamStore&)>& fn) {
    fn("trunk", trunk_store_);
    for (int j = 0; j < m(); ++j) fn("head" + std::to_string(j), head_stores_[static_cast<size_t>(j)]);
    if (ensemble_classifier_) fn("ensemble", ensemble_store_);
}

int64_t MultiBranchModel::param_count() const {
    int64_t n = trunk_store_.param_count();
    for (const ParamStore& s : head_stores_) n += s.param_count();
    n += ensemble_store_.param_count();
    return n;
}

double ema_coefficient(int64_t g, double beta) {
    if (g < 1)
        throw ContractError("EMA coefficient undefined for global step " + std::to_string(g) +
                            " (needs g >= 1)");
    return std::min(1.0 - 1.0 / static_cast<double>(g), beta);
}

MeanTeacherBank::MeanTeacherBank(const BackboneSpec& spec, int m, int num_classes,
                                 bool with_ensemble, double beta)
    : teacher_([&] {
          // Teacher weights start at zero; the first update copies the
          // student because phi(1) = 0.
          Rng dummy(0);
          MultiBranchModel t(spec, m, num_classes, with_ensemble, dummy);
          t.for_each_store([](const std::string&, ParamStore& store) {
              for (auto& e : store.params()) {
                  std::fill(e.tensor.raw().begin(), e.tensor.raw().end(), 0.0);
                  e.tensor.set_requires_grad(false);
              }
              for (auto& e : store.buffers())
                  std::fill(e.tensor.raw().begin(), e.tensor.raw().end(), 0.0);
          });
          return t;
      }()),
      beta_(beta) {}

namespace {

void ema_blend(ParamStore& teacher, const ParamStore& student, double phi) {
    auto blend = [phi](std::vector<ParamStore::Entry>& t,
                       const std::vector<ParamStore::Entry>& s) {
        if (t.size() != s.size()) throw ContractError("teacher/student store layout mismatch");
        for (size_t i = 0; i < t.size(); ++i) {
            if (t[i].name != s[i].name || t[i].tensor.size() != s[i].tensor.size())
                throw ContractError("teacher/student tensor mismatch at " + t[i].name);
            auto& tv = t[i].tensor.raw();
            auto sv = s[i].tensor.values();
            for (size_t k = 0; k < tv.size(); ++k) tv[k] = phi * tv[k] + (1.0 - phi) * sv[k];
        }
    };
    blend(teacher.params(), student.params());
    blend(teacher.buffers(), student.buffers());
}

} // namespace

void MeanTeacherBank::update(const MultiBranchModel& student, int64_t g) {
    if (g < 1) throw ContractError("EMA update requires global step >= 1, got " + std::to_string(g));
    if (g <= step_)
        throw ContractError("global step must increase: " + std::to_string(g) + " after " +
                            std::to_string(step_));
    const double phi = ema_coefficient(g, beta_);
    update_with_coefficient(student, phi);
    step_ = g;
}

void MeanTeacherBank::update_with_coefficient(const MultiBranchModel& student, double phi) {
    if (teacher_.m() != student.m() ||
        teacher_.has_ensemble_classifier() != student.has_ensemble_classifier())
        throw ContractError("teacher bank does not mirror the student structure");
    ema_blend(teacher_.trunk_store(), student.trunk_store(), phi);
    for (int j = 0; j < teacher_.m(); ++j)
        ema_blend(teacher_.head_store(j), student.head_store(j), phi);
    if (teacher_.has_ensemble_classifier())
        ema_blend(teacher_.ensemble_store(), student.ensemble_store(), phi);
    if (step_ < 1) step_ = 1;
}

std::vector<Tensor> MeanTeacherBank::forward_teachers(std::span<const Tensor> views) {
    if (!populated())
        throw ContractError("mean-teacher bank not populated yet (no update has run)");
    if (static_cast<int>(views.size()) != teacher_.m())
        throw ContractError("forward_teachers expects " + std::to_string(teacher_.m()) + " views");
    NoGradGuard ng;
    std::vector<Tensor> logits;
    logits.reserve(views.size());
    for (int j = 0; j < teacher_.m(); ++j)
        logits.push_back(teacher_.forward_branch(j, views[static_cast<size_t>(j)], /*training=*/false));
    return logits;
}

Tensor MeanTeacherBank::forward_branch(int j, const Tensor& x) {
    if (!populated())
        throw ContractError("mean-teacher bank not populated yet (no update has run)");
    NoGradGuard ng;
    return teacher_.forward_branch(j, x, /*training=*/false);
}

Tensor MeanTeacherBank::forward_ensemble_from(const Tensor& x) {
    if (!populated())
        throw ContractError("mean-teacher bank not populated yet (no update has run)");
    NoGradGuard ng;
    Tensor t = teacher_.trunk_forward(x, false);
    std::vector<Tensor> feats;
    feats.reserve(static_cast<size_t>(teacher_.m()));
    for (int j = 0; j < teacher_.m(); ++j) feats.push_back(teacher_.head_forward(j, t, false).first);
    return teacher_.forward_ensemble(feats, false);
}

namespace {

nlohmann::json spec_meta(const BackboneSpec& spec, int m, int num_classes) {
    nlohmann::json j;
    j["preset"] = spec.preset;
    j["split_index"] = spec.split_index;
    j["feature_dim"] = spec.feature_dim;
    j["input_shape"] = spec.input_shape;
    j["m"] = m;
    j["classes"] = num_classes;
    return j;
}

void append_store(Checkpoint& ckpt, const std::string& prefix, const ParamStore& store) {
    for (const auto& e : store.params())
        ckpt.arrays.push_back(NamedArray{prefix + e.name, e.tensor.shape(),
                                         {e.tensor.values().begin(), e.tensor.values().end()}});
    for (const auto& e : store.buffers())
        ckpt.arrays.push_back(NamedArray{prefix + e.name + "#buf", e.tensor.shape(),
                                         {e.tensor.values().begin(), e.tensor.values().end()}});
}

void fill_store(ParamStore& store, const Checkpoint& ckpt, const std::string& prefix) {
    for (auto& e : store.params()) {
        const NamedArray* a = ckpt.find(prefix + e.name);
        if (!a) throw ContractError("checkpoint is missing tensor " + prefix + e.name);
        if (a->shape != e.tensor.shape())
            throw ShapeError("checkpoint tensor " + a->name + " has shape " + shape_str(a->shape) +
                             ", model expects " + shape_str(e.tensor.shape()));
        e.tensor.raw() = a->data;
    }
    for (auto& e : store.buffers()) {
        const NamedArray* a = ckpt.find(prefix + e.name + "#buf");
        if (!a) throw ContractError("checkpoint is missing buffer " + prefix + e.name);
        e.tensor.raw() = a->data;
    }
}

} // namespace

Checkpoint make_target_checkpoint(const MultiBranchModel& teacher, const BackboneSpec& spec,
                                  int target_branch, int64_t global_step) {
    if (target_branch < 0 || target_branch >= teacher.m())
        throw ContractError("target branch out of range: " + std::to_string(target_branch));
    Checkpoint ckpt;
    ckpt.meta = spec_meta(spec, 1, teacher.num_classes());
    ckpt.meta["kind"] = "target";
    ckpt.meta["source_branch"] = target_branch;
    ckpt.meta["global_step"] = global_step;
    append_store(ckpt, "trunk/", teacher.trunk_store());
    append_store(ckpt, "head0/", teacher.head_store(target_branch));
    return ckpt;
}

Checkpoint make_ensemble_checkpoint(const MultiBranchModel& teacher, const BackboneSpec& spec,
                                    int64_t global_step) {
    if (!teacher.has_ensemble_classifier())
        throw ContractError("ensemble checkpoint requires an ensemble classifier");
    Checkpoint ckpt;
    ckpt.meta = spec_meta(spec, teacher.m(), teacher.num_classes());
    ckpt.meta["kind"] = "ensemble";
    ckpt.meta["global_step"] = global_step;
    append_store(ckpt, "trunk/", teacher.trunk_store());
    for (int j = 0; j < teacher.m(); ++j)
        append_store(ckpt, "head" + std::to_string(j) + "/", teacher.head_store(j));
    append_store(ckpt, "ensemble/", teacher.ensemble_store());
    return ckpt;
}

Checkpoint make_state_checkpoint(MultiBranchModel& student, MeanTeacherBank& bank,
                                 SgdOptimizer& opt, const BackboneSpec& spec, int64_t global_step,
                                 int epoch, const std::string& config_text) {
    Checkpoint ckpt;
    ckpt.meta = spec_meta(spec, student.m(), student.num_classes());
    ckpt.meta["kind"] = "train_state";
    ckpt.meta["global_step"] = global_step;
    ckpt.meta["epoch"] = epoch;
    ckpt.meta["config"] = config_text;
    student.for_each_store([&](const std::string& name, ParamStore& store) {
        append_store(ckpt, "student/" + name + "/", store);
    });
    bank.model().for_each_store([&](const std::string& name, ParamStore& store) {
        append_store(ckpt, "teacher/" + name + "/", store);
    });
    for (size_t i = 0; i < opt.slot_count(); ++i) {
        const auto& v = opt.velocity(i);
        ckpt.arrays.push_back(NamedArray{"optim/velocity/" + opt.slot_name(i),
                                         Shape{static_cast<int64_t>(v.size())}, v});
    }
    return ckpt;
}

std::unique_ptr<MultiBranchModel> model_from_checkpoint(const Checkpoint& ckpt,
                                                        const std::string& section) {
    const auto& meta = ckpt.meta;
    for (const char* key : {"preset", "split_index", "m", "classes", "input_shape"})
        if (!meta.contains(key)) throw IoError("checkpoint metadata is missing '" + std::string(key) + "'");
    Shape input = meta.at("input_shape").get<Shape>();
    BackboneSpec spec =
        BackboneSpec::make(meta.at("preset").get<std::string>(), input, meta.at("split_index").get<int>());
    const int m = meta.at("m").get<int>();
    const int classes = meta.at("classes").get<int>();
    const bool with_ensemble = ckpt.has_section(section + "ensemble/");
    Rng dummy(0);
    auto model = std::make_unique<MultiBranchModel>(spec, m, classes, with_ensemble, dummy);
    model->for_each_store([&](const std::string& name, ParamStore& store) {
        fill_store(store, ckpt, section + name + "/");
    });
    return model;
}

} // namespace peerkd
