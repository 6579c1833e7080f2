// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <vector>

#include "peerkd/checkpoint.hpp"
#include "peerkd/nn.hpp"

namespace peerkd {

struct PeerOutputs {
    std::vector<Tensor> features; // m tensors [n, d]
    std::vector<Tensor> logits;   // m tensors [n, C]
};

// Multi-branch student: shared trunk, m structurally identical but
// independently initialized heads (each head = high-level layers + its own
// classifier), and optionally the ensemble classifier over concatenated peer
// features ((m*d) -> C).
class MultiBranchModel {
public:
    MultiBranchModel(const BackboneSpec& spec, int m, int num_classes, bool with_ensemble,
                     Rng& init);

    int m() const { return static_cast<int>(heads_.size()); }
    int num_classes() const { return num_classes_; }
    int feature_dim() const { return spec_.feature_dim; }
    const BackboneSpec& spec() const { return spec_; }
    bool has_ensemble_classifier() const { return ensemble_classifier_ != nullptr; }

    Tensor trunk_forward(const Tensor& x, bool training);
    // Returns {feature, logits} of branch j applied to trunk output.
    std::pair<Tensor, Tensor> head_forward(int j, const Tensor& trunk_out, bool training);

    // Peer forward over m augmented views: view j goes through the trunk and
    // head j. Throws ContractError when the view count is not m.
    PeerOutputs forward_peers(std::span<const Tensor> views, bool training);
    // Concatenates peer features (branch order) and applies the ensemble
    // classifier.
    Tensor forward_ensemble(std::span<const Tensor> features, bool training);
    // Single-branch forward: trunk then head j, logits only.
    Tensor forward_branch(int j, const Tensor& x, bool training);

    ParamStore& trunk_store() { return trunk_store_; }
    ParamStore& head_store(int j) { return head_stores_[static_cast<size_t>(j)]; }
    ParamStore& ensemble_store() { return ensemble_store_; }
    const ParamStore& trunk_store() const { return trunk_store_; }
    const ParamStore& head_store(int j) const { return head_stores_[static_cast<size_t>(j)]; }
    const ParamStore& ensemble_store() const { return ensemble_store_; }

    // All stores in a fixed order: trunk, head 0..m-1, ensemble.
    void for_each_store(const std::function<void(const std::string&, ParamStore&)>& fn);

    int64_t param_count() const;

private:
    BackboneSpec spec_;
    int num_classes_;
    std::vector<std::unique_ptr<Layer>> trunk_;
    struct Head {
        std::vector<std::unique_ptr<Layer>> layers;
        std::unique_ptr<LinearLayer> classifier;
    };
    std::vector<Head> heads_;
    std::unique_ptr<LinearLayer> ensemble_classifier_;
    ParamStore trunk_store_;
    std::vector<ParamStore> head_stores_;
    ParamStore ensemble_store_;
};

// EMA smoothing coefficient: min(1 - 1/g, beta). Requires g >= 1.
double ema_coefficient(int64_t g, double beta);

// Temporally averaged copy of a student model: trunk, all heads, and the
// ensemble classifier, plus every normalization buffer. Never receives
// gradients; usable in eval mode at any point after the first update.
class MeanTeacherBank {
public:
    MeanTeacherBank(const BackboneSpec& spec, int m, int num_classes, bool with_ensemble,
                    double beta);

    // One averaging step at global step g: w_t <- phi*w_t + (1-phi)*w with
    // phi = min(1 - 1/g, beta). g must be strictly greater than the previous
    // update's step.
    void update(const MultiBranchModel& student, int64_t g);
    // Averaging with an explicit coefficient; used by convergence checks.
    void update_with_coefficient(const MultiBranchModel& student, double phi);

    bool populated() const { return step_ >= 1; }
    int64_t step() const { return step_; }
    double beta() const { return beta_; }

    // Eval-mode, gradient-free forwards through the averaged weights.
    std::vector<Tensor> forward_teachers(std::span<const Tensor> views);
    Tensor forward_branch(int j, const Tensor& x);
    Tensor forward_ensemble_from(const Tensor& x);

    MultiBranchModel& model() { return teacher_; }
    const MultiBranchModel& model() const { return teacher_; }

private:
    MultiBranchModel teacher_;
    double beta_;
    int64_t step_ = 0;
};

// Deployment and state extraction. The deployment makers take the averaged
// teacher model (bank.model() during training, or one rebuilt from a state
// checkpoint when exporting).
Checkpoint make_target_checkpoint(const MultiBranchModel& teacher, const BackboneSpec& spec,
                                  int target_branch, int64_t global_step);
Checkpoint make_ensemble_checkpoint(const MultiBranchModel& teacher, const BackboneSpec& spec,
                                    int64_t global_step);
Checkpoint make_state_checkpoint(MultiBranchModel& student, MeanTeacherBank& bank,
                                 SgdOptimizer& opt, const BackboneSpec& spec, int64_t global_step,
                                 int epoch, const std::string& config_text);

// Rebuilds a runnable model from a checkpoint section ("" for deployment
// checkpoints, "student/" or "teacher/" for state checkpoints).
std::unique_ptr<MultiBranchModel> model_from_checkpoint(const Checkpoint& ckpt,
                                                        const std::string& section);

} // namespace peerkd
