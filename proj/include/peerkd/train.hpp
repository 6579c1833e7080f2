// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "peerkd/config.hpp"
#include "peerkd/data.hpp"
#include "peerkd/model.hpp"

namespace peerkd {

struct EpochMetrics {
    int epoch = 0;
    double lr = 0;
    double omega = 0;
    double loss_total = 0, loss_ce_p = 0, loss_ce_t = 0, loss_pe = 0, loss_pm = 0;
    std::vector<double> train_err_peer, test_err_peer; // one per branch
    std::vector<double> train_err_mt, test_err_mt;
    double train_err_target = 0, test_err_target = 0;
    double train_err_ensemble = 0, test_err_ensemble = 0; // NaN without ensemble classifier
    double branch_variance = 0;
    double wall_seconds = 0;
};

struct TrainArtifacts {
    std::filesystem::path csv_path;
    std::filesystem::path summary_path;
    std::filesystem::path target_ckpt;
    std::filesystem::path ensemble_ckpt;
    std::filesystem::path state_ckpt;
    int best_epoch = -1;
    double best_target_test_err = 0;
    std::vector<EpochMetrics> history;
    std::vector<double> step_losses; // per optimizer step, in order
    nlohmann::json summary;
};

// Runs the full training loop described by the config: per mini-batch the m
// augmented views feed the peers, the concatenated peer features feed the
// ensemble classifier, the mean-teacher bank supplies distillation targets,
// and after each optimizer step the bank is averaged toward the student.
// Writes the metrics CSV, best-epoch deployment checkpoints, a final state
// checkpoint, and a JSON summary into cfg.out_dir.
TrainArtifacts train(const RunConfig& cfg);

// Top-1 error (%) of `logits_fn` over the dataset; argmax ties resolve to the
// lowest class index.
double top1_error_pct(const Dataset& ds,
                      const std::function<Tensor(const Tensor&)>& logits_fn);

// Average pairwise batch-mean Euclidean distance between peer prediction
// vectors. Needs at least two peers.
double branch_variance(std::span<const Tensor> peer_probs);

// Evaluation through a saved checkpoint. Mode is "target", "ensemble", or
// "peerJ" (J = branch index; train-state checkpoints only).
double evaluate_checkpoint(const Checkpoint& ckpt, const Dataset& ds, const std::string& mode);

// Builds the (train, test) pair described by the [data] section, normalized
// with train-split statistics.
std::pair<Dataset, Dataset> load_datasets(const RunConfig& cfg);

} // namespace peerkd
