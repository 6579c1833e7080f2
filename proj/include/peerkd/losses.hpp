// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <span>
#include <vector>

#include "peerkd/tensor.hpp"

namespace peerkd {

struct HyperParams {
    double temperature = 3.0; // softening temperature T
    double alpha = 80.0;      // ramp-up epoch threshold
    double lambda = 1.0;      // distillation weight
    double beta = 0.999;      // EMA smoothing coefficient cap
    int m = 3;                // peer count
    int epoch_max = 300;
};

struct LossBundle {
    Tensor ce_peers;   // supervised loss summed over peers
    Tensor ce_teacher; // supervised loss of the ensemble teacher
    Tensor pe;         // ensemble-teacher distillation
    Tensor pm;         // mean-teacher distillation
    Tensor total;
};

// Mean-over-batch cross-entropy of logits against integer labels.
Tensor cross_entropy_mean(const Tensor& logits, std::span<const int> labels);

// Sum over peers of the batch-mean cross-entropy.
Tensor peer_ce_loss(std::span<const Tensor> peer_logits, std::span<const int> labels);
Tensor teacher_ce_loss(const Tensor& teacher_logits, std::span<const int> labels);

// Temperature-softened probabilities: softmax(z / T) rows. T > 0.
Tensor soften(const Tensor& logits, double temperature);

// Distillation weight ramp: lambda * exp(-5 (1 - e/alpha)^2) while e <= alpha,
// then lambda.
double ramp_up(int epoch, double alpha, double lambda);

// Batch-mean KL divergence between softened teacher and student rows,
// computed in log space. The teacher side is detached unless teacher_grad is
// set; the student log-probabilities are clamped at log(1e-12) below.
Tensor kl_mean(const Tensor& teacher_logits, const Tensor& student_logits, double temperature,
               bool teacher_grad = false);

// omega * T^2 * sum_j KL(teacher || peer_j).
Tensor peer_ensemble_distill(const Tensor& teacher_logits, std::span<const Tensor> peer_logits,
                             double temperature, double omega, bool teacher_grad = false);

// omega * T^2/(m-1) * sum_j sum_{l != j} KL(mean_teacher_l || peer_j).
// Zero when fewer than two peers.
Tensor peer_mean_distill(std::span<const Tensor> teacher_logits,
                         std::span<const Tensor> peer_logits, double temperature, double omega);

// Unweighted sum of the four components; each must be finite.
Tensor total_loss(const Tensor& ce_peers, const Tensor& ce_teacher, const Tensor& pe,
                  const Tensor& pm);

} // namespace peerkd
