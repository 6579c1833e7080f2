// SPDX-License-Identifier: Apache-2.0
#include "peerkd/losses.hpp"

#include <cmath>
#include <string>

namespace peerkd {

namespace {

constexpr double kLogFloor = -27.631021115928547; // log(1e-12)

void check_labels(const Tensor& logits, std::span<const int> labels) {
    if (logits.rank() != 2)
        throw ShapeError("expected [n,C] logits, got " + shape_str(logits.shape()));
    if (static_cast<int64_t>(labels.size()) != logits.dim(0))
        throw ContractError("label count " + std::to_string(labels.size()) +
                            " does not match batch size " + std::to_string(logits.dim(0)));
    const int c = static_cast<int>(logits.dim(1));
    for (size_t i = 0; i < labels.size(); ++i) {
        if (labels[i] < 0 || labels[i] >= c)
            throw ContractError("label " + std::to_string(labels[i]) + " at index " +
                                std::to_string(i) + " outside [0, " + std::to_string(c) + ")");
    }
}

} // namespace

Tensor cross_entropy_mean(const Tensor& logits, std::span<const int> labels) {
    check_labels(logits, labels);
    const int64_t n = logits.dim(0), c = logits.dim(1);
    Tensor lp = log_softmax(logits);
    std::vector<double> onehot(static_cast<size_t>(n * c), 0.0);
    for (int64_t i = 0; i < n; ++i) onehot[i * c + labels[static_cast<size_t>(i)]] = 1.0;
    Tensor picked = mul(lp, Tensor(Shape{n, c}, std::move(onehot)));
    return scale(sum(picked), -1.0 / static_cast<double>(n));
}

Tensor peer_ce_loss(std::span<const Tensor> peer_logits, std::span<const int> labels) {
    if (peer_logits.empty()) throw ContractError("peer_ce_loss needs at least one peer");
    Tensor acc = cross_entropy_mean(peer_logits[0], labels);
    for (size_t j = 1; j < peer_logits.size(); ++j)
        acc = add(acc, cross_entropy_mean(peer_logits[j], labels));
    return acc;
}

Tensor teacher_ce_loss(const Tensor& teacher_logits, std::span<const int> labels) {
    return cross_entropy_mean(teacher_logits, labels);
}

Tensor soften(const Tensor& logits, double temperature) {
    if (!(temperature > 0.0))
        throw ContractError("temperature must be > 0, got " + std::to_string(temperature));
    return exp(log_softmax(scale(logits, 1.0 / temperature)));
}

double ramp_up(int epoch, double alpha, double lambda) {
    if (epoch < 0) throw ContractError("epoch must be >= 0");
    if (static_cast<double>(epoch) > alpha) return lambda;
    const double r = 1.0 - static_cast<double>(epoch) / alpha;
    return lambda * std::exp(-5.0 * r * r);
}

Tensor kl_mean(const Tensor& teacher_logits, const Tensor& student_logits, double temperature,
               bool teacher_grad) {
    if (teacher_logits.shape() != student_logits.shape())
        throw ShapeError("kl_mean: teacher shape " + shape_str(teacher_logits.shape()) +
                         " vs student shape " + shape_str(student_logits.shape()));
    const int64_t n = teacher_logits.dim(0);
    Tensor zt = teacher_grad ? teacher_logits : detach(teacher_logits);
    Tensor lp_t = log_softmax(scale(zt, 1.0 / temperature));
    Tensor lp_s = log_softmax(scale(student_logits, 1.0 / temperature));
    Tensor lq = clamp_min(lp_s, kLogFloor);
    Tensor per_entry = mul(exp(lp_t), sub(lp_t, lq));
    return scale(sum(per_entry), 1.0 / static_cast<double>(n));
}

Tensor peer_ensemble_distill(const Tensor& teacher_logits, std::span<const Tensor> peer_logits,
                             double temperature, double omega, bool teacher_grad) {
    if (peer_logits.empty()) throw ContractError("peer_ensemble_distill needs peers");
    Tensor acc = kl_mean(teacher_logits, peer_logits[0], temperature, teacher_grad);
    for (size_t j = 1; j < peer_logits.size(); ++j)
        acc = add(acc, kl_mean(teacher_logits, peer_logits[j], temperature, teacher_grad));
    return scale(acc, omega * temperature * temperature);
}

Tensor peer_mean_distill(std::span<const Tensor> teacher_logits,
                         std::span<const Tensor> peer_logits, double temperature, double omega) {
    const size_t m = peer_logits.size();
    if (m < 2) return Tensor::scalar(0.0);
    if (teacher_logits.size() != m)
        throw ContractError("peer_mean_distill expects one mean teacher per peer");
    Tensor acc = Tensor::scalar(0.0);
    bool first = true;
    for (size_t j = 0; j < m; ++j)
        for (size_t l = 0; l < m; ++l) {
            if (l == j) continue;
            Tensor term = kl_mean(teacher_logits[l], peer_logits[j], temperature, false);
            acc = first ? term : add(acc, term);
            first = false;
        }
    return scale(acc, omega * temperature * temperature / static_cast<double>(m - 1));
}

Tensor total_loss(const Tensor& ce_peers, const Tensor& ce_teacher, const Tensor& pe,
                  const Tensor& pm) {
    const struct {
        const char* name;
        const Tensor& t;
    } parts[] = {{"ce_peers", ce_peers}, {"ce_teacher", ce_teacher}, {"pe", pe}, {"pm", pm}};
    for (const auto& p : parts) {
        if (!p.t.defined() || p.t.size() != 1)
            throw ContractError(std::string("loss component ") + p.name + " must be a scalar");
        if (!std::isfinite(p.t.item()))
            throw NumericError(std::string("loss component ") + p.name + " is not finite");
    }
    return add(add(add(ce_peers, ce_teacher), pe), pm);
}

} // namespace peerkd
