// SPDX-License-Identifier: Apache-2.0
#include "peerkd/train.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>

#include "peerkd/losses.hpp"

namespace peerkd {

namespace {

constexpr int64_t kEvalChunk = 256;

// RNG substream ids derived from the run seed.
enum StreamId : uint64_t { kInitStream = 1, kAugStream = 2, kShuffleStream = 3 };

std::vector<int64_t> iota_indices(int64_t n) {
    std::vector<int64_t> idx(static_cast<size_t>(n));
    for (int64_t i = 0; i < n; ++i) idx[static_cast<size_t>(i)] = i;
    return idx;
}

int argmax_row(std::span<const double> row) {
    int best = 0;
    for (size_t j = 1; j < row.size(); ++j)
        if (row[j] > row[best]) best = static_cast<int>(j);
    return best;
}

std::string fmt(double v, const char* spec = "%.12g") {
    char buf[64];
    std::snprintf(buf, sizeof(buf), spec, v);
    return buf;
}

} // namespace

double top1_error_pct(const Dataset& ds,
                      const std::function<Tensor(const Tensor&)>& logits_fn) {
    NoGradGuard ng;
    int64_t wrong = 0;
    const int64_t n = ds.n();
    auto idx = iota_indices(n);
    for (int64_t lo = 0; lo < n; lo += kEvalChunk) {
        const int64_t hi = std::min(n, lo + kEvalChunk);
        Tensor x = batch_tensor(ds, std::span<const int64_t>(idx).subspan(lo, hi - lo));
        Tensor logits = logits_fn(x);
        const int64_t c = logits.dim(1);
        for (int64_t r = 0; r < hi - lo; ++r) {
            const int pred = argmax_row(logits.values().subspan(r * c, c));
            if (pred != ds.labels[static_cast<size_t>(lo + r)]) ++wrong;
        }
    }
    return 100.0 * static_cast<double>(wrong) / static_cast<double>(n);
}

double branch_variance(std::span<const Tensor> peer_probs) {
    const size_t m = peer_probs.size();
    if (m < 2) throw ContractError("branch variance needs at least 2 peers");
    const int64_t n = peer_probs[0].dim(0);
    const int64_t c = peer_probs[0].dim(1);
    for (const Tensor& p : peer_probs)
        if (p.dim(0) != n || p.dim(1) != c)
            throw ShapeError("branch variance: prediction shapes disagree");
    double pair_sum = 0.0;
    int pairs = 0;
    for (size_t j = 0; j < m; ++j)
        for (size_t k = j + 1; k < m; ++k) {
            double dist_sum = 0.0;
            for (int64_t i = 0; i < n; ++i) {
                double sq = 0.0;
                for (int64_t t = 0; t < c; ++t) {
                    const double d =
                        peer_probs[j].values()[i * c + t] - peer_probs[k].values()[i * c + t];
                    sq += d * d;
                }
                dist_sum += std::sqrt(sq);
            }
            pair_sum += dist_sum / static_cast<double>(n);
            ++pairs;
        }
    return pair_sum / static_cast<double>(pairs);
}

std::pair<Dataset, Dataset> load_datasets(const RunConfig& cfg) {
    if (cfg.data_kind == "spiral") {
        Dataset train =
            make_synthetic_spiral(cfg.data_seed, cfg.n_per_class, cfg.classes, cfg.noise);
        Dataset test = make_synthetic_spiral(mix_seed(cfg.data_seed, 0x7e57), cfg.n_per_class_test,
                                             cfg.classes, cfg.noise);
        const FeatureStats stats = compute_feature_stats(train);
        apply_feature_stats(train, stats);
        apply_feature_stats(test, stats);
        return {std::move(train), std::move(test)};
    }
    if (cfg.data_kind == "cifar10")
        return load_cifar10(cfg.data_path, cfg.subset, cfg.subset_test);
    throw ConfigError("field data.kind: unsupported value '" + cfg.data_kind + "'");
}

namespace {

// Branch-variance of student peer predictions over a dataset, computed in
// chunks so the full probability matrices never materialize.
double dataset_branch_variance(MultiBranchModel& model, const Dataset& ds) {
    NoGradGuard ng;
    const int m = model.m();
    const int64_t n = ds.n();
    auto idx = iota_indices(n);
    double dist_sum = 0.0;
    const int pairs = m * (m - 1) / 2;
    for (int64_t lo = 0; lo < n; lo += kEvalChunk) {
        const int64_t hi = std::min(n, lo + kEvalChunk);
        Tensor x = batch_tensor(ds, std::span<const int64_t>(idx).subspan(lo, hi - lo));
        std::vector<Tensor> probs;
        probs.reserve(static_cast<size_t>(m));
        for (int j = 0; j < m; ++j)
            probs.push_back(soften(model.forward_branch(j, x, false), 1.0));
        const int64_t c = probs[0].dim(1);
        for (int j = 0; j < m; ++j)
            for (int k = j + 1; k < m; ++k)
                for (int64_t i = 0; i < hi - lo; ++i) {
                    double sq = 0.0;
                    for (int64_t t = 0; t < c; ++t) {
                        const double d = probs[static_cast<size_t>(j)].values()[i * c + t] -
                                         probs[static_cast<size_t>(k)].values()[i * c + t];
                        sq += d * d;
                    }
                    dist_sum += std::sqrt(sq);
                }
    }
    return dist_sum / static_cast<double>(pairs) / static_cast<double>(n);
}

std::string csv_header(int m) {
    std::string h = "epoch,lr,omega,loss_total,loss_ce_p,loss_ce_t,loss_pe,loss_pm";
    for (int j = 0; j < m; ++j) h += ",train_err_peer" + std::to_string(j);
    for (int j = 0; j < m; ++j) h += ",train_err_mt" + std::to_string(j);
    h += ",train_err_target,train_err_ensemble";
    for (int j = 0; j < m; ++j) h += ",test_err_peer" + std::to_string(j);
    for (int j = 0; j < m; ++j) h += ",test_err_mt" + std::to_string(j);
    h += ",test_err_target,test_err_ensemble,branch_variance,wall_seconds";
    return h;
}

std::string csv_row(const EpochMetrics& r) {
    std::string s = std::to_string(r.epoch);
    s += "," + fmt(r.lr) + "," + fmt(r.omega);
    s += "," + fmt(r.loss_total) + "," + fmt(r.loss_ce_p) + "," + fmt(r.loss_ce_t) + "," +
         fmt(r.loss_pe) + "," + fmt(r.loss_pm);
    for (double v : r.train_err_peer) s += "," + fmt(v, "%.6f");
    for (double v : r.train_err_mt) s += "," + fmt(v, "%.6f");
    s += "," + fmt(r.train_err_target, "%.6f") + "," + fmt(r.train_err_ensemble, "%.6f");
    for (double v : r.test_err_peer) s += "," + fmt(v, "%.6f");
    for (double v : r.test_err_mt) s += "," + fmt(v, "%.6f");
    s += "," + fmt(r.test_err_target, "%.6f") + "," + fmt(r.test_err_ensemble, "%.6f");
    s += "," + fmt(r.branch_variance) + "," + fmt(r.wall_seconds, "%.3f");
    return s;
}

} // namespace

TrainArtifacts train(const RunConfig& cfg) {
    validate(cfg);
    namespace fs = std::filesystem;
    fs::create_directories(cfg.out_dir);

    auto [train_ds, test_ds] = load_datasets(cfg);
    if (!cfg.dump_csv.empty() && !train_ds.feats.empty()) dump_dataset_csv(train_ds, cfg.dump_csv);

    Rng init_rng(mix_seed(cfg.seed, kInitStream));
    const BackboneSpec spec = BackboneSpec::make(cfg.preset, train_ds.sample_shape, cfg.split_index);
    const bool with_ensemble = cfg.ensemble_enabled();
    const int m = cfg.m;
    MultiBranchModel model(spec, m, train_ds.num_classes, with_ensemble, init_rng);
    MeanTeacherBank bank(spec, m, train_ds.num_classes, with_ensemble, cfg.beta);

    LrSchedule schedule{cfg.lr, cfg.milestones, cfg.lr_decay};
    SgdOptimizer opt(cfg.momentum, cfg.weight_decay, schedule, cfg.wd_on_norm);
    model.for_each_store([&](const std::string&, ParamStore& store) { opt.add_params(store); });

    BatchPlan plan(train_ds.n(), cfg.batch_size, mix_seed(cfg.seed, kShuffleStream));
    AugmentConfig aug{cfg.augment, 4, cfg.aug_jitter};

    TrainArtifacts art;
    art.csv_path = fs::path(cfg.out_dir) / "metrics.csv";
    art.summary_path = fs::path(cfg.out_dir) / "summary.json";
    art.target_ckpt = fs::path(cfg.out_dir) / "target.ckpt";
    art.ensemble_ckpt = fs::path(cfg.out_dir) / "ensemble.ckpt";
    art.state_ckpt = fs::path(cfg.out_dir) / "state_final.ckpt";

    std::ofstream csv(art.csv_path, std::ios::trunc);
    if (!csv) throw IoError("cannot open metrics log for writing: " + art.csv_path.string());
    csv << csv_header(m) << "\n";

    double best_err = std::numeric_limits<double>::infinity();
    int64_t g = 0; // global optimizer-step counter, 1-based after first step

    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        const auto t0 = std::chrono::steady_clock::now();
        const double lr = schedule.at(epoch);
        const double omega = ramp_up(epoch, cfg.alpha, cfg.lambda);
        Rng aug_rng(mix_seed(mix_seed(cfg.seed, kAugStream), static_cast<uint64_t>(epoch)));
        const auto order = plan.epoch_order(epoch);

        double sum_total = 0, sum_ce_p = 0, sum_ce_t = 0, sum_pe = 0, sum_pm = 0;
        for (int b = 0; b < plan.batch_count(); ++b) {
            const auto [lo, hi] = plan.batch_range(b);
            TrainBatch batch =
                make_views(train_ds, std::span<const int64_t>(order).subspan(lo, hi - lo), m, aug,
                           aug_rng);

            opt.zero_grad();
            PeerOutputs peers = model.forward_peers(batch.views, /*training=*/true);
            Tensor z_teacher;
            if (with_ensemble) z_teacher = model.forward_ensemble(peers.features, true);

            Tensor ce_p = peer_ce_loss(peers.logits, batch.labels);
            Tensor ce_t = with_ensemble ? teacher_ce_loss(z_teacher, batch.labels)
                                        : Tensor::scalar(0.0);
            Tensor pe = (with_ensemble && omega > 0.0)
                            ? peer_ensemble_distill(z_teacher, peers.logits, cfg.temperature,
                                                    omega, cfg.pe_teacher_grad)
                            : Tensor::scalar(0.0);
            Tensor pm = Tensor::scalar(0.0);
            if (m >= 2 && cfg.pm_enabled && omega > 0.0 && bank.populated()) {
                std::vector<Tensor> mt_logits = bank.forward_teachers(batch.views);
                pm = peer_mean_distill(mt_logits, peers.logits, cfg.temperature, omega);
            }
            Tensor total;
            try {
                total = total_loss(ce_p, ce_t, pe, pm);
            } catch (const NumericError& e) {
                throw NumericError(std::string(e.what()) + " at epoch " + std::to_string(epoch) +
                                   " step " + std::to_string(g + 1));
            }
            if (!std::isfinite(total.item()))
                throw NumericError("non-finite total loss at epoch " + std::to_string(epoch) +
                                   " step " + std::to_string(g + 1));

            backward(total);
            opt.step(epoch);
            ++g;
            bank.update(model, g);

            art.step_losses.push_back(total.item());
            sum_total += total.item();
            sum_ce_p += ce_p.item();
            sum_ce_t += ce_t.item();
            sum_pe += pe.item();
            sum_pm += pm.item();
        }

        EpochMetrics rec;
        rec.epoch = epoch;
        rec.lr = lr;
        rec.omega = omega;
        const double nb = static_cast<double>(plan.batch_count());
        rec.loss_total = sum_total / nb;
        rec.loss_ce_p = sum_ce_p / nb;
        rec.loss_ce_t = sum_ce_t / nb;
        rec.loss_pe = sum_pe / nb;
        rec.loss_pm = sum_pm / nb;

        for (int j = 0; j < m; ++j) {
            rec.train_err_peer.push_back(top1_error_pct(
                train_ds, [&](const Tensor& x) { return model.forward_branch(j, x, false); }));
            rec.test_err_peer.push_back(top1_error_pct(
                test_ds, [&](const Tensor& x) { return model.forward_branch(j, x, false); }));
            rec.train_err_mt.push_back(top1_error_pct(
                train_ds, [&](const Tensor& x) { return bank.forward_branch(j, x); }));
            rec.test_err_mt.push_back(top1_error_pct(
                test_ds, [&](const Tensor& x) { return bank.forward_branch(j, x); }));
        }
        rec.train_err_target = rec.train_err_mt[static_cast<size_t>(cfg.target_branch)];
        rec.test_err_target = rec.test_err_mt[static_cast<size_t>(cfg.target_branch)];
        if (with_ensemble) {
            rec.train_err_ensemble = top1_error_pct(
                train_ds, [&](const Tensor& x) { return bank.forward_ensemble_from(x); });
            rec.test_err_ensemble = top1_error_pct(
                test_ds, [&](const Tensor& x) { return bank.forward_ensemble_from(x); });
        } else {
            rec.train_err_ensemble = std::numeric_limits<double>::quiet_NaN();
            rec.test_err_ensemble = std::numeric_limits<double>::quiet_NaN();
        }
        rec.branch_variance = m >= 2 ? dataset_branch_variance(model, test_ds) : 0.0;

        const auto t1 = std::chrono::steady_clock::now();
        // The wall-clock column is zeroed in deterministic mode so equal-seed
        // runs produce byte-identical logs.
        rec.wall_seconds =
            cfg.deterministic ? 0.0 : std::chrono::duration<double>(t1 - t0).count();

        csv << csv_row(rec) << "\n";
        csv.flush();

        if (rec.test_err_target < best_err) {
            best_err = rec.test_err_target;
            art.best_epoch = epoch;
            make_target_checkpoint(bank.model(), spec, cfg.target_branch, bank.step())
                .save(art.target_ckpt);
            if (with_ensemble)
                make_ensemble_checkpoint(bank.model(), spec, bank.step()).save(art.ensemble_ckpt);
        }
        art.history.push_back(std::move(rec));
    }

    art.best_target_test_err = best_err;
    make_state_checkpoint(model, bank, opt, spec, g, cfg.epochs - 1, config_to_text(cfg))
        .save(art.state_ckpt);

    const EpochMetrics& last = art.history.back();
    nlohmann::json summary;
    summary["seed"] = cfg.seed;
    summary["epochs"] = cfg.epochs;
    summary["global_steps"] = g;
    summary["best_epoch"] = art.best_epoch;
    summary["best_test_err_target"] = art.best_target_test_err;
    summary["final_test_err_target"] = last.test_err_target;
    summary["final_test_err_peers"] = last.test_err_peer;
    summary["final_test_err_mean_teachers"] = last.test_err_mt;
    summary["final_branch_variance"] = last.branch_variance;
    if (with_ensemble) {
        summary["final_test_err_ensemble"] = last.test_err_ensemble;
        const auto& best = art.history[static_cast<size_t>(art.best_epoch)];
        summary["best_test_err_ensemble"] = best.test_err_ensemble;
    }
    summary["hyperparams"] = {{"m", cfg.m},
                              {"temperature", cfg.temperature},
                              {"alpha", cfg.alpha},
                              {"lambda", cfg.lambda},
                              {"beta", cfg.beta},
                              {"lr", cfg.lr},
                              {"momentum", cfg.momentum},
                              {"weight_decay", cfg.weight_decay},
                              {"batch_size", cfg.batch_size},
                              {"epochs", cfg.epochs},
                              {"milestones", cfg.milestones}};
    summary["artifacts"] = {{"metrics_csv", art.csv_path.string()},
                            {"target_checkpoint", art.target_ckpt.string()},
                            {"ensemble_checkpoint", with_ensemble ? art.ensemble_ckpt.string() : ""},
                            {"state_checkpoint", art.state_ckpt.string()}};
    art.summary = summary;
    std::ofstream js(art.summary_path, std::ios::trunc);
    if (!js) throw IoError("cannot write summary: " + art.summary_path.string());
    js << summary.dump(2) << "\n";
    return art;
}

double evaluate_checkpoint(const Checkpoint& ckpt, const Dataset& ds, const std::string& mode) {
    const std::string kind = ckpt.kind();
    auto eval_model = [&](std::unique_ptr<MultiBranchModel> model,
                          const std::string& submode) -> double {
        NoGradGuard ng;
        if (submode == "ensemble") {
            if (!model->has_ensemble_classifier())
                throw ContractError("checkpoint has no ensemble classifier for mode 'ensemble'");
            return top1_error_pct(ds, [&](const Tensor& x) {
                Tensor t = model->trunk_forward(x, false);
                std::vector<Tensor> feats;
                for (int j = 0; j < model->m(); ++j)
                    feats.push_back(model->head_forward(j, t, false).first);
                return model->forward_ensemble(feats, false);
            });
        }
        int branch = 0;
        if (submode.rfind("peer", 0) == 0) {
            const std::string digits = submode.substr(4);
            if (digits.empty() || digits.find_first_not_of("0123456789") != std::string::npos)
                throw ContractError("malformed evaluation mode '" + submode + "'");
            branch = std::stoi(digits);
        }
        if (branch < 0 || branch >= model->m())
            throw ContractError("branch index in mode '" + submode + "' out of range for m=" +
                                std::to_string(model->m()));
        return top1_error_pct(
            ds, [&](const Tensor& x) { return model->forward_branch(branch, x, false); });
    };

    if (kind == "target") {
        if (mode != "target")
            throw ContractError("checkpoint kind 'target' only supports mode 'target', got '" +
                                mode + "'");
        return eval_model(model_from_checkpoint(ckpt, ""), "target");
    }
    if (kind == "ensemble") {
        if (mode != "ensemble" && mode != "target")
            throw ContractError("checkpoint kind 'ensemble' supports modes 'ensemble' and "
                                "'target', got '" + mode + "'");
        return eval_model(model_from_checkpoint(ckpt, ""), mode);
    }
    if (kind == "train_state") {
        if (mode == "target" || mode == "ensemble")
            return eval_model(model_from_checkpoint(ckpt, "teacher/"), mode);
        if (mode.rfind("peer", 0) == 0)
            return eval_model(model_from_checkpoint(ckpt, "student/"), mode);
        throw ContractError("unknown evaluation mode '" + mode + "'");
    }
    throw ContractError("unknown checkpoint kind '" + kind + "'");
}

} // namespace peerkd
