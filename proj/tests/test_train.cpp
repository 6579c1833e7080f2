// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "peerkd/train.hpp"
#include "testutil.hpp"

using namespace peerkd;
using namespace peerkd::test;

namespace {

namespace fs = std::filesystem;

RunConfig quick_spiral_config(const fs::path& out, uint64_t seed = 1) {
    RunConfig cfg;
    cfg.data_kind = "spiral";
    cfg.n_per_class = 60;
    cfg.n_per_class_test = 30;
    cfg.classes = 3;
    cfg.noise = 0.25;
    cfg.batch_size = 32;
    cfg.epochs = 4;
    cfg.milestones = {};
    cfg.alpha = 3.0;
    cfg.out_dir = out.string();
    cfg.seed = seed;
    return cfg;
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    return std::string((std::istreambuf_iterator<char>(in)), {});
}

} // namespace

TEST_CASE("branch variance") {
    SUBCASE("identical predictions give zero") {
        Tensor p(Shape{4, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1, 1, 0, 0});
        std::vector<Tensor> probs{p, p, p};
        CHECK(branch_variance(probs) == 0.0);
    }
    SUBCASE("orthogonal one-hot pair gives sqrt(2)") {
        Tensor a(Shape{2, 2}, {1, 0, 1, 0});
        Tensor b(Shape{2, 2}, {0, 1, 0, 1});
        std::vector<Tensor> probs{a, b};
        CHECK(branch_variance(probs) == doctest::Approx(std::sqrt(2.0)).epsilon(1e-15));
    }
    SUBCASE("m=3 equals the brute-force pair average") {
        Rng rng(3);
        std::vector<Tensor> probs;
        for (int j = 0; j < 3; ++j) probs.emplace_back(Shape{5, 4}, random_vector(20, rng, 0, 1));
        double brute = 0.0;
        int pairs = 0;
        for (int j = 0; j < 3; ++j)
            for (int k = j + 1; k < 3; ++k) {
                double mean_dist = 0.0;
                for (int i = 0; i < 5; ++i) {
                    double sq = 0.0;
                    for (int c = 0; c < 4; ++c) {
                        const double d = probs[static_cast<size_t>(j)].values()[i * 4 + c] -
                                         probs[static_cast<size_t>(k)].values()[i * 4 + c];
                        sq += d * d;
                    }
                    mean_dist += std::sqrt(sq);
                }
                brute += mean_dist / 5.0;
                ++pairs;
            }
        brute /= pairs;
        CHECK(std::abs(branch_variance(probs) - brute) < 1e-12);
    }
    SUBCASE("fewer than two peers is a contract error") {
        Tensor p(Shape{2, 2}, {1, 0, 0, 1});
        std::vector<Tensor> one{p};
        CHECK_THROWS_AS(branch_variance(one), ContractError);
    }
}

TEST_CASE("top-1 error") {
    Dataset ds = make_synthetic_spiral(5, 40, 3, 0.0);
    SUBCASE("an oracle that reads the label scores zero error") {
        const double err = top1_error_pct(ds, [&](const Tensor& x) {
            // constant logits favoring the true label, via batch offset lookup
            static int64_t offset = 0;
            const int64_t b = x.dim(0);
            Tensor out(Shape{b, 3}, 0.0);
            for (int64_t i = 0; i < b; ++i)
                out.raw()[i * 3 + ds.labels[static_cast<size_t>(offset + i)]] = 1.0;
            offset += b;
            return out;
        });
        CHECK(err == 0.0);
    }
    SUBCASE("argmax ties break toward the lowest class index") {
        Dataset two = make_synthetic_spiral(6, 2, 2, 0.0);
        const double err =
            top1_error_pct(two, [&](const Tensor& x) { return Tensor(Shape{x.dim(0), 2}, 0.0); });
        // All predictions become class 0; exactly the class-1 samples are wrong.
        CHECK(err == doctest::Approx(50.0).epsilon(1e-12));
    }
    SUBCASE("a label-independent model is ~90% wrong on 10 balanced classes") {
        // Heavy angular noise decouples position from label, so any fixed
        // classifier is right ~1/10 of the time (binomial bound on n=10000).
        Dataset big = make_synthetic_spiral(8, 1000, 10, 20.0);
        Rng wr(11);
        std::vector<double> w = random_vector(2 * 10, wr);
        const double err = top1_error_pct(big, [&](const Tensor& x) {
            return matmul(x, Tensor(Shape{2, 10}, w));
        });
        CHECK(err > 87.0);
        CHECK(err < 93.0);
    }
}

TEST_CASE("short training runs") {
    const fs::path base = fs::temp_directory_path() / "peerkd_train_test";
    fs::remove_all(base);

    SUBCASE("equal seeds produce bitwise-identical metrics CSVs") {
        RunConfig a = quick_spiral_config(base / "a", 9);
        RunConfig b = quick_spiral_config(base / "b", 9);
        TrainArtifacts ra = train(a);
        TrainArtifacts rb = train(b);
        CHECK(slurp(ra.csv_path) == slurp(rb.csv_path));
        CHECK(ra.step_losses == rb.step_losses);

        RunConfig c = quick_spiral_config(base / "c", 10);
        TrainArtifacts rc = train(c);
        CHECK(slurp(ra.csv_path) != slurp(rc.csv_path));
    }

    SUBCASE("loss bookkeeping: total equals the sum of the four terms") {
        TrainArtifacts r = train(quick_spiral_config(base / "sum", 3));
        for (const EpochMetrics& e : r.history) {
            const double sum = e.loss_ce_p + e.loss_ce_t + e.loss_pe + e.loss_pm;
            CHECK(e.loss_total == doctest::Approx(sum).epsilon(1e-9));
        }
    }

    SUBCASE("global step advances by the batch count each epoch") {
        RunConfig cfg = quick_spiral_config(base / "steps", 4);
        TrainArtifacts r = train(cfg);
        // 180 train samples, batch 32 -> 6 batches per epoch (short one kept).
        CHECK(r.summary["global_steps"].get<int64_t>() == 6 * cfg.epochs);
        CHECK(static_cast<int>(r.step_losses.size()) == 6 * cfg.epochs);
    }

    SUBCASE("checkpoint round-trip reproduces the logged error to the last digit") {
        RunConfig cfg = quick_spiral_config(base / "rt", 5);
        TrainArtifacts r = train(cfg);
        auto [train_ds, test_ds] = load_datasets(cfg);
        Checkpoint target = Checkpoint::load(r.target_ckpt);
        const double err = evaluate_checkpoint(target, test_ds, "target");
        CHECK(err == r.history[static_cast<size_t>(r.best_epoch)].test_err_target);

        Checkpoint ens = Checkpoint::load(r.ensemble_ckpt);
        const double err_e = evaluate_checkpoint(ens, test_ds, "ensemble");
        CHECK(err_e == r.history[static_cast<size_t>(r.best_epoch)].test_err_ensemble);

        // State checkpoint: teacher target mode must match the final epoch.
        Checkpoint state = Checkpoint::load(r.state_ckpt);
        const double err_final = evaluate_checkpoint(state, test_ds, "target");
        CHECK(err_final == r.history.back().test_err_target);

        SUBCASE("mode/checkpoint mismatches are contract errors") {
            CHECK_THROWS_AS(evaluate_checkpoint(target, test_ds, "ensemble"), ContractError);
            CHECK_THROWS_AS(evaluate_checkpoint(target, test_ds, "peer0"), ContractError);
            CHECK_THROWS_AS(evaluate_checkpoint(state, test_ds, "peer7"), ContractError);
            CHECK_THROWS_AS(evaluate_checkpoint(state, test_ds, "peerx"), ContractError);
            CHECK_NOTHROW(evaluate_checkpoint(state, test_ds, "peer2"));
        }
    }

    SUBCASE("baseline configuration trains without an ensemble classifier") {
        RunConfig cfg = quick_spiral_config(base / "baseline", 6);
        cfg.m = 1;
        cfg.lambda = 0.0;
        TrainArtifacts r = train(cfg);
        for (const EpochMetrics& e : r.history) {
            CHECK(e.loss_ce_t == 0.0);
            CHECK(e.loss_pe == 0.0);
            CHECK(e.loss_pm == 0.0);
            CHECK(std::isnan(e.test_err_ensemble));
            CHECK(e.branch_variance == 0.0);
        }
        Checkpoint state = Checkpoint::load(r.state_ckpt);
        CHECK_FALSE(state.has_section("student/ensemble/"));
    }

    SUBCASE("ensemble predictions depend on every head") {
        RunConfig cfg = quick_spiral_config(base / "sens", 7);
        TrainArtifacts r = train(cfg);
        Checkpoint ens = Checkpoint::load(r.ensemble_ckpt);
        auto model = model_from_checkpoint(ens, "");
        auto [train_ds, test_ds] = load_datasets(cfg);
        std::vector<int64_t> idx(32);
        for (int64_t i = 0; i < 32; ++i) idx[static_cast<size_t>(i)] = i;
        Tensor x = batch_tensor(test_ds, idx);
        NoGradGuard ng;
        auto ensemble_logits = [&] {
            Tensor t = model->trunk_forward(x, false);
            std::vector<Tensor> feats;
            for (int j = 0; j < model->m(); ++j)
                feats.push_back(model->head_forward(j, t, false).first);
            return model->forward_ensemble(feats, false);
        };
        Tensor before = ensemble_logits();
        for (int zeroed = 0; zeroed < model->m(); ++zeroed) {
            auto saved = model->head_store(zeroed).params()[0].tensor.values();
            std::vector<double> keep(saved.begin(), saved.end());
            auto& raw = model->head_store(zeroed).params()[0].tensor.raw();
            std::fill(raw.begin(), raw.end(), 0.0);
            Tensor after = ensemble_logits();
            bool diff = false;
            for (int64_t i = 0; i < before.size(); ++i)
                diff = diff || before.values()[i] != after.values()[i];
            CHECK(diff);
            raw = keep;
        }
    }

    fs::remove_all(base);
}

TEST_CASE("first-epoch target equals the first-step student copy") {
    // With a one-batch epoch, evaluation right after epoch 0 sees the teacher
    // created by the phi(1)=0 copy of the post-step student.
    const fs::path out = fs::temp_directory_path() / "peerkd_phi1";
    fs::remove_all(out);
    RunConfig cfg = quick_spiral_config(out, 8);
    cfg.batch_size = 1024; // single batch per epoch
    cfg.epochs = 1;
    cfg.pm_enabled = false;
    TrainArtifacts r = train(cfg);
    auto [train_ds, test_ds] = load_datasets(cfg);
    Checkpoint state = Checkpoint::load(r.state_ckpt);
    const double teacher_err = evaluate_checkpoint(state, test_ds, "target");
    const double student_err = evaluate_checkpoint(state, test_ds, "peer0");
    CHECK(teacher_err == student_err);
    fs::remove_all(out);
}
