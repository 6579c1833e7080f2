// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "peerkd/data.hpp"
#include "peerkd/nn.hpp"
#include "peerkd/losses.hpp"
#include "testutil.hpp"

using namespace peerkd;
using namespace peerkd::test;

TEST_CASE("horizontal flip is an involution") {
    Rng rng(1);
    std::vector<double> img = random_vector(3 * 4 * 5, rng);
    std::vector<double> orig = img;
    hflip_image(img, 3, 4, 5);
    bool changed = false;
    for (size_t i = 0; i < img.size(); ++i) changed = changed || img[i] != orig[i];
    CHECK(changed);
    hflip_image(img, 3, 4, 5);
    CHECK(img == orig);
}

TEST_CASE("pad-crop at the center offset reproduces the input") {
    Rng rng(2);
    std::vector<double> img = random_vector(2 * 6 * 6, rng);
    std::vector<double> out(img.size());
    pad_crop_image(img, out, 2, 6, 6, 4, 4, 4);
    CHECK(out == img);

    // A shifted crop brings zeros in from the padding border.
    pad_crop_image(img, out, 2, 6, 6, 4, 0, 0);
    CHECK(out[0] == 0.0);
    CHECK_THROWS_AS(pad_crop_image(img, out, 2, 6, 6, 4, 9, 0), ContractError);
}

TEST_CASE("augmentation is deterministic under a fixed seed") {
    Rng rng_data(3);
    std::vector<double> img = random_vector(3 * 8 * 8, rng_data);
    AugmentConfig cfg{true, 4, 0.05};
    auto run = [&](uint64_t seed) {
        std::vector<double> buf = img;
        Rng rng(seed);
        for (int rep = 0; rep < 5; ++rep) augment_sample(buf, Shape{3, 8, 8}, cfg, rng);
        return buf;
    };
    CHECK(run(42) == run(42));
    CHECK(run(42) != run(43));
}

TEST_CASE("make_views") {
    Dataset ds = make_synthetic_spiral(7, 50, 3, 0.1);
    const FeatureStats st = compute_feature_stats(ds);
    apply_feature_stats(ds, st);
    std::vector<int64_t> idx{0, 5, 10, 149};

    SUBCASE("augmentation off makes all views identical") {
        AugmentConfig off{false, 4, 0.05};
        Rng rng(5);
        TrainBatch b = make_views(ds, idx, 3, off, rng);
        REQUIRE(b.views.size() == 3);
        for (int v = 1; v < 3; ++v)
            for (int64_t i = 0; i < b.views[0].size(); ++i)
                CHECK(b.views[static_cast<size_t>(v)].values()[i] == b.views[0].values()[i]);
        CHECK(b.labels == std::vector<int>{0, 0, 0, 2});
    }
    SUBCASE("m=3 yields exactly 3 view tensors of batch shape") {
        AugmentConfig on{true, 4, 0.05};
        Rng rng(6);
        TrainBatch b = make_views(ds, idx, 3, on, rng);
        REQUIRE(b.views.size() == 3);
        for (const Tensor& v : b.views) CHECK(v.shape() == Shape{4, 2});
    }
    SUBCASE("active augmentation produces at least one differing pair") {
        AugmentConfig on{true, 4, 0.05};
        Rng rng(7);
        std::vector<int64_t> many(100);
        for (int64_t i = 0; i < 100; ++i) many[static_cast<size_t>(i)] = i;
        TrainBatch b = make_views(ds, many, 2, on, rng);
        bool any_diff = false;
        for (int64_t i = 0; i < b.views[0].size(); ++i)
            any_diff = any_diff || b.views[0].values()[i] != b.views[1].values()[i];
        CHECK(any_diff);
    }
}

TEST_CASE("synthetic spiral") {
    SUBCASE("counts and determinism") {
        Dataset a = make_synthetic_spiral(11, 100, 3, 0.2);
        Dataset b = make_synthetic_spiral(11, 100, 3, 0.2);
        CHECK(a.n() == 300);
        CHECK(a.num_classes == 3);
        CHECK(a.feats == b.feats);
        CHECK(a.labels == b.labels);
        Dataset c = make_synthetic_spiral(12, 100, 3, 0.2);
        CHECK(a.feats != c.feats);
    }
    SUBCASE("normalization is computed on train and reused for test") {
        Dataset train = make_synthetic_spiral(11, 200, 3, 0.1);
        Dataset test = make_synthetic_spiral(99, 50, 3, 0.1);
        const FeatureStats st = compute_feature_stats(train);
        apply_feature_stats(train, st);
        apply_feature_stats(test, st);
        const FeatureStats after = compute_feature_stats(train);
        CHECK(std::abs(after.mean[0]) < 1e-12);
        CHECK(std::abs(after.stdev[0] - 1.0) < 1e-12);
        // Applying train stats to test is an affine map, deterministic.
        Dataset test2 = make_synthetic_spiral(99, 50, 3, 0.1);
        apply_feature_stats(test2, st);
        CHECK(test.feats == test2.feats);
    }
    SUBCASE("noise=0 spiral is learnable to 100% train accuracy by a small MLP") {
        Dataset ds = make_synthetic_spiral(5, 64, 3, 0.0);
        const FeatureStats st = compute_feature_stats(ds);
        apply_feature_stats(ds, st);
        Rng init(1);
        LinearLayer l1(2, 32, init);
        LinearLayer l2(32, 3, init);
        ParamStore store;
        l1.register_into(store, "l1");
        l2.register_into(store, "l2");
        SgdOptimizer opt(0.9, 0.0, LrSchedule{0.3, {}, 0.1});
        opt.add_params(store);
        std::vector<int64_t> all(static_cast<size_t>(ds.n()));
        for (int64_t i = 0; i < ds.n(); ++i) all[static_cast<size_t>(i)] = i;
        Tensor x = batch_tensor(ds, all);
        auto forward = [&] { return l2.forward(relu(l1.forward(x, true)), true); };
        for (int step = 0; step < 1000; ++step) {
            opt.zero_grad();
            backward(cross_entropy_mean(forward(), ds.labels));
            opt.step(0);
        }
        NoGradGuard ng;
        Tensor logits = forward();
        int wrong = 0;
        for (int64_t i = 0; i < ds.n(); ++i) {
            int best = 0;
            for (int j = 1; j < 3; ++j)
                if (logits.values()[i * 3 + j] > logits.values()[i * 3 + best]) best = j;
            if (best != ds.labels[static_cast<size_t>(i)]) ++wrong;
        }
        CHECK(wrong == 0);
    }
    SUBCASE("csv dump has feature columns then the label") {
        namespace fs = std::filesystem;
        Dataset ds = make_synthetic_spiral(3, 2, 2, 0.0);
        const fs::path p = fs::temp_directory_path() / "peerkd_spiral.csv";
        dump_dataset_csv(ds, p.string());
        std::ifstream in(p);
        std::string header;
        std::getline(in, header);
        CHECK(header == "x0,x1,label");
        int rows = 0;
        std::string line;
        while (std::getline(in, line))
            if (!line.empty()) ++rows;
        CHECK(rows == 4);
        fs::remove(p);
    }
}

TEST_CASE("batch plan") {
    BatchPlan plan(10, 4, 99);
    CHECK(plan.batch_count() == 3); // final short batch kept
    CHECK(plan.batch_range(0) == std::pair<int64_t, int64_t>{0, 4});
    CHECK(plan.batch_range(2) == std::pair<int64_t, int64_t>{8, 10});
    CHECK_THROWS_AS(plan.batch_range(3), ContractError);

    SUBCASE("epoch orders are permutations, reshuffled per epoch, seed-stable") {
        auto o0 = plan.epoch_order(0);
        auto o1 = plan.epoch_order(1);
        CHECK(o0 != o1);
        auto sorted = o0;
        std::sort(sorted.begin(), sorted.end());
        for (int64_t i = 0; i < 10; ++i) CHECK(sorted[static_cast<size_t>(i)] == i);
        BatchPlan again(10, 4, 99);
        CHECK(again.epoch_order(0) == o0);
        BatchPlan other(10, 4, 100);
        CHECK(other.epoch_order(0) != o0);
    }
}

namespace {

// Writes a full-size 6-file corpus in the standard binary layout with labels
// cycling 0..9; pixel bytes encode the record index so loads are checkable.
void write_cifar_fixture(const std::filesystem::path& dir) {
    namespace fs = std::filesystem;
    fs::create_directories(dir);
    std::vector<uint8_t> record(3073);
    auto write_file = [&](const fs::path& p, int file_idx) {
        std::ofstream out(p, std::ios::binary | std::ios::trunc);
        for (int r = 0; r < 10000; ++r) {
            record[0] = static_cast<uint8_t>(r % 10);
            const uint8_t fill = static_cast<uint8_t>((file_idx * 31 + r) % 251);
            std::fill(record.begin() + 1, record.end(), fill);
            out.write(reinterpret_cast<const char*>(record.data()),
                      static_cast<std::streamsize>(record.size()));
        }
    };
    for (int f = 1; f <= 5; ++f)
        write_file(dir / ("data_batch_" + std::to_string(f) + ".bin"), f);
    write_file(dir / "test_batch.bin", 6);
}

} // namespace

TEST_CASE("cifar10 binary loader") {
    namespace fs = std::filesystem;
    const fs::path dir = fs::temp_directory_path() / "peerkd_cifar_fixture";
    write_cifar_fixture(dir);

    SUBCASE("full load yields 50000 train / 10000 test, 10 classes") {
        auto [train, test] = load_cifar10(dir.string());
        CHECK(train.n() == 50000);
        CHECK(test.n() == 10000);
        CHECK(train.num_classes == 10);
        CHECK(train.sample_shape == Shape{3, 32, 32});
        CHECK(train.labels[0] == 0);
        CHECK(train.labels[1] == 1);
        // Test split reuses train statistics.
        CHECK(test.channel_mean == train.channel_mean);
    }
    SUBCASE("subset picks the first k per class") {
        auto [train, test] = load_cifar10(dir.string(), 500, 100);
        CHECK(train.n() == 5000);
        CHECK(test.n() == 1000);
        std::vector<int> counts(10, 0);
        for (int y : train.labels) ++counts[static_cast<size_t>(y)];
        for (int c = 0; c < 10; ++c) CHECK(counts[static_cast<size_t>(c)] == 500);
    }
    SUBCASE("normalized samples have train-statistics zero mean") {
        auto [train, test] = load_cifar10(dir.string(), 10, 10);
        std::vector<double> buf(static_cast<size_t>(train.sample_size()));
        train.copy_sample(0, buf);
        for (double v : buf) CHECK(std::isfinite(v));
    }
    SUBCASE("missing file error names the file and expected size") {
        fs::remove(dir / "data_batch_3.bin");
        try {
            load_cifar10(dir.string());
            FAIL("expected IoError");
        } catch (const IoError& e) {
            const std::string msg = e.what();
            CHECK(msg.find("data_batch_3.bin") != std::string::npos);
            CHECK(msg.find("30730000") != std::string::npos);
        }
        write_cifar_fixture(dir); // restore
    }
    SUBCASE("wrong-size file is rejected") {
        std::ofstream out(dir / "data_batch_2.bin", std::ios::binary | std::ios::trunc);
        out << "short";
        out.close();
        CHECK_THROWS_AS(load_cifar10(dir.string()), IoError);
        write_cifar_fixture(dir);
    }
    SUBCASE("invalid label byte is rejected") {
        std::fstream f(dir / "data_batch_1.bin",
                       std::ios::binary | std::ios::in | std::ios::out);
        char bad = 12;
        f.seekp(0);
        f.write(&bad, 1);
        f.close();
        CHECK_THROWS_AS(load_cifar10(dir.string()), IoError);
        write_cifar_fixture(dir);
    }
    fs::remove_all(dir);
}
