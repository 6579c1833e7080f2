// SPDX-License-Identifier: Apache-2.0
#include "peerkd/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numbers>

namespace peerkd {

void Dataset::copy_sample(int64_t i, std::span<double> out) const {
    const int64_t sz = sample_size();
    if (i < 0 || i >= n()) throw ContractError("sample index out of range: " + std::to_string(i));
    if (static_cast<int64_t>(out.size()) != sz) throw ContractError("sample buffer size mismatch");
    if (!feats.empty()) {
        std::copy_n(feats.begin() + i * sz, sz, out.begin());
        return;
    }
    const uint8_t* src = pixels.data() + i * sz;
    const int64_t plane = sample_shape[1] * sample_shape[2];
    for (int64_t ch = 0; ch < sample_shape[0]; ++ch) {
        const double mu = channel_mean[static_cast<size_t>(ch)];
        const double sd = channel_std[static_cast<size_t>(ch)];
        for (int64_t k = 0; k < plane; ++k)
            out[ch * plane + k] = (static_cast<double>(src[ch * plane + k]) / 255.0 - mu) / sd;
    }
}

Dataset make_synthetic_spiral(uint64_t seed, int n_per_class, int num_classes, double noise) {
    if (num_classes < 2) throw ContractError("spiral needs at least 2 classes");
    if (n_per_class < 1) throw ContractError("spiral needs at least 1 sample per class");
    Dataset ds;
    ds.sample_shape = {2};
    ds.num_classes = num_classes;
    ds.feats.reserve(static_cast<size_t>(n_per_class) * num_classes * 2);
    ds.labels.reserve(static_cast<size_t>(n_per_class) * num_classes);
    Rng rng(seed);
    const double turn = 2.0 * std::numbers::pi * 1.25;
    for (int c = 0; c < num_classes; ++c) {
        for (int i = 0; i < n_per_class; ++i) {
            const double t = n_per_class > 1 ? static_cast<double>(i) / (n_per_class - 1) : 0.0;
            const double radius = 0.1 + 0.9 * t;
            const double angle = 2.0 * std::numbers::pi * c / num_classes + t * turn +
                                 noise * rng.gauss();
            ds.feats.push_back(radius * std::cos(angle));
            ds.feats.push_back(radius * std::sin(angle));
            ds.labels.push_back(c);
        }
    }
    return ds;
}

FeatureStats compute_feature_stats(const Dataset& ds) {
    if (ds.feats.empty()) throw ContractError("feature stats need a synthetic dataset");
    const int64_t f = ds.sample_size();
    const int64_t n = ds.n();
    FeatureStats st;
    st.mean.assign(static_cast<size_t>(f), 0.0);
    st.stdev.assign(static_cast<size_t>(f), 0.0);
    for (int64_t i = 0; i < n; ++i)
        for (int64_t j = 0; j < f; ++j) st.mean[j] += ds.feats[i * f + j];
    for (int64_t j = 0; j < f; ++j) st.mean[j] /= static_cast<double>(n);
    for (int64_t i = 0; i < n; ++i)
        for (int64_t j = 0; j < f; ++j) {
            const double d = ds.feats[i * f + j] - st.mean[j];
            st.stdev[j] += d * d;
        }
    for (int64_t j = 0; j < f; ++j) {
        st.stdev[j] = std::sqrt(st.stdev[j] / static_cast<double>(n));
        if (st.stdev[j] < 1e-12) st.stdev[j] = 1.0;
    }
    return st;
}

void apply_feature_stats(Dataset& ds, const FeatureStats& stats) {
    const int64_t f = ds.sample_size();
    for (int64_t i = 0; i < ds.n(); ++i)
        for (int64_t j = 0; j < f; ++j)
            ds.feats[i * f + j] = (ds.feats[i * f + j] - stats.mean[j]) / stats.stdev[j];
}

namespace {

constexpr int64_t kCifarRecord = 3073;
constexpr int64_t kCifarPerFile = 10000;
constexpr int64_t kCifarPixels = 3072;

void read_cifar_file(const std::filesystem::path& path, Dataset& ds, int subset_per_class,
                     std::vector<int>& per_class_count) {
    std::error_code ec;
    const auto actual = std::filesystem::file_size(path, ec);
    const uint64_t expected = kCifarRecord * kCifarPerFile;
    if (ec)
        throw IoError("missing dataset file " + path.string() + " (expected " +
                      std::to_string(expected) + " bytes)");
    if (actual != expected)
        throw IoError("dataset file " + path.string() + " has " + std::to_string(actual) +
                      " bytes, expected " + std::to_string(expected));
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open dataset file " + path.string());
    std::vector<uint8_t> record(kCifarRecord);
    for (int64_t r = 0; r < kCifarPerFile; ++r) {
        in.read(reinterpret_cast<char*>(record.data()), kCifarRecord);
        if (!in) throw IoError("truncated record in " + path.string());
        const int label = record[0];
        if (label > 9)
            throw IoError("invalid label byte " + std::to_string(label) + " in " + path.string());
        if (subset_per_class > 0 && per_class_count[label] >= subset_per_class) continue;
        ++per_class_count[label];
        ds.labels.push_back(label);
        ds.pixels.insert(ds.pixels.end(), record.begin() + 1, record.end());
    }
}

void finish_cifar(Dataset& ds) {
    ds.sample_shape = {3, 32, 32};
    ds.num_classes = 10;
}

void set_channel_stats(Dataset& ds) {
    const int64_t plane = 1024;
    for (int ch = 0; ch < 3; ++ch) {
        double s = 0.0;
        for (int64_t i = 0; i < ds.n(); ++i) {
            const uint8_t* p = ds.pixels.data() + i * kCifarPixels + ch * plane;
            for (int64_t k = 0; k < plane; ++k) s += static_cast<double>(p[k]) / 255.0;
        }
        const double mu = s / static_cast<double>(ds.n() * plane);
        double v = 0.0;
        for (int64_t i = 0; i < ds.n(); ++i) {
            const uint8_t* p = ds.pixels.data() + i * kCifarPixels + ch * plane;
            for (int64_t k = 0; k < plane; ++k) {
                const double d = static_cast<double>(p[k]) / 255.0 - mu;
                v += d * d;
            }
        }
        ds.channel_mean[static_cast<size_t>(ch)] = mu;
        double sd = std::sqrt(v / static_cast<double>(ds.n() * plane));
        if (sd < 1e-12) sd = 1.0;
        ds.channel_std[static_cast<size_t>(ch)] = sd;
    }
}

} // namespace

std::pair<Dataset, Dataset> load_cifar10(const std::string& dir, int subset_train,
                                         int subset_test) {
    namespace fs = std::filesystem;
    Dataset train, test;
    std::vector<int> train_counts(10, 0), test_counts(10, 0);
    for (int f = 1; f <= 5; ++f)
        read_cifar_file(fs::path(dir) / ("data_batch_" + std::to_string(f) + ".bin"), train,
                        subset_train, train_counts);
    read_cifar_file(fs::path(dir) / "test_batch.bin", test, subset_test, test_counts);
    finish_cifar(train);
    finish_cifar(test);
    set_channel_stats(train);
    // Test split reuses train-split statistics.
    test.channel_mean = train.channel_mean;
    test.channel_std = train.channel_std;
    return {std::move(train), std::move(test)};
}

void dump_dataset_csv(const Dataset& ds, const std::string& path) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw IoError("cannot open csv for writing: " + path);
    const int64_t f = ds.sample_size();
    for (int64_t j = 0; j < f; ++j) out << "x" << j << ",";
    out << "label\n";
    std::vector<double> buf(static_cast<size_t>(f));
    char num[64];
    for (int64_t i = 0; i < ds.n(); ++i) {
        ds.copy_sample(i, buf);
        for (int64_t j = 0; j < f; ++j) {
            std::snprintf(num, sizeof(num), "%.17g", buf[static_cast<size_t>(j)]);
            out << num << ",";
        }
        out << ds.labels[static_cast<size_t>(i)] << "\n";
    }
}

void hflip_image(std::span<double> img, int64_t c, int64_t h, int64_t w) {
    for (int64_t ch = 0; ch < c; ++ch)
        for (int64_t y = 0; y < h; ++y) {
            double* row = img.data() + (ch * h + y) * w;
            std::reverse(row, row + w);
        }
}

void pad_crop_image(std::span<const double> in, std::span<double> out, int64_t c, int64_t h,
                    int64_t w, int pad, int oy, int ox) {
    if (oy < 0 || oy > 2 * pad || ox < 0 || ox > 2 * pad)
        throw ContractError("crop offset outside padded range");
    for (int64_t ch = 0; ch < c; ++ch)
        for (int64_t y = 0; y < h; ++y)
            for (int64_t x = 0; x < w; ++x) {
                const int64_t sy = y + oy - pad;
                const int64_t sx = x + ox - pad;
                out[(ch * h + y) * w + x] = (sy >= 0 && sy < h && sx >= 0 && sx < w)
                                                ? in[(ch * h + sy) * w + sx]
                                                : 0.0;
            }
}

void augment_sample(std::span<double> buf, const Shape& sample_shape, const AugmentConfig& cfg,
                    Rng& rng) {
    if (!cfg.enabled) return;
    if (sample_shape.size() == 3) {
        const int64_t c = sample_shape[0], h = sample_shape[1], w = sample_shape[2];
        const int oy = static_cast<int>(rng.uniform_int(static_cast<uint64_t>(2 * cfg.pad + 1)));
        const int ox = static_cast<int>(rng.uniform_int(static_cast<uint64_t>(2 * cfg.pad + 1)));
        std::vector<double> tmp(buf.begin(), buf.end());
        pad_crop_image(tmp, buf, c, h, w, cfg.pad, oy, ox);
        if (rng.bernoulli(0.5)) hflip_image(buf, c, h, w);
    } else {
        for (double& v : buf) v += cfg.jitter_sigma * rng.gauss();
    }
}

TrainBatch make_views(const Dataset& ds, std::span<const int64_t> idx, int m,
                      const AugmentConfig& cfg, Rng& rng) {
    if (m < 1) throw ContractError("view count must be >= 1");
    const int64_t b = static_cast<int64_t>(idx.size());
    const int64_t sz = ds.sample_size();
    Shape batch_shape;
    batch_shape.push_back(b);
    for (int64_t d : ds.sample_shape) batch_shape.push_back(d);

    TrainBatch out;
    out.labels.reserve(idx.size());
    for (int64_t i : idx) out.labels.push_back(ds.labels[static_cast<size_t>(i)]);

    std::vector<std::vector<double>> views(static_cast<size_t>(m));
    for (auto& v : views) v.resize(static_cast<size_t>(b * sz));
    std::vector<double> base(static_cast<size_t>(sz));
    // Per sample, m augmentation draws in view order keeps the stream layout
    // independent of batch size.
    for (int64_t r = 0; r < b; ++r) {
        ds.copy_sample(idx[static_cast<size_t>(r)], base);
        for (int v = 0; v < m; ++v) {
            std::span<double> dst(views[static_cast<size_t>(v)].data() + r * sz,
                                  static_cast<size_t>(sz));
            std::copy(base.begin(), base.end(), dst.begin());
            augment_sample(dst, ds.sample_shape, cfg, rng);
        }
    }
    for (int v = 0; v < m; ++v)
        out.views.emplace_back(batch_shape, std::move(views[static_cast<size_t>(v)]));
    return out;
}

Tensor batch_tensor(const Dataset& ds, std::span<const int64_t> idx) {
    const int64_t b = static_cast<int64_t>(idx.size());
    const int64_t sz = ds.sample_size();
    Shape batch_shape;
    batch_shape.push_back(b);
    for (int64_t d : ds.sample_shape) batch_shape.push_back(d);
    std::vector<double> buf(static_cast<size_t>(b * sz));
    for (int64_t r = 0; r < b; ++r)
        ds.copy_sample(idx[static_cast<size_t>(r)],
                       std::span<double>(buf.data() + r * sz, static_cast<size_t>(sz)));
    return Tensor(batch_shape, std::move(buf));
}

BatchPlan::BatchPlan(int64_t n, int batch_size, uint64_t seed)
    : n_(n), batch_size_(batch_size), seed_(seed) {
    if (n < 1) throw ContractError("batch plan needs at least one sample");
    if (batch_size < 1) throw ContractError("batch size must be >= 1");
    batch_count_ = static_cast<int>((n + batch_size - 1) / batch_size);
}

std::vector<int64_t> BatchPlan::epoch_order(int epoch) const {
    std::vector<int64_t> order(static_cast<size_t>(n_));
    for (int64_t i = 0; i < n_; ++i) order[static_cast<size_t>(i)] = i;
    Rng rng(mix_seed(seed_, static_cast<uint64_t>(epoch)));
    for (int64_t i = n_ - 1; i > 0; --i) {
        const int64_t j = static_cast<int64_t>(rng.uniform_int(static_cast<uint64_t>(i + 1)));
        std::swap(order[static_cast<size_t>(i)], order[static_cast<size_t>(j)]);
    }
    return order;
}

std::pair<int64_t, int64_t> BatchPlan::batch_range(int b) const {
    const int64_t lo = static_cast<int64_t>(b) * batch_size_;
    const int64_t hi = std::min<int64_t>(lo + batch_size_, n_);
    if (b < 0 || lo >= n_) throw ContractError("batch index out of range: " + std::to_string(b));
    return {lo, hi};
}

} // namespace peerkd
