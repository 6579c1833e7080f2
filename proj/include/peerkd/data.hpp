// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "peerkd/rng.hpp"
#include "peerkd/tensor.hpp"

namespace peerkd {

// In-memory dataset. Synthetic data stores f64 feature rows directly; image
// data keeps the raw bytes and materializes normalized f64 samples on access.
struct Dataset {
    Shape sample_shape;      // {f} or {c,h,w}
    int num_classes = 0;
    std::vector<int> labels;

    std::vector<double> feats;          // synthetic storage, row-major [n, f]
    std::vector<uint8_t> pixels;        // image storage, [n, c*h*w]
    std::array<double, 3> channel_mean{0, 0, 0};
    std::array<double, 3> channel_std{1, 1, 1};

    int64_t n() const { return static_cast<int64_t>(labels.size()); }
    int64_t sample_size() const { return shape_size(sample_shape); }
    bool is_image() const { return sample_shape.size() == 3; }

    // Writes the normalized f64 sample into `out` (size sample_size()).
    void copy_sample(int64_t i, std::span<double> out) const;
};

// C-armed 2-D spiral with Gaussian angular noise; label = arm index.
// Deterministic under seed. Raw (unnormalized) coordinates.
Dataset make_synthetic_spiral(uint64_t seed, int n_per_class, int num_classes, double noise);

// Per-feature statistics of a synthetic dataset.
struct FeatureStats {
    std::vector<double> mean;
    std::vector<double> stdev;
};
FeatureStats compute_feature_stats(const Dataset& ds);
void apply_feature_stats(Dataset& ds, const FeatureStats& stats);

// Standard 6-file binary layout: data_batch_{1..5}.bin + test_batch.bin,
// 10000 records per file, 3073 bytes per record (label byte + 3x32x32
// channel-planar pixels). subset_train/subset_test select the first k samples
// per class (0 keeps everything). Channel normalization uses statistics of
// the loaded train split.
std::pair<Dataset, Dataset> load_cifar10(const std::string& dir, int subset_train = 0,
                                         int subset_test = 0);

// Documented inspection dump: one row per sample, feature columns then label.
void dump_dataset_csv(const Dataset& ds, const std::string& path);

struct TrainBatch {
    std::vector<Tensor> views; // m tensors, [b, sample_shape...]
    std::vector<int> labels;
};

struct AugmentConfig {
    bool enabled = true;
    int pad = 4;              // image pad-and-crop margin
    double jitter_sigma = 0.05; // additive noise for non-image features
};

// Horizontal flip in place; an involution.
void hflip_image(std::span<double> img, int64_t c, int64_t h, int64_t w);
// Zero-pad by `pad` then crop back to (h, w) at offset (oy, ox); offsets in
// [0, 2*pad]. Offset (pad, pad) reproduces the input.
void pad_crop_image(std::span<const double> in, std::span<double> out, int64_t c, int64_t h,
                    int64_t w, int pad, int oy, int ox);
// One stochastic augmentation of a sample already materialized in `buf`.
void augment_sample(std::span<double> buf, const Shape& sample_shape, const AugmentConfig& cfg,
                    Rng& rng);

// Assembles m independently augmented views of the selected samples, in
// index order. With augmentation disabled all views are identical.
TrainBatch make_views(const Dataset& ds, std::span<const int64_t> idx, int m,
                      const AugmentConfig& cfg, Rng& rng);

// Un-augmented batch tensor (evaluation path).
Tensor batch_tensor(const Dataset& ds, std::span<const int64_t> idx);

// Seed-determined epoch permutations split into batches; the final short
// batch is kept.
class BatchPlan {
public:
    BatchPlan(int64_t n, int batch_size, uint64_t seed);
    int batch_count() const { return batch_count_; }
    int batch_size() const { return batch_size_; }
    // Permutation of [0, n) for the given epoch; reshuffled per epoch from an
    // epoch-indexed seed.
    std::vector<int64_t> epoch_order(int epoch) const;
    // Index span of batch b within the epoch order.
    std::pair<int64_t, int64_t> batch_range(int b) const;

private:
    int64_t n_;
    int batch_size_;
    int batch_count_;
    uint64_t seed_;
};

} // namespace peerkd
