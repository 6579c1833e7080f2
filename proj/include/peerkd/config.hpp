// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "peerkd/tensor.hpp"

namespace peerkd {

// Full run configuration. Defaults below are the reference training recipe;
// the shipped desk-scale presets in configs/ override size-related fields.
struct RunConfig {
    // [data]
    std::string data_kind = "spiral"; // spiral | cifar10
    std::string data_path;            // cifar10 directory
    int subset = 0;                   // train samples per class, 0 = all
    int subset_test = 0;              // test samples per class, 0 = all
    uint64_t data_seed = 1;           // synthetic generation seed
    int n_per_class = 500;            // spiral train samples per class
    int n_per_class_test = 250;       // spiral test samples per class
    int classes = 3;                  // spiral class count
    double noise = 0.2;               // spiral angular noise
    std::string dump_csv;             // optional synthetic-data dump path

    // [model]
    std::string preset = "mlp-small"; // mlp-small | cnn-small
    int split_index = 0;              // 0 = preset default
    int m = 3;
    std::string ensemble_teacher = "auto"; // auto | on | off
    int target_branch = 0;

    // [optim]
    double lr = 0.1;
    double momentum = 0.9;
    double weight_decay = 5e-4;
    double lr_decay = 0.1;
    std::vector<int> milestones = {150, 225};
    int batch_size = 128;
    int epochs = 300;
    bool wd_on_norm = true;

    // [distill]
    double temperature = 3.0;
    double alpha = 80.0;
    double lambda = 1.0;
    double beta = 0.999;
    bool pe_teacher_grad = false;
    bool pm_enabled = true;

    // [run]
    std::string out_dir = "runs/out";
    uint64_t seed = 1;
    bool deterministic = true;
    bool augment = true;
    double aug_jitter = 0.05;

    // Effective ensemble-teacher switch: "auto" disables it only for the
    // plain-baseline configuration (m == 1 with distillation off).
    bool ensemble_enabled() const;
};

// Parses the flat `key = value` format with [section] headers and '#'
// comments. Unknown sections or keys are rejected.
RunConfig parse_config_text(const std::string& text);
RunConfig parse_config_file(const std::string& path);

// Applies one "section.key=value" override.
void apply_override(RunConfig& cfg, const std::string& dotted_key, const std::string& value);

// Field-level validation; throws ConfigError naming the offending field.
void validate(const RunConfig& cfg);

// Serializes back to the config text format (includes every key).
std::string config_to_text(const RunConfig& cfg);

} // namespace peerkd
