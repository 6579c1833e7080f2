// SPDX-License-Identifier: Apache-2.0
#include "peerkd/peerkd.h"

#include <cstring>
#include <filesystem>
#include <string>

#include "peerkd/checkpoint.hpp"
#include "peerkd/config.hpp"
#include "peerkd/model.hpp"
#include "peerkd/train.hpp"

using namespace peerkd;

struct peerkd_config {
    RunConfig cfg;
};

struct peerkd_checkpoint {
    Checkpoint ckpt;
};

namespace {

thread_local std::string g_last_error;

char* dup_string(const std::string& s) {
    char* out = static_cast<char*>(std::malloc(s.size() + 1));
    std::memcpy(out, s.c_str(), s.size() + 1);
    return out;
}

template <typename Fn>
peerkd_status guarded(Fn&& fn) {
    try {
        g_last_error.clear();
        fn();
        return PEERKD_OK;
    } catch (const ConfigError& e) {
        g_last_error = e.what();
        return PEERKD_ERR_CONFIG;
    } catch (const IoError& e) {
        g_last_error = e.what();
        return PEERKD_ERR_IO;
    } catch (const NumericError& e) {
        g_last_error = e.what();
        return PEERKD_ERR_NUMERIC;
    } catch (const ShapeError& e) {
        g_last_error = e.what();
        return PEERKD_ERR_ARG;
    } catch (const ContractError& e) {
        g_last_error = e.what();
        return PEERKD_ERR_ARG;
    } catch (const std::exception& e) {
        g_last_error = e.what();
        return PEERKD_ERR_INTERNAL;
    } catch (...) {
        g_last_error = "unknown error";
        return PEERKD_ERR_INTERNAL;
    }
}

peerkd_status require(bool ok, const char* what) {
    if (ok) return PEERKD_OK;
    g_last_error = what;
    return PEERKD_ERR_ARG;
}

// Parameter/buffer accounting grouped by the component prefix of each array
// name ("trunk", "head0", "student/trunk", ...).
nlohmann::json checkpoint_summary(const Checkpoint& ckpt) {
    nlohmann::json components = nlohmann::json::object();
    int64_t total_params = 0;
    for (const NamedArray& a : ckpt.arrays) {
        const auto slash = a.name.rfind('/');
        std::string component = slash == std::string::npos ? "" : a.name.substr(0, slash);
        if (component.rfind("optim/", 0) == 0) component = "optim";
        const bool is_buffer = a.name.size() > 4 && a.name.rfind("#buf") == a.name.size() - 4;
        auto& entry = components[component];
        if (entry.is_null()) entry = {{"params", 0}, {"buffers", 0}, {"tensors", 0}};
        entry["tensors"] = entry["tensors"].get<int64_t>() + 1;
        if (component == "optim") continue;
        if (is_buffer) {
            entry["buffers"] = entry["buffers"].get<int64_t>() + a.size();
        } else {
            entry["params"] = entry["params"].get<int64_t>() + a.size();
            if (component.rfind("teacher/", 0) != 0) total_params += a.size();
        }
    }
    nlohmann::json out;
    out["kind"] = ckpt.kind();
    out["meta"] = ckpt.meta;
    out["components"] = components;
    out["total_params"] = total_params;
    return out;
}

} // namespace

extern "C" {

const char* peerkd_version(void) { return "1.0.0"; }

const char* peerkd_status_name(peerkd_status status) {
    switch (status) {
        case PEERKD_OK: return "ok";
        case PEERKD_ERR_ARG: return "invalid-argument";
        case PEERKD_ERR_CONFIG: return "config-error";
        case PEERKD_ERR_IO: return "io-error";
        case PEERKD_ERR_NUMERIC: return "numeric-error";
        case PEERKD_ERR_INTERNAL: return "internal-error";
    }
    return "unknown";
}

const char* peerkd_last_error(void) { return g_last_error.c_str(); }

void peerkd_string_free(char* s) { std::free(s); }

peerkd_status peerkd_config_default(peerkd_config** out) {
    if (auto st = require(out != nullptr, "out pointer is null")) return st;
    return guarded([&] { *out = new peerkd_config{}; });
}

peerkd_status peerkd_config_load(const char* path, peerkd_config** out) {
    if (auto st = require(path && out, "path/out pointer is null")) return st;
    return guarded([&] { *out = new peerkd_config{parse_config_file(path)}; });
}

peerkd_status peerkd_config_set(peerkd_config* cfg, const char* key, const char* value) {
    if (auto st = require(cfg && key && value, "null argument")) return st;
    return guarded([&] { apply_override(cfg->cfg, key, value); });
}

peerkd_status peerkd_config_validate(const peerkd_config* cfg) {
    if (auto st = require(cfg != nullptr, "config is null")) return st;
    return guarded([&] { validate(cfg->cfg); });
}

peerkd_status peerkd_config_dump(const peerkd_config* cfg, char** text_out) {
    if (auto st = require(cfg && text_out, "null argument")) return st;
    return guarded([&] { *text_out = dup_string(config_to_text(cfg->cfg)); });
}

void peerkd_config_free(peerkd_config* cfg) { delete cfg; }

peerkd_status peerkd_train(const peerkd_config* cfg, char** summary_json_out) {
    if (auto st = require(cfg != nullptr, "config is null")) return st;
    return guarded([&] {
        TrainArtifacts art = train(cfg->cfg);
        if (summary_json_out) *summary_json_out = dup_string(art.summary.dump(2));
    });
}

peerkd_status peerkd_evaluate(const peerkd_config* cfg, const char* checkpoint_path,
                              const char* mode, const char* split, double* top1_error_out) {
    if (auto st = require(cfg && checkpoint_path && mode && split && top1_error_out,
                          "null argument"))
        return st;
    return guarded([&] {
        validate(cfg->cfg);
        const std::string split_s = split;
        if (split_s != "test" && split_s != "train")
            throw ContractError("split must be 'test' or 'train', got '" + split_s + "'");
        auto [train_ds, test_ds] = load_datasets(cfg->cfg);
        Checkpoint ckpt = Checkpoint::load(checkpoint_path);
        *top1_error_out =
            evaluate_checkpoint(ckpt, split_s == "test" ? test_ds : train_ds, mode);
    });
}

peerkd_status peerkd_checkpoint_open(const char* path, peerkd_checkpoint** out) {
    if (auto st = require(path && out, "null argument")) return st;
    return guarded([&] { *out = new peerkd_checkpoint{Checkpoint::load(path)}; });
}

peerkd_status peerkd_checkpoint_info(const peerkd_checkpoint* ckpt, char** json_out) {
    if (auto st = require(ckpt && json_out, "null argument")) return st;
    return guarded([&] { *json_out = dup_string(checkpoint_summary(ckpt->ckpt).dump(2)); });
}

peerkd_status peerkd_checkpoint_export(const peerkd_checkpoint* ckpt, const char* out_dir) {
    if (auto st = require(ckpt && out_dir, "null argument")) return st;
    return guarded([&] {
        const Checkpoint& c = ckpt->ckpt;
        namespace fs = std::filesystem;
        fs::create_directories(out_dir);
        const int64_t gstep = c.meta.value("global_step", int64_t{0});
        if (c.kind() == "train_state") {
            auto teacher = model_from_checkpoint(c, "teacher/");
            int target_branch = 0;
            if (c.meta.contains("config")) {
                RunConfig embedded = parse_config_text(c.meta.at("config").get<std::string>());
                target_branch = embedded.target_branch;
            }
            const BackboneSpec spec = teacher->spec();
            make_target_checkpoint(*teacher, spec, target_branch, gstep)
                .save(fs::path(out_dir) / "target.ckpt");
            if (teacher->has_ensemble_classifier())
                make_ensemble_checkpoint(*teacher, spec, gstep)
                    .save(fs::path(out_dir) / "ensemble.ckpt");
            return;
        }
        if (c.kind() == "ensemble") {
            auto teacher = model_from_checkpoint(c, "");
            const BackboneSpec spec = teacher->spec();
            make_target_checkpoint(*teacher, spec, 0, gstep)
                .save(fs::path(out_dir) / "target.ckpt");
            make_ensemble_checkpoint(*teacher, spec, gstep)
                .save(fs::path(out_dir) / "ensemble.ckpt");
            return;
        }
        throw ContractError("export needs a train_state or ensemble checkpoint, got kind '" +
                            c.kind() + "'");
    });
}

void peerkd_checkpoint_free(peerkd_checkpoint* ckpt) { delete ckpt; }

} // extern "C"
