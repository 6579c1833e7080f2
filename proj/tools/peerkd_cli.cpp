// SPDX-License-Identifier: Apache-2.0
//
// Command-line front end. Everything goes through the public C API in
// peerkd/peerkd.h; this binary holds no training logic of its own.

#include <cstdio>
#include <cstdlib>
#include <memory>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "peerkd/peerkd.h"

namespace {

constexpr int kExitOk = 0;
constexpr int kExitRuntime = 1;
constexpr int kExitConfig = 2;

int status_to_exit(peerkd_status st) {
    if (st == PEERKD_OK) return kExitOk;
    if (st == PEERKD_ERR_CONFIG) return kExitConfig;
    return kExitRuntime;
}

int fail(peerkd_status st) {
    std::fprintf(stderr, "error (%s): %s\n", peerkd_status_name(st), peerkd_last_error());
    return status_to_exit(st);
}

struct ConfigHandle {
    peerkd_config* ptr = nullptr;
    ~ConfigHandle() { peerkd_config_free(ptr); }
};

struct CheckpointHandle {
    peerkd_checkpoint* ptr = nullptr;
    ~CheckpointHandle() { peerkd_checkpoint_free(ptr); }
};

struct StringOut {
    char* ptr = nullptr;
    ~StringOut() { peerkd_string_free(ptr); }
};

// Builds a config from the optional file, key=value overrides, and the
// sugar flags. PEERKD_OUT overrides the configured output directory unless
// --out was given explicitly.
peerkd_status build_config(ConfigHandle& cfg, const std::string& config_path,
                           const std::vector<std::string>& overrides, const std::string& seed,
                           const std::string& out_dir) {
    peerkd_status st = config_path.empty() ? peerkd_config_default(&cfg.ptr)
                                           : peerkd_config_load(config_path.c_str(), &cfg.ptr);
    if (st != PEERKD_OK) return st;
    for (const std::string& kv : overrides) {
        const auto eq = kv.find('=');
        if (eq == std::string::npos) {
            std::fprintf(stderr, "error: --set expects section.key=value, got '%s'\n", kv.c_str());
            return PEERKD_ERR_CONFIG;
        }
        st = peerkd_config_set(cfg.ptr, kv.substr(0, eq).c_str(), kv.substr(eq + 1).c_str());
        if (st != PEERKD_OK) return st;
    }
    if (!seed.empty()) {
        st = peerkd_config_set(cfg.ptr, "run.seed", seed.c_str());
        if (st != PEERKD_OK) return st;
    }
    const char* env_out = std::getenv("PEERKD_OUT");
    if (!out_dir.empty()) {
        st = peerkd_config_set(cfg.ptr, "run.out_dir", out_dir.c_str());
    } else if (env_out && *env_out) {
        st = peerkd_config_set(cfg.ptr, "run.out_dir", env_out);
    }
    if (st != PEERKD_OK) return st;
    return peerkd_config_validate(cfg.ptr);
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"peerkd - multi-branch online knowledge distillation trainer"};
    app.name("peerkd");
    app.require_subcommand(1);
    app.set_version_flag("--version", peerkd_version());

    std::string config_path, seed, out_dir, checkpoint_path, mode = "target", split = "test";
    std::vector<std::string> overrides;
    bool as_json = false;

    auto add_config_flags = [&](CLI::App* cmd) {
        cmd->add_option("--config", config_path, "Config file (flat key=value with [sections])");
        cmd->add_option("--set", overrides,
                        "Override a config entry as section.key=value (repeatable)");
        cmd->add_option("--seed", seed, "Shorthand for --set run.seed=<value>");
        cmd->add_option("--out", out_dir,
                        "Output directory (overrides config and the PEERKD_OUT variable)");
    };

    CLI::App* cmd_train = app.add_subcommand(
        "train", "Train a multi-branch model and write checkpoints, metrics CSV, and summary");
    add_config_flags(cmd_train);
    {
        // The footer lists every config key with its default, so the help
        // text is the authoritative reference for them.
        ConfigHandle defaults;
        StringOut text;
        if (peerkd_config_default(&defaults.ptr) == PEERKD_OK &&
            peerkd_config_dump(defaults.ptr, &text.ptr) == PEERKD_OK) {
            std::string footer = "Configuration keys and defaults (override with --set):\n";
            for (const char* p = text.ptr; *p;) {
                const char* nl = p;
                while (*nl && *nl != '\n') ++nl;
                footer += "  " + std::string(p, nl) + "\n";
                p = *nl ? nl + 1 : nl;
            }
            cmd_train->footer(footer);
        }
    }

    CLI::App* cmd_eval =
        app.add_subcommand("eval", "Evaluate a checkpoint: top-1 error on the configured dataset");
    add_config_flags(cmd_eval);
    cmd_eval->add_option("--checkpoint", checkpoint_path, "Checkpoint file to evaluate")
        ->required();
    cmd_eval->add_option("--mode", mode, "target | ensemble | peerJ (default target)");
    cmd_eval->add_option("--split", split, "test | train (default test)");
    cmd_eval->add_flag("--json", as_json, "Machine-readable output");

    CLI::App* cmd_export = app.add_subcommand(
        "export", "Extract target/ensemble deployment checkpoints from a training checkpoint");
    cmd_export->add_option("--checkpoint", checkpoint_path, "Source train-state checkpoint")
        ->required();
    cmd_export->add_option("--out", out_dir, "Directory for the deployment files")->required();

    CLI::App* cmd_inspect =
        app.add_subcommand("inspect", "Print checkpoint metadata and per-component parameter counts");
    cmd_inspect->add_option("--checkpoint", checkpoint_path, "Checkpoint file")->required();
    cmd_inspect->add_flag("--json", as_json, "Machine-readable output");

    CLI11_PARSE(app, argc, argv);

    if (cmd_train->parsed()) {
        ConfigHandle cfg;
        peerkd_status st = build_config(cfg, config_path, overrides, seed, out_dir);
        if (st != PEERKD_OK) return fail(st);
        StringOut summary;
        st = peerkd_train(cfg.ptr, &summary.ptr);
        if (st != PEERKD_OK) return fail(st);
        std::printf("%s\n", summary.ptr);
        return kExitOk;
    }

    if (cmd_eval->parsed()) {
        ConfigHandle cfg;
        peerkd_status st = build_config(cfg, config_path, overrides, seed, out_dir);
        if (st != PEERKD_OK) return fail(st);
        double err = 0.0;
        st = peerkd_evaluate(cfg.ptr, checkpoint_path.c_str(), mode.c_str(), split.c_str(), &err);
        if (st != PEERKD_OK) return fail(st);
        if (as_json) {
            std::printf("{\"mode\": \"%s\", \"split\": \"%s\", \"top1_error_pct\": %.6f}\n",
                        mode.c_str(), split.c_str(), err);
        } else {
            std::printf("top-1 error (%s, %s): %.2f%%\n", mode.c_str(), split.c_str(), err);
        }
        return kExitOk;
    }

    if (cmd_export->parsed()) {
        CheckpointHandle ckpt;
        peerkd_status st = peerkd_checkpoint_open(checkpoint_path.c_str(), &ckpt.ptr);
        if (st != PEERKD_OK) return fail(st);
        st = peerkd_checkpoint_export(ckpt.ptr, out_dir.c_str());
        if (st != PEERKD_OK) return fail(st);
        std::printf("exported deployment checkpoints to %s\n", out_dir.c_str());
        return kExitOk;
    }

    if (cmd_inspect->parsed()) {
        CheckpointHandle ckpt;
        peerkd_status st = peerkd_checkpoint_open(checkpoint_path.c_str(), &ckpt.ptr);
        if (st != PEERKD_OK) return fail(st);
        StringOut info;
        st = peerkd_checkpoint_info(ckpt.ptr, &info.ptr);
        if (st != PEERKD_OK) return fail(st);
        if (as_json) {
            std::printf("%s\n", info.ptr);
        } else {
            const auto j = nlohmann::json::parse(info.ptr);
            std::printf("kind: %s\n", j["kind"].get<std::string>().c_str());
            std::printf("%-18s %12s %12s\n", "component", "params", "buffers");
            for (const auto& [name, entry] : j["components"].items())
                std::printf("%-18s %12lld %12lld\n", name.c_str(),
                            static_cast<long long>(entry["params"].get<int64_t>()),
                            static_cast<long long>(entry["buffers"].get<int64_t>()));
            std::printf("total params: %lld\n",
                        static_cast<long long>(j["total_params"].get<int64_t>()));
        }
        return kExitOk;
    }

    return kExitConfig;
}
