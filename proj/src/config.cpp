// SPDX-License-Identifier: Apache-2.0
#include "peerkd/config.hpp"

#include <charconv>
#include <cstdio>
#include <fstream>
#include <functional>
#include <sstream>

namespace peerkd {

bool RunConfig::ensemble_enabled() const {
    if (ensemble_teacher == "on") return true;
    if (ensemble_teacher == "off") return false;
    return !(m == 1 && lambda == 0.0);
}

namespace {

struct Field {
    const char* key; // "section.name"
    std::function<void(RunConfig&, const std::string&)> set;
    std::function<std::string(const RunConfig&)> get;
};

std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r\n");
    if (b == std::string::npos) return "";
    const auto e = s.find_last_not_of(" \t\r\n");
    return s.substr(b, e - b + 1);
}

template <typename T>
T parse_number(const std::string& key, const std::string& v) {
    T out{};
    const std::string t = trim(v);
    if constexpr (std::is_floating_point_v<T>) {
        try {
            size_t pos = 0;
            out = static_cast<T>(std::stod(t, &pos));
            if (pos != t.size()) throw std::invalid_argument("trailing characters");
        } catch (const std::exception&) {
            throw ConfigError("field " + key + ": cannot parse number from '" + v + "'");
        }
    } else {
        auto [p, ec] = std::from_chars(t.data(), t.data() + t.size(), out);
        if (ec != std::errc() || p != t.data() + t.size())
            throw ConfigError("field " + key + ": cannot parse integer from '" + v + "'");
    }
    return out;
}

bool parse_bool(const std::string& key, const std::string& v) {
    const std::string t = trim(v);
    if (t == "true" || t == "1" || t == "yes" || t == "on") return true;
    if (t == "false" || t == "0" || t == "no" || t == "off") return false;
    throw ConfigError("field " + key + ": cannot parse boolean from '" + v + "'");
}

std::vector<int> parse_int_list(const std::string& key, const std::string& v) {
    std::vector<int> out;
    std::stringstream ss(trim(v));
    std::string item;
    while (std::getline(ss, item, ',')) {
        item = trim(item);
        if (item.empty()) continue;
        out.push_back(parse_number<int>(key, item));
    }
    return out;
}

// Shortest decimal form that parses back to the same double.
std::string fmt_double(double v) {
    char buf[64];
    for (int prec = 1; prec <= 17; ++prec) {
        std::snprintf(buf, sizeof(buf), "%.*g", prec, v);
        if (std::stod(buf) == v) break;
    }
    return buf;
}

#define NUM_FIELD(key, member, type)                                                  \
    Field{key, [](RunConfig& c, const std::string& v) { c.member = parse_number<type>(key, v); }, \
          [](const RunConfig& c) { return std::to_string(c.member); }}
#define DBL_FIELD(key, member)                                                        \
    Field{key, [](RunConfig& c, const std::string& v) { c.member = parse_number<double>(key, v); }, \
          [](const RunConfig& c) { return fmt_double(c.member); }}
#define STR_FIELD(key, member)                                                        \
    Field{key, [](RunConfig& c, const std::string& v) { c.member = trim(v); },        \
          [](const RunConfig& c) { return c.member; }}
#define BOOL_FIELD(key, member)                                                       \
    Field{key, [](RunConfig& c, const std::string& v) { c.member = parse_bool(key, v); }, \
          [](const RunConfig& c) { return c.member ? "true" : "false"; }}

const std::vector<Field>& fields() {
    static const std::vector<Field> table = {
        STR_FIELD("data.kind", data_kind),
        STR_FIELD("data.path", data_path),
        NUM_FIELD("data.subset", subset, int),
        NUM_FIELD("data.subset_test", subset_test, int),
        NUM_FIELD("data.seed", data_seed, uint64_t),
        NUM_FIELD("data.n_per_class", n_per_class, int),
        NUM_FIELD("data.n_per_class_test", n_per_class_test, int),
        NUM_FIELD("data.classes", classes, int),
        DBL_FIELD("data.noise", noise),
        STR_FIELD("data.dump_csv", dump_csv),
        STR_FIELD("model.preset", preset),
        NUM_FIELD("model.split_index", split_index, int),
        NUM_FIELD("model.m", m, int),
        STR_FIELD("model.ensemble_teacher", ensemble_teacher),
        NUM_FIELD("model.target_branch", target_branch, int),
        DBL_FIELD("optim.lr", lr),
        DBL_FIELD("optim.momentum", momentum),
        DBL_FIELD("optim.weight_decay", weight_decay),
        DBL_FIELD("optim.lr_decay", lr_decay),
        Field{"optim.milestones",
              [](RunConfig& c, const std::string& v) {
                  c.milestones = parse_int_list("optim.milestones", v);
              },
              [](const RunConfig& c) {
                  std::string s;
                  for (size_t i = 0; i < c.milestones.size(); ++i)
                      s += (i ? "," : "") + std::to_string(c.milestones[i]);
                  return s;
              }},
        NUM_FIELD("optim.batch_size", batch_size, int),
        NUM_FIELD("optim.epochs", epochs, int),
        BOOL_FIELD("optim.wd_on_norm", wd_on_norm),
        DBL_FIELD("distill.temperature", temperature),
        DBL_FIELD("distill.alpha", alpha),
        DBL_FIELD("distill.lambda", lambda),
        DBL_FIELD("distill.beta", beta),
        BOOL_FIELD("distill.pe_teacher_grad", pe_teacher_grad),
        BOOL_FIELD("distill.pm_enabled", pm_enabled),
        STR_FIELD("run.out_dir", out_dir),
        NUM_FIELD("run.seed", seed, uint64_t),
        BOOL_FIELD("run.deterministic", deterministic),
        BOOL_FIELD("run.augment", augment),
        DBL_FIELD("run.aug_jitter", aug_jitter),
    };
    return table;
}

#undef NUM_FIELD
#undef DBL_FIELD
#undef STR_FIELD
#undef BOOL_FIELD

const Field* find_field(const std::string& key) {
    for (const Field& f : fields())
        if (key == f.key) return &f;
    return nullptr;
}

} // namespace

void apply_override(RunConfig& cfg, const std::string& dotted_key, const std::string& value) {
    const Field* f = find_field(trim(dotted_key));
    if (!f) throw ConfigError("unknown config key: " + dotted_key);
    f->set(cfg, value);
}

RunConfig parse_config_text(const std::string& text) {
    RunConfig cfg;
    std::istringstream in(text);
    std::string line, section;
    int line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        const auto hash = line.find('#');
        if (hash != std::string::npos) line = line.substr(0, hash);
        line = trim(line);
        if (line.empty()) continue;
        if (line.front() == '[') {
            if (line.back() != ']')
                throw ConfigError("line " + std::to_string(line_no) + ": malformed section header");
            section = trim(line.substr(1, line.size() - 2));
            continue;
        }
        const auto eq = line.find('=');
        if (eq == std::string::npos)
            throw ConfigError("line " + std::to_string(line_no) + ": expected key = value");
        const std::string key = trim(line.substr(0, eq));
        const std::string value = trim(line.substr(eq + 1));
        if (section.empty())
            throw ConfigError("line " + std::to_string(line_no) + ": key '" + key +
                              "' appears before any [section]");
        apply_override(cfg, section + "." + key, value);
    }
    return cfg;
}

RunConfig parse_config_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config file: " + path);
    std::ostringstream ss;
    ss << in.rdbuf();
    return parse_config_text(ss.str());
}

void validate(const RunConfig& cfg) {
    auto fail = [](const std::string& field, const std::string& why) {
        throw ConfigError("field " + field + ": " + why);
    };
    if (cfg.data_kind != "spiral" && cfg.data_kind != "cifar10")
        fail("data.kind", "must be 'spiral' or 'cifar10', got '" + cfg.data_kind + "'");
    if (cfg.data_kind == "cifar10" && cfg.data_path.empty())
        fail("data.path", "required for data.kind = cifar10");
    if (cfg.subset < 0) fail("data.subset", "must be >= 0");
    if (cfg.classes < 2) fail("data.classes", "must be >= 2");
    if (cfg.n_per_class < 1) fail("data.n_per_class", "must be >= 1");
    if (cfg.n_per_class_test < 1) fail("data.n_per_class_test", "must be >= 1");
    if (cfg.noise < 0) fail("data.noise", "must be >= 0");
    if (cfg.preset != "mlp-small" && cfg.preset != "cnn-small")
        fail("model.preset", "must be 'mlp-small' or 'cnn-small', got '" + cfg.preset + "'");
    if (cfg.m < 1) fail("model.m", "must be >= 1");
    if (cfg.ensemble_teacher != "auto" && cfg.ensemble_teacher != "on" &&
        cfg.ensemble_teacher != "off")
        fail("model.ensemble_teacher", "must be auto, on, or off");
    if (cfg.target_branch < 0 || cfg.target_branch >= cfg.m)
        fail("model.target_branch", "must be in [0, m)");
    if (!(cfg.lr > 0)) fail("optim.lr", "must be > 0");
    if (cfg.momentum < 0 || cfg.momentum >= 1) fail("optim.momentum", "must be in [0, 1)");
    if (cfg.weight_decay < 0) fail("optim.weight_decay", "must be >= 0");
    if (!(cfg.lr_decay > 0) || cfg.lr_decay > 1) fail("optim.lr_decay", "must be in (0, 1]");
    if (cfg.batch_size < 1) fail("optim.batch_size", "must be >= 1");
    if (cfg.epochs < 1) fail("optim.epochs", "must be >= 1");
    for (size_t i = 1; i < cfg.milestones.size(); ++i)
        if (cfg.milestones[i] <= cfg.milestones[i - 1])
            fail("optim.milestones", "must be strictly increasing");
    if (!(cfg.temperature > 0)) fail("distill.temperature", "must be > 0");
    if (!(cfg.alpha > 0)) fail("distill.alpha", "must be > 0");
    if (cfg.lambda < 0) fail("distill.lambda", "must be >= 0");
    if (cfg.beta < 0 || cfg.beta >= 1) fail("distill.beta", "must be in [0, 1)");
    if (cfg.out_dir.empty()) fail("run.out_dir", "must not be empty");
    if (cfg.aug_jitter < 0) fail("run.aug_jitter", "must be >= 0");
}

std::string config_to_text(const RunConfig& cfg) {
    std::string out;
    std::string section;
    for (const Field& f : fields()) {
        const std::string key = f.key;
        const auto dot = key.find('.');
        const std::string sec = key.substr(0, dot);
        if (sec != section) {
            if (!section.empty()) out += "\n";
            out += "[" + sec + "]\n";
            section = sec;
        }
        out += key.substr(dot + 1) + " = " + f.get(cfg) + "\n";
    }
    return out;
}

} // namespace peerkd
