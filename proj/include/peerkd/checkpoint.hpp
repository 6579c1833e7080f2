// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "peerkd/tensor.hpp"

namespace peerkd {

// On-disk container for named f64 arrays plus a JSON metadata block.
// Layout (all integers little-endian):
//   magic "PKDCKPT\n" (8 bytes)
//   u32 version (currently 1)
//   u64 meta length, meta bytes (UTF-8 JSON)
//   u64 tensor count
//   per tensor: u64 name length, name bytes, u32 ndim, i64 dims..., f64 data...
struct NamedArray {
    std::string name;
    Shape shape;
    std::vector<double> data;
    int64_t size() const { return static_cast<int64_t>(data.size()); }
};

struct Checkpoint {
    nlohmann::json meta; // kind, model geometry, global step, ...
    std::vector<NamedArray> arrays;

    std::string kind() const { return meta.value("kind", std::string()); }
    const NamedArray* find(std::string_view name) const;
    bool has_section(std::string_view prefix) const;

    void save(const std::filesystem::path& path) const;
    static Checkpoint load(const std::filesystem::path& path);
};

} // namespace peerkd
