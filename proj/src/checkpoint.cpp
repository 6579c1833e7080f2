// SPDX-License-Identifier: Apache-2.0
#include "peerkd/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>

namespace peerkd {

namespace {

constexpr char kMagic[8] = {'P', 'K', 'D', 'C', 'K', 'P', 'T', '\n'};
constexpr uint32_t kVersion = 1;

static_assert(std::endian::native == std::endian::little,
              "checkpoint writer assumes a little-endian host");

template <typename T>
void write_pod(std::ofstream& out, const T& v) {
    out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
void read_pod(std::ifstream& in, T& v, const std::filesystem::path& path) {
    in.read(reinterpret_cast<char*>(&v), sizeof(T));
    if (!in) throw IoError("truncated checkpoint file: " + path.string());
}

} // namespace

const NamedArray* Checkpoint::find(std::string_view name) const {
    for (const NamedArray& a : arrays)
        if (a.name == name) return &a;
    return nullptr;
}

bool Checkpoint::has_section(std::string_view prefix) const {
    for (const NamedArray& a : arrays)
        if (a.name.rfind(prefix, 0) == 0) return true;
    return false;
}

void Checkpoint::save(const std::filesystem::path& path) const {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open checkpoint for writing: " + path.string());
    out.write(kMagic, sizeof(kMagic));
    write_pod(out, kVersion);
    const std::string meta_text = meta.dump();
    write_pod(out, static_cast<uint64_t>(meta_text.size()));
    out.write(meta_text.data(), static_cast<std::streamsize>(meta_text.size()));
    write_pod(out, static_cast<uint64_t>(arrays.size()));
    for (const NamedArray& a : arrays) {
        write_pod(out, static_cast<uint64_t>(a.name.size()));
        out.write(a.name.data(), static_cast<std::streamsize>(a.name.size()));
        write_pod(out, static_cast<uint32_t>(a.shape.size()));
        for (int64_t d : a.shape) write_pod(out, d);
        out.write(reinterpret_cast<const char*>(a.data.data()),
                  static_cast<std::streamsize>(a.data.size() * sizeof(double)));
    }
    if (!out) throw IoError("checkpoint write failed: " + path.string());
}

Checkpoint Checkpoint::load(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open checkpoint: " + path.string());
    char magic[8];
    in.read(magic, sizeof(magic));
    if (!in || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0)
        throw IoError("not a checkpoint file (bad magic at offset 0): " + path.string());
    uint32_t version = 0;
    read_pod(in, version, path);
    if (version != kVersion)
        throw IoError("unsupported checkpoint version " + std::to_string(version) + ": " +
                      path.string());
    uint64_t meta_len = 0;
    read_pod(in, meta_len, path);
    std::string meta_text(meta_len, '\0');
    in.read(meta_text.data(), static_cast<std::streamsize>(meta_len));
    if (!in) throw IoError("truncated checkpoint metadata: " + path.string());

    Checkpoint ckpt;
    try {
        ckpt.meta = nlohmann::json::parse(meta_text);
    } catch (const nlohmann::json::exception& e) {
        throw IoError("corrupt checkpoint metadata in " + path.string() + ": " + e.what());
    }
    uint64_t count = 0;
    read_pod(in, count, path);
    ckpt.arrays.reserve(count);
    for (uint64_t i = 0; i < count; ++i) {
        NamedArray a;
        uint64_t name_len = 0;
        read_pod(in, name_len, path);
        a.name.resize(name_len);
        in.read(a.name.data(), static_cast<std::streamsize>(name_len));
        uint32_t ndim = 0;
        read_pod(in, ndim, path);
        a.shape.resize(ndim);
        for (uint32_t d = 0; d < ndim; ++d) read_pod(in, a.shape[d], path);
        const int64_t n = shape_size(a.shape);
        if (n < 0 || n > (int64_t{1} << 32))
            throw IoError("corrupt tensor header at offset " + std::to_string(in.tellg()) + ": " +
                          path.string());
        a.data.resize(static_cast<size_t>(n));
        in.read(reinterpret_cast<char*>(a.data.data()),
                static_cast<std::streamsize>(a.data.size() * sizeof(double)));
        if (!in)
            throw IoError("truncated tensor data for '" + a.name + "' at offset " +
                          std::to_string(in.tellg()) + ": " + path.string());
        ckpt.arrays.push_back(std::move(a));
    }
    return ckpt;
}

} // namespace peerkd
