#pragma once

// Model container file shared by the trainer, the calibrator and the
// quantizer. Layout:
//
//   bytes 0..7   magic "SNAPUQ1\0"
//   bytes 8..15  u64 little-endian manifest length N
//   N bytes      JSON manifest (UTF-8)
//   rest         tensor blobs, little-endian, at the offsets the manifest's
//                tensor directory records (relative to the blob section)
//
// Supported dtypes: f32, f64, i8, i32, u16. Readers reject unknown magic and
// unknown dtypes. Writers emit entries sorted by name so identical content
// yields identical bytes.

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "json.hpp"
#include "snapuq/error.hpp"
#include "snapuq/tensor.hpp"

namespace snapuq {

static_assert(std::endian::native == std::endian::little, "container format requires a little-endian host");

enum class blob_dtype { f32, f64, i8, i32, u16 };

inline const char* dtype_name(blob_dtype d) {
    switch (d) {
        case blob_dtype::f32: return "f32";
        case blob_dtype::f64: return "f64";
        case blob_dtype::i8: return "i8";
        case blob_dtype::i32: return "i32";
        case blob_dtype::u16: return "u16";
    }
    return "unknown";
}

inline blob_dtype dtype_from_name(const std::string& s) {
    if (s == "f32") return blob_dtype::f32;
    if (s == "f64") return blob_dtype::f64;
    if (s == "i8") return blob_dtype::i8;
    if (s == "i32") return blob_dtype::i32;
    if (s == "u16") return blob_dtype::u16;
    throw artifact_error("container: unknown dtype '" + s + "'");
}

inline std::size_t dtype_size(blob_dtype d) {
    switch (d) {
        case blob_dtype::f32: return 4;
        case blob_dtype::f64: return 8;
        case blob_dtype::i8: return 1;
        case blob_dtype::i32: return 4;
        case blob_dtype::u16: return 2;
    }
    return 0;
}

struct raw_tensor {
    blob_dtype dtype = blob_dtype::f32;
    std::vector<std::int64_t> shape;
    std::vector<std::uint8_t> bytes;

    std::int64_t numel() const { return tensor<float>::numel_of(shape); }
};

template <typename T>
blob_dtype dtype_of();
template <>
inline blob_dtype dtype_of<float>() { return blob_dtype::f32; }
template <>
inline blob_dtype dtype_of<double>() { return blob_dtype::f64; }
template <>
inline blob_dtype dtype_of<std::int8_t>() { return blob_dtype::i8; }
template <>
inline blob_dtype dtype_of<std::int32_t>() { return blob_dtype::i32; }
template <>
inline blob_dtype dtype_of<std::uint16_t>() { return blob_dtype::u16; }

template <typename T>
raw_tensor pack_tensor(const tensor<T>& t) {
    raw_tensor r;
    r.dtype = dtype_of<T>();
    r.shape = t.shape;
    r.bytes.resize(t.data.size() * sizeof(T));
    if (!t.data.empty()) std::memcpy(r.bytes.data(), t.data.data(), r.bytes.size());
    return r;
}

template <typename T>
tensor<T> unpack_tensor(const raw_tensor& r) {
    if (r.dtype != dtype_of<T>()) throw artifact_error("container: tensor dtype mismatch on unpack");
    tensor<T> t;
    t.shape = r.shape;
    t.data.resize(static_cast<std::size_t>(r.numel()));
    if (r.bytes.size() != t.data.size() * sizeof(T)) throw artifact_error("container: tensor byte size mismatch");
    if (!t.data.empty()) std::memcpy(t.data.data(), r.bytes.data(), r.bytes.size());
    return t;
}

struct container_file {
    nlohmann::json manifest;
    std::map<std::string, raw_tensor> tensors;
};

inline constexpr char container_magic[8] = {'S', 'N', 'A', 'P', 'U', 'Q', '1', '\0'};

inline void save_container(const std::string& path, const container_file& c) {
    nlohmann::json manifest = c.manifest;
    nlohmann::json dir = nlohmann::json::array();
    std::uint64_t offset = 0;
    for (const auto& [name, t] : c.tensors) {
        nlohmann::json e;
        e["name"] = name;
        e["shape"] = t.shape;
        e["dtype"] = dtype_name(t.dtype);
        e["offset"] = offset;
        e["bytes"] = t.bytes.size();
        dir.push_back(e);
        offset += t.bytes.size();
    }
    manifest["tensors"] = dir;
    const std::string mbytes = manifest.dump();

    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw artifact_error("container: cannot open for write: " + path);
    f.write(container_magic, 8);
    const std::uint64_t mlen = mbytes.size();
    f.write(reinterpret_cast<const char*>(&mlen), 8);
    f.write(mbytes.data(), static_cast<std::streamsize>(mbytes.size()));
    for (const auto& [name, t] : c.tensors) {
        (void)name;
        f.write(reinterpret_cast<const char*>(t.bytes.data()), static_cast<std::streamsize>(t.bytes.size()));
    }
    if (!f) throw artifact_error("container: write failed: " + path);
}

inline container_file load_container(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw artifact_error("container: cannot open: " + path);
    char magic[8];
    f.read(magic, 8);
    if (!f || std::memcmp(magic, container_magic, 8) != 0)
        throw artifact_error("container: bad magic in " + path);
    std::uint64_t mlen = 0;
    f.read(reinterpret_cast<char*>(&mlen), 8);
    if (!f || mlen == 0 || mlen > (1ull << 31)) throw artifact_error("container: bad manifest length");
    std::string mbytes(mlen, '\0');
    f.read(mbytes.data(), static_cast<std::streamsize>(mlen));
    if (!f) throw artifact_error("container: truncated manifest");

    container_file c;
    try {
        c.manifest = nlohmann::json::parse(mbytes);
    } catch (const nlohmann::json::exception& e) {
        throw artifact_error(std::string("container: manifest parse error: ") + e.what());
    }
    if (!c.manifest.contains("tensors") || !c.manifest["tensors"].is_array())
        throw artifact_error("container: manifest missing tensor directory");

    std::vector<std::uint8_t> blob((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    for (const auto& e : c.manifest["tensors"]) {
        raw_tensor t;
        const std::string name = e.at("name").get<std::string>();
        t.dtype = dtype_from_name(e.at("dtype").get<std::string>());
        t.shape = e.at("shape").get<std::vector<std::int64_t>>();
        const std::uint64_t off = e.at("offset").get<std::uint64_t>();
        const std::uint64_t nbytes = e.at("bytes").get<std::uint64_t>();
        if (off + nbytes > blob.size()) throw artifact_error("container: tensor '" + name + "' out of bounds");
        if (nbytes != static_cast<std::uint64_t>(t.numel()) * dtype_size(t.dtype))
            throw artifact_error("container: tensor '" + name + "' size inconsistent with shape");
        t.bytes.assign(blob.begin() + static_cast<std::ptrdiff_t>(off),
                       blob.begin() + static_cast<std::ptrdiff_t>(off + nbytes));
        c.tensors.emplace(name, std::move(t));
    }
    return c;
}

inline const raw_tensor& require_tensor(const container_file& c, const std::string& name) {
    auto it = c.tensors.find(name);
    if (it == c.tensors.end()) throw artifact_error("container: missing tensor '" + name + "'");
    return it->second;
}

}  // namespace snapuq
