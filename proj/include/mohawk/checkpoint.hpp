#pragma once

#include <bit>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "mohawk/tensor.hpp"

namespace mohawk::io {

static_assert(std::endian::native == std::endian::little,
              "container format is little-endian; big-endian hosts unsupported");

// Binary tensor container:
//   magic "MHWK", format version u32, array count u32, then per array:
//   name length u32, UTF-8 name, rank u32, dims u64 each, payload f64 (LE).
// Round-trips bitwise, including non-canonical doubles.
constexpr u32 kContainerVersion = 1;

struct NamedTensor {
    std::string name;
    Tensor tensor;
};

namespace detail {

template <typename T>
void write_pod(std::ostream& os, const T& v) {
    os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_pod(std::istream& is, const std::string& what) {
    T v;
    is.read(reinterpret_cast<char*>(&v), sizeof(T));
    if (!is) throw IoError("container: truncated while reading " + what);
    return v;
}

}  // namespace detail

inline void write_container(const std::string& path, const std::vector<NamedTensor>& arrays) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw IoError("container: cannot open for writing: " + path);
    os.write("MHWK", 4);
    detail::write_pod(os, kContainerVersion);
    detail::write_pod(os, static_cast<u32>(arrays.size()));
    for (const NamedTensor& a : arrays) {
        detail::write_pod(os, static_cast<u32>(a.name.size()));
        os.write(a.name.data(), static_cast<std::streamsize>(a.name.size()));
        detail::write_pod(os, static_cast<u32>(a.tensor.rank()));
        for (i64 d : a.tensor.shape) detail::write_pod(os, static_cast<u64>(d));
        os.write(reinterpret_cast<const char*>(a.tensor.ptr()),
                 static_cast<std::streamsize>(a.tensor.size() * 8));
    }
    if (!os) throw IoError("container: write failed: " + path);
}

inline std::vector<NamedTensor> read_container(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("container: cannot open: " + path);
    char magic[4];
    is.read(magic, 4);
    if (!is || std::memcmp(magic, "MHWK", 4) != 0)
        throw IoError("container: bad magic in " + path);
    u32 version = detail::read_pod<u32>(is, "version");
    if (version != kContainerVersion)
        throw IoError("container: unsupported format version " + std::to_string(version));
    u32 count = detail::read_pod<u32>(is, "count");
    std::vector<NamedTensor> out;
    out.reserve(count);
    for (u32 i = 0; i < count; ++i) {
        u32 name_len = detail::read_pod<u32>(is, "name length");
        std::string name(name_len, '\0');
        is.read(name.data(), name_len);
        if (!is) throw IoError("container: truncated name");
        u32 rank = detail::read_pod<u32>(is, "rank");
        check_input(rank <= 4, "container: rank > 4 unsupported");
        std::vector<i64> shape;
        i64 numel = 1;
        for (u32 r = 0; r < rank; ++r) {
            u64 d = detail::read_pod<u64>(is, "dim");
            shape.push_back(static_cast<i64>(d));
            numel *= static_cast<i64>(d);
        }
        Tensor t(shape);
        is.read(reinterpret_cast<char*>(t.ptr()), static_cast<std::streamsize>(numel * 8));
        if (!is) throw IoError("container: truncated payload for " + name);
        out.push_back({std::move(name), std::move(t)});
    }
    return out;
}

inline const Tensor* find_array(const std::vector<NamedTensor>& arrays, const std::string& name) {
    for (const NamedTensor& a : arrays)
        if (a.name == name) return &a.tensor;
    return nullptr;
}

inline const Tensor& require_array(const std::vector<NamedTensor>& arrays,
                                   const std::string& name) {
    const Tensor* t = find_array(arrays, name);
    if (!t) throw IoError("container: missing array '" + name + "'");
    return *t;
}

// Stashing integers/raw bits inside f64 payloads: values are written and read
// via bit copy, never arithmetic, so the round-trip is exact.
inline double bits_to_double(u64 bits) { return std::bit_cast<double>(bits); }
inline u64 double_to_bits(double v) { return std::bit_cast<u64>(v); }

}  // namespace mohawk::io
