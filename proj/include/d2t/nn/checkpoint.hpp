#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <type_traits>

#include "d2t/nn/tensor.hpp"

namespace d2t::nn {

// Binary checkpoint container. Layout, all integers and values little-endian:
//   magic "D2T.NTS\0" | u32 version=1 | u64 tensor count
//   per tensor: u32 name length | name bytes | u32 rank | i64 dims[rank]
//               | u8 dtype (1=f32, 2=f64) | raw values
// Round trips are bit exact for matching scalar types.

namespace io {

struct IoError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

inline constexpr char kStoreMagic[8] = {'D', '2', 'T', '.', 'N', 'T', 'S', '\0'};
inline constexpr std::uint32_t kStoreVersion = 1;

template <class T>
void write_le(std::ostream& os, T v) {
    static_assert(std::is_trivially_copyable_v<T>);
    unsigned char buf[sizeof(T)];
    std::memcpy(buf, &v, sizeof(T));
    if constexpr (std::endian::native == std::endian::big)
        for (size_t i = 0; i < sizeof(T) / 2; ++i) std::swap(buf[i], buf[sizeof(T) - 1 - i]);
    os.write(reinterpret_cast<const char*>(buf), sizeof(T));
}

template <class T>
T read_le(std::istream& is) {
    unsigned char buf[sizeof(T)];
    is.read(reinterpret_cast<char*>(buf), sizeof(T));
    if (!is) throw IoError("unexpected end of file");
    if constexpr (std::endian::native == std::endian::big)
        for (size_t i = 0; i < sizeof(T) / 2; ++i) std::swap(buf[i], buf[sizeof(T) - 1 - i]);
    T v;
    std::memcpy(&v, buf, sizeof(T));
    return v;
}

inline void write_string(std::ostream& os, const std::string& s) {
    write_le<std::uint32_t>(os, static_cast<std::uint32_t>(s.size()));
    os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

inline std::string read_string(std::istream& is) {
    const auto n = read_le<std::uint32_t>(is);
    std::string s(n, '\0');
    is.read(s.data(), n);
    if (!is) throw IoError("unexpected end of file in string");
    return s;
}

}  // namespace io

template <class S>
constexpr std::uint8_t dtype_tag() {
    if constexpr (std::is_same_v<S, float>)
        return 1;
    else if constexpr (std::is_same_v<S, double>)
        return 2;
    else
        static_assert(sizeof(S) == 0, "unsupported scalar type");
}

template <class S>
void save_store(const ParamStore<S>& ps, const std::filesystem::path& path) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw io::IoError("cannot open for writing: " + path.string());
    os.write(io::kStoreMagic, 8);
    io::write_le<std::uint32_t>(os, io::kStoreVersion);
    io::write_le<std::uint64_t>(os, static_cast<std::uint64_t>(ps.count()));
    for (Index i = 0; i < ps.count(); ++i) {
        const Tensor<S>& t = ps.at(i);
        io::write_string(os, ps.name(i));
        io::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(t.shape.size()));
        for (Index d : t.shape) io::write_le<std::int64_t>(os, static_cast<std::int64_t>(d));
        io::write_le<std::uint8_t>(os, dtype_tag<S>());
        for (Index j = 0; j < t.size(); ++j) io::write_le<S>(os, t.v[j]);
    }
    if (!os) throw io::IoError("write failed: " + path.string());
}

// Loads into an empty store, or verifies names and shapes against an already
// populated one (so architectures are checked before weights are replaced).
template <class S>
void load_store(ParamStore<S>& ps, const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw io::IoError("cannot open for reading: " + path.string());
    char magic[8];
    is.read(magic, 8);
    if (!is || std::memcmp(magic, io::kStoreMagic, 8) != 0)
        throw io::IoError("bad magic in " + path.string());
    const auto version = io::read_le<std::uint32_t>(is);
    if (version != io::kStoreVersion)
        throw io::IoError("unsupported store version " + std::to_string(version));
    const auto count = io::read_le<std::uint64_t>(is);
    const bool fresh = ps.count() == 0;
    if (!fresh && static_cast<Index>(count) != ps.count())
        throw io::IoError("store has " + std::to_string(count) + " tensors, model expects " +
                          std::to_string(ps.count()));
    for (std::uint64_t i = 0; i < count; ++i) {
        const std::string name = io::read_string(is);
        const auto rank = io::read_le<std::uint32_t>(is);
        Shape shape(rank);
        for (auto& d : shape) d = static_cast<Index>(io::read_le<std::int64_t>(is));
        const auto tag = io::read_le<std::uint8_t>(is);
        if (tag != dtype_tag<S>())
            throw io::IoError("dtype mismatch for tensor " + name);
        if (fresh) {
            Tensor<S> t = Tensor<S>::zeros(shape);
            for (Index j = 0; j < t.size(); ++j) t.v[j] = io::read_le<S>(is);
            ps.add(name, std::move(t));
        } else {
            if (!ps.contains(name))
                throw io::IoError("store tensor " + name + " not present in model");
            Tensor<S>& t = ps[name];
            if (t.shape != shape)
                throw io::IoError("shape mismatch for " + name + ": store " + shape_str(shape) +
                                  " vs model " + shape_str(t.shape));
            for (Index j = 0; j < t.size(); ++j) t.v[j] = io::read_le<S>(is);
        }
    }
}

}  // namespace d2t::nn
