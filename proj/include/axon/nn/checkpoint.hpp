#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "axon/error.hpp"
#include "axon/nn/layers.hpp"
#include "axon/voxcore.hpp"

namespace axon::nn {

// .vnet layout (little-endian):
//   "VNET" | u32 version=1 | u32 count |
//   count x { u16 name_len | name bytes | u8 rank | rank x u32 dim | prod(dims) x f32 }

inline constexpr std::uint32_t kVnetVersion = 1;

inline std::string encode_vnet(const ParamList& params) {
    std::string buf = "VNET";
    axon::detail::put<std::uint32_t>(buf, kVnetVersion);
    axon::detail::put<std::uint32_t>(buf, std::uint32_t(params.size()));
    for (const auto& [name, t] : params) {
        if (name.size() > 0xFFFF) throw IoError(IoErrorKind::Format, "parameter name too long: " + name);
        if (t.rank() > 0xFF) throw IoError(IoErrorKind::Format, "parameter rank too large: " + name);
        axon::detail::put<std::uint16_t>(buf, std::uint16_t(name.size()));
        buf.insert(buf.end(), name.begin(), name.end());
        axon::detail::put<std::uint8_t>(buf, std::uint8_t(t.rank()));
        for (auto e : t.shape()) axon::detail::put<std::uint32_t>(buf, std::uint32_t(e));
        for (double x : t.data()) axon::detail::put<float>(buf, float(x));
    }
    return buf;
}

inline ParamList decode_vnet(const std::string& buf) {
    if (buf.compare(0, 4, "VNET") != 0)
        throw IoError(IoErrorKind::BadMagic, "not a .vnet file");
    std::size_t pos = 4;
    const auto version = axon::detail::get<std::uint32_t>(buf, pos);
    if (version != kVnetVersion)
        throw IoError(IoErrorKind::UnknownVersion, "unsupported .vnet version " + std::to_string(version));
    const auto count = axon::detail::get<std::uint32_t>(buf, pos);
    ParamList out;
    for (std::uint32_t i = 0; i < count; ++i) {
        const auto len = axon::detail::get<std::uint16_t>(buf, pos);
        if (pos + len > buf.size()) throw IoError(IoErrorKind::Truncated, ".vnet truncated in name");
        std::string name(buf.data() + pos, len);
        pos += len;
        const auto rank = axon::detail::get<std::uint8_t>(buf, pos);
        Shape shape;
        for (std::uint8_t r = 0; r < rank; ++r) shape.push_back(axon::detail::get<std::uint32_t>(buf, pos));
        const std::size_t n = numel(shape);
        if (rank == 0 || n == 0) throw IoError(IoErrorKind::Format, "empty parameter '" + name + "'");
        if (pos + n * sizeof(float) > buf.size())
            throw IoError(IoErrorKind::Truncated, ".vnet truncated in '" + name + "'");
        std::vector<double> data(n);
        for (auto& x : data) x = axon::detail::get<float>(buf, pos);
        out.emplace_back(std::move(name), Tensor(std::move(shape), std::move(data)));
    }
    if (pos != buf.size()) throw IoError(IoErrorKind::Format, ".vnet has trailing bytes");
    return out;
}

inline void save_vnet(const ParamList& params, const std::filesystem::path& path) {
    axon::detail::write_file(path, encode_vnet(params));
}

inline ParamList load_vnet(const std::filesystem::path& path) { return decode_vnet(axon::detail::read_file(path)); }

/// Loads `params` into `m` by name; names and shapes must match exactly.
inline void load_into(const Module& m, const ParamList& params) {
    std::map<std::string, const Tensor*> by;
    for (auto& [n, t] : params) by[n] = &t;
    auto dst = m.parameters();
    if (dst.size() != params.size())
        throw IoError(IoErrorKind::Format, "checkpoint has " + std::to_string(params.size()) +
                                               " tensors, model expects " + std::to_string(dst.size()));
    for (auto& [name, t] : dst) {
        auto it = by.find(name);
        if (it == by.end()) throw IoError(IoErrorKind::Format, "checkpoint is missing '" + name + "'");
        if (it->second->shape() != t.shape())
            throw IoError(IoErrorKind::Format, "shape mismatch for '" + name + "': checkpoint " +
                                                   shape_str(it->second->shape()) + ", model " + shape_str(t.shape()));
        std::copy(it->second->data().begin(), it->second->data().end(), t.data().begin());
    }
}

inline void save_module(const Module& m, const std::filesystem::path& path) { save_vnet(m.parameters(), path); }
inline void load_module(const Module& m, const std::filesystem::path& path) { load_into(m, load_vnet(path)); }

} // namespace axon::nn
