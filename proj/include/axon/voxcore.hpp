#pragma once
//
// Core volumetric and planar data model, the counter-based random number
// service, and the on-disk formats (.vvol volumes, 16-bit binary PGM).
//
// Layout convention: every grid is row-major with x fastest, i.e. the voxel
// (x, y, z) lives at x + nx * (y + ny * z).
//

#include <algorithm>
#include <array>
#include <bit>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <limits>
#include <numbers>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "axon/error.hpp"

namespace axon {

static_assert(std::endian::native == std::endian::little,
              "on-disk formats are written assuming a little-endian host");

struct Vec3 {
    double x = 0, y = 0, z = 0;

    constexpr Vec3 operator+(const Vec3& o) const { return {x + o.x, y + o.y, z + o.z}; }
    constexpr Vec3 operator-(const Vec3& o) const { return {x - o.x, y - o.y, z - o.z}; }
    constexpr Vec3 operator*(double s) const { return {x * s, y * s, z * s}; }
    constexpr double operator[](int i) const { return i == 0 ? x : (i == 1 ? y : z); }
    constexpr bool operator==(const Vec3&) const = default;
};

constexpr double dot(const Vec3& a, const Vec3& b) { return a.x * b.x + a.y * b.y + a.z * b.z; }
constexpr Vec3 cross(const Vec3& a, const Vec3& b) {
    return {a.y * b.z - a.z * b.y, a.z * b.x - a.x * b.z, a.x * b.y - a.y * b.x};
}
inline double norm(const Vec3& a) { return std::sqrt(dot(a, a)); }

struct Dims3 {
    std::size_t x = 0, y = 0, z = 0;

    constexpr std::size_t count() const { return x * y * z; }
    constexpr std::size_t operator[](int i) const { return i == 0 ? x : (i == 1 ? y : z); }
    constexpr bool operator==(const Dims3&) const = default;
};

struct Spacing3 {
    double x = 1, y = 1, z = 1;

    constexpr double operator[](int i) const { return i == 0 ? x : (i == 1 ? y : z); }
    constexpr bool operator==(const Spacing3&) const = default;
};

enum class Domain : std::uint8_t { HU = 0, NormalizedPM1 = 1, Normalized01 = 2 };

inline const char* to_string(Domain d) {
    switch (d) {
    case Domain::HU: return "HU";
    case Domain::NormalizedPM1: return "PM1";
    case Domain::Normalized01: return "ZERO_ONE";
    }
    return "?";
}

/// 3D scalar voxel grid with physical spacing (mm) and an intensity-domain tag.
class Volume {
public:
    Volume() = default;

    Volume(Dims3 dims, Spacing3 spacing, double fill = 0.0, Domain domain = Domain::HU)
        : dims_(dims), spacing_(spacing), domain_(domain) {
        validate(dims, spacing);
        data_.assign(dims.count(), fill);
    }

    Volume(Dims3 dims, Spacing3 spacing, std::vector<double> data, Domain domain)
        : dims_(dims), spacing_(spacing), data_(std::move(data)), domain_(domain) {
        validate(dims, spacing);
        if (data_.size() != dims.count())
            throw ShapeError("volume data length " + std::to_string(data_.size()) +
                             " does not match dims product " + std::to_string(dims.count()));
    }

    const Dims3& dims() const { return dims_; }
    const Spacing3& spacing() const { return spacing_; }
    Domain domain() const { return domain_; }
    void set_domain(Domain d) { domain_ = d; }
    void set_spacing(Spacing3 s) {
        validate(dims_, s);
        spacing_ = s;
    }

    std::size_t size() const { return data_.size(); }
    std::span<const double> data() const { return data_; }
    std::span<double> data() { return data_; }
    std::vector<double>& storage() { return data_; }

    std::size_t index(std::size_t x, std::size_t y, std::size_t z) const {
        return x + dims_.x * (y + dims_.y * z);
    }
    double& at(std::size_t x, std::size_t y, std::size_t z) { return data_[index(x, y, z)]; }
    double at(std::size_t x, std::size_t y, std::size_t z) const { return data_[index(x, y, z)]; }
    double& operator[](std::size_t i) { return data_[i]; }
    double operator[](std::size_t i) const { return data_[i]; }

    /// Physical extent along each axis: dims * spacing.
    Vec3 extent() const {
        return {double(dims_.x) * spacing_.x, double(dims_.y) * spacing_.y,
                double(dims_.z) * spacing_.z};
    }

    void fill(double v) { std::fill(data_.begin(), data_.end(), v); }

    /// Scan check of the value-range implied by the domain tag.
    bool domain_consistent() const {
        double lo = -std::numeric_limits<double>::infinity(), hi = -lo;
        if (domain_ == Domain::NormalizedPM1) lo = -1.0, hi = 1.0;
        if (domain_ == Domain::Normalized01) lo = 0.0, hi = 1.0;
        return std::all_of(data_.begin(), data_.end(),
                           [&](double v) { return v >= lo && v <= hi; });
    }

    bool operator==(const Volume&) const = default;

private:
    static void validate(const Dims3& d, const Spacing3& s) {
        if (d.x == 0 || d.y == 0 || d.z == 0)
            throw ShapeError("volume dims must be positive");
        if (!(s.x > 0 && s.y > 0 && s.z > 0))
            throw ShapeError("volume spacing must be strictly positive");
    }

    Dims3 dims_{};
    Spacing3 spacing_{};
    std::vector<double> data_;
    Domain domain_ = Domain::HU;
};

inline Volume volume_new(Dims3 dims, Spacing3 spacing, double fill) {
    return Volume(dims, spacing, fill, Domain::HU);
}

enum class View : std::uint8_t { PA = 0, Lateral = 1 };

inline const char* to_string(View v) { return v == View::PA ? "PA" : "LATERAL"; }

/// 2D scalar image. Row-major with u fastest; row index follows the detector v axis.
class Projection {
public:
    Projection() = default;

    Projection(std::size_t nu, std::size_t nv, double pixel_spacing, View view, double fill = 0.0)
        : nu_(nu), nv_(nv), pixel_spacing_(pixel_spacing), view_(view) {
        if (nu == 0 || nv == 0) throw ShapeError("projection dims must be positive");
        if (!(pixel_spacing > 0)) throw ShapeError("pixel spacing must be positive");
        data_.assign(nu * nv, fill);
    }

    Projection(std::size_t nu, std::size_t nv, double pixel_spacing, View view,
               std::vector<double> data)
        : Projection(nu, nv, pixel_spacing, view) {
        if (data.size() != nu * nv) throw ShapeError("projection data length mismatch");
        data_ = std::move(data);
    }

    std::size_t nu() const { return nu_; }
    std::size_t nv() const { return nv_; }
    double pixel_spacing() const { return pixel_spacing_; }
    View view() const { return view_; }
    void set_view(View v) { view_ = v; }

    std::size_t size() const { return data_.size(); }
    std::span<const double> data() const { return data_; }
    std::span<double> data() { return data_; }
    double& at(std::size_t u, std::size_t v) { return data_[u + nu_ * v]; }
    double at(std::size_t u, std::size_t v) const { return data_[u + nu_ * v]; }

    bool all_finite() const {
        return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
    }

    bool operator==(const Projection&) const = default;

private:
    std::size_t nu_ = 0, nv_ = 0;
    double pixel_spacing_ = 1.0;
    View view_ = View::PA;
    std::vector<double> data_;
};

// ---------------------------------------------------------------------------
// Counter-based random numbers (Philox4x32-10).

namespace detail {

inline std::array<std::uint32_t, 4> philox4x32_10(std::array<std::uint32_t, 4> ctr,
                                                  std::array<std::uint32_t, 2> key) {
    constexpr std::uint32_t M0 = 0xD2511F53u, M1 = 0xCD9E8D57u;
    constexpr std::uint32_t W0 = 0x9E3779B9u, W1 = 0xBB67AE85u;
    for (int round = 0; round < 10; ++round) {
        const std::uint64_t p0 = std::uint64_t(M0) * ctr[0];
        const std::uint64_t p1 = std::uint64_t(M1) * ctr[2];
        const auto hi0 = std::uint32_t(p0 >> 32), lo0 = std::uint32_t(p0);
        const auto hi1 = std::uint32_t(p1 >> 32), lo1 = std::uint32_t(p1);
        ctr = {hi1 ^ ctr[1] ^ key[0], lo1, hi0 ^ ctr[3] ^ key[1], lo0};
        key[0] += W0;
        key[1] += W1;
    }
    return ctr;
}

// 53-bit uniform in the open interval (0, 1).
inline double to_unit_open(std::uint32_t hi, std::uint32_t lo) {
    const std::uint64_t bits = ((std::uint64_t(hi) << 32) | lo) >> 11;
    return (double(bits) + 0.5) * 0x1.0p-53;
}

} // namespace detail

/// Deterministic random stream: (seed, stream_id, counter) -> value.
///
/// Each counter block yields four 32-bit words, i.e. two uniforms or two
/// standard normals (Box-Muller). Block k of a stream is addressable directly,
/// so bulk fills may be evaluated in any order.
class SeededRng {
public:
    SeededRng() = default;
    explicit SeededRng(std::uint64_t seed, std::uint64_t stream_id = 0)
        : seed_(seed), stream_(stream_id) {}

    std::uint64_t seed() const { return seed_; }
    std::uint64_t stream_id() const { return stream_; }
    std::uint64_t counter() const { return counter_; }

    /// Independent child stream derived from this one (does not advance this stream).
    SeededRng fork(std::uint64_t salt) const {
        const auto w = detail::philox4x32_10(
            {std::uint32_t(salt), std::uint32_t(salt >> 32), std::uint32_t(stream_),
             std::uint32_t(stream_ >> 32)},
            {std::uint32_t(seed_) ^ 0x5bd1e995u, std::uint32_t(seed_ >> 32)});
        return SeededRng(seed_, (std::uint64_t(w[0]) << 32) | w[1]);
    }

    std::array<std::uint32_t, 4> block(std::uint64_t k) const {
        return detail::philox4x32_10({std::uint32_t(k), std::uint32_t(k >> 32),
                                      std::uint32_t(stream_), std::uint32_t(stream_ >> 32)},
                                     {std::uint32_t(seed_), std::uint32_t(seed_ >> 32)});
    }

    /// The two standard normals carried by block k.
    std::pair<double, double> normal_pair(std::uint64_t k) const {
        const auto w = block(k);
        const double u1 = detail::to_unit_open(w[0], w[1]);
        const double u2 = detail::to_unit_open(w[2], w[3]);
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double a = 2.0 * std::numbers::pi * u2;
        return {r * std::cos(a), r * std::sin(a)};
    }

    std::uint64_t next_u64() {
        const auto w = block(counter_++);
        return (std::uint64_t(w[0]) << 32) | w[1];
    }

    double uniform() {
        const auto w = block(counter_++);
        return detail::to_unit_open(w[0], w[1]);
    }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    /// Uniform integer in [0, n).
    std::uint64_t below(std::uint64_t n) { return n == 0 ? 0 : next_u64() % n; }

    double normal() { return normal_pair(counter_++).first; }

    /// Fill `out` with standard normals, consuming ceil(n/2) blocks.
    void fill_normal(std::span<double> out) {
        const std::size_t blocks = (out.size() + 1) / 2;
        for (std::size_t b = 0; b < blocks; ++b) {
            const auto [g0, g1] = normal_pair(counter_ + b);
            out[2 * b] = g0;
            if (2 * b + 1 < out.size()) out[2 * b + 1] = g1;
        }
        counter_ += blocks;
    }

    bool operator==(const SeededRng&) const = default;

private:
    std::uint64_t seed_ = 0;
    std::uint64_t stream_ = 0;
    std::uint64_t counter_ = 0;
};

/// I.i.d. standard normal voxels. Values are unbounded, so the tag stays HU (untyped).
inline Volume gaussian_volume(SeededRng& rng, Dims3 dims, Spacing3 spacing = {}) {
    Volume v(dims, spacing, 0.0, Domain::HU);
    rng.fill_normal(v.data());
    return v;
}

// ---------------------------------------------------------------------------
// .vvol: "VVOL" | u32 version=1 | u32 dims[3] | f32 spacing[3] | u8 domain |
//        3 reserved bytes | f32 voxels (x fastest). Little-endian.

namespace detail {

template <class T>
void put(std::string& buf, T v) {
    char bytes[sizeof(T)];
    std::memcpy(bytes, &v, sizeof(T));
    buf.append(bytes, sizeof(T));
}

template <class T>
T get(const std::string& buf, std::size_t& pos) {
    if (pos + sizeof(T) > buf.size()) throw IoError(IoErrorKind::Truncated, "unexpected end of file");
    T v;
    std::memcpy(&v, buf.data() + pos, sizeof(T));
    pos += sizeof(T);
    return v;
}

inline std::string read_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError(IoErrorKind::Open, "cannot open " + path.string());
    return std::string(std::istreambuf_iterator<char>(in), {});
}

inline void write_file(const std::filesystem::path& path, const std::string& bytes) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError(IoErrorKind::Open, "cannot open " + path.string() + " for writing");
    out.write(bytes.data(), std::streamsize(bytes.size()));
    if (!out) throw IoError(IoErrorKind::Write, "failed writing " + path.string());
}

} // namespace detail

inline constexpr std::uint32_t kVvolVersion = 1;

inline std::string encode_vvol(const Volume& v) {
    std::string buf;
    buf.reserve(32 + 4 * v.size());
    buf.append("VVOL", 4);
    detail::put<std::uint32_t>(buf, kVvolVersion);
    for (int i = 0; i < 3; ++i) detail::put<std::uint32_t>(buf, std::uint32_t(v.dims()[i]));
    for (int i = 0; i < 3; ++i) detail::put<float>(buf, float(v.spacing()[i]));
    detail::put<std::uint8_t>(buf, std::uint8_t(v.domain()));
    buf.append(3, '\0');
    for (double x : v.data()) detail::put<float>(buf, float(x));
    return buf;
}

inline Volume decode_vvol(const std::string& buf) {
    if (buf.size() < 4) throw IoError(IoErrorKind::Truncated, "file shorter than magic");
    if (buf.compare(0, 4, "VVOL") != 0) throw IoError(IoErrorKind::BadMagic, "expected VVOL");
    std::size_t pos = 4;
    const auto version = detail::get<std::uint32_t>(buf, pos);
    if (version != kVvolVersion)
        throw IoError(IoErrorKind::UnknownVersion, "vvol version " + std::to_string(version));
    std::array<std::uint32_t, 3> d{};
    for (auto& x : d) x = detail::get<std::uint32_t>(buf, pos);
    std::array<float, 3> s{};
    for (auto& x : s) x = detail::get<float>(buf, pos);
    const auto tag = detail::get<std::uint8_t>(buf, pos);
    if (tag > 2) throw IoError(IoErrorKind::Format, "unknown domain tag " + std::to_string(tag));
    pos += 3;
    const Dims3 dims{d[0], d[1], d[2]};
    const std::size_t n = dims.count();
    if (pos > buf.size() || (buf.size() - pos) / 4 < n)
        throw IoError(IoErrorKind::Truncated, "payload shorter than dims product");
    std::vector<double> data(n);
    for (auto& x : data) x = detail::get<float>(buf, pos);
    try {
        return Volume(dims, Spacing3{s[0], s[1], s[2]}, std::move(data), Domain(tag));
    } catch (const ShapeError& e) {
        throw IoError(IoErrorKind::Format, e.what());
    }
}

inline void save_vvol(const Volume& v, const std::filesystem::path& path) {
    detail::write_file(path, encode_vvol(v));
}

inline Volume load_vvol(const std::filesystem::path& path) {
    return decode_vvol(detail::read_file(path));
}

// ---------------------------------------------------------------------------
// 16-bit binary PGM (P5, maxval 65535, big-endian samples), min-max scaled.

inline std::string encode_pgm16(std::span<const double> data, std::size_t width, std::size_t height) {
    if (data.size() != width * height) throw ShapeError("pgm data length mismatch");
    for (double v : data)
        if (!std::isfinite(v)) throw DomainError("cannot export non-finite value to PGM");
    const auto [mn, mx] = std::minmax_element(data.begin(), data.end());
    const double lo = *mn, range = *mx - *mn;
    std::string buf = "P5\n" + std::to_string(width) + " " + std::to_string(height) + "\n65535\n";
    buf.reserve(buf.size() + 2 * data.size());
    for (double v : data) {
        const auto q = range > 0 ? std::uint16_t(std::lround((v - lo) / range * 65535.0)) : 0;
        buf.push_back(char(q >> 8));
        buf.push_back(char(q & 0xff));
    }
    return buf;
}

inline void save_pgm16(const Projection& p, const std::filesystem::path& path) {
    detail::write_file(path, encode_pgm16(p.data(), p.nu(), p.nv()));
}

/// Reads a P5 16-bit PGM back as raw integer samples (0..65535) in a Projection.
inline Projection load_pgm16(const std::filesystem::path& path, View view = View::PA) {
    const std::string buf = detail::read_file(path);
    std::size_t pos = 0;
    auto token = [&]() {
        while (pos < buf.size() && std::isspace(static_cast<unsigned char>(buf[pos]))) ++pos;
        const std::size_t start = pos;
        while (pos < buf.size() && !std::isspace(static_cast<unsigned char>(buf[pos]))) ++pos;
        return buf.substr(start, pos - start);
    };
    if (token() != "P5") throw IoError(IoErrorKind::BadMagic, "expected P5");
    std::size_t w = 0, h = 0, maxval = 0;
    try {
        w = std::stoul(token());
        h = std::stoul(token());
        maxval = std::stoul(token());
    } catch (const std::exception&) {
        throw IoError(IoErrorKind::Format, "malformed PGM header");
    }
    if (maxval != 65535) throw IoError(IoErrorKind::Format, "only 16-bit PGM supported");
    ++pos;
    if (buf.size() < pos + 2 * w * h) throw IoError(IoErrorKind::Truncated, "PGM payload short");
    std::vector<double> data(w * h);
    for (std::size_t i = 0; i < data.size(); ++i) {
        const auto hi = static_cast<unsigned char>(buf[pos + 2 * i]);
        const auto lo = static_cast<unsigned char>(buf[pos + 2 * i + 1]);
        data[i] = double((hi << 8) | lo);
    }
    return Projection(w, h, 1.0, view, std::move(data));
}

} // namespace axon
