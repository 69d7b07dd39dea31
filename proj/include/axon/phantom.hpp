#pragma once
//
// Procedural thorax-like phantoms (body, two lungs, rib arcs) and paired
// dataset generation with rendered PA / LATERAL radiographs.
//

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "axon/preprocess.hpp"
#include "axon/projector.hpp"
#include "axon/voxcore.hpp"

namespace axon {

struct PhantomJitter {
    double body_position_mm = 0.0;
    double body_scale = 0.0;
    double lung_position_mm = 0.0;
    double lung_scale = 0.0;
    double rib_position_mm = 0.0;
};

struct PhantomSpec {
    Dims3 dims{16, 16, 16};
    Spacing3 spacing{20.0, 20.0, 20.0};
    Vec3 body_axes{140.0, 100.0, 150.0};
    Vec3 lung_axes_left{40.0, 50.0, 85.0};
    Vec3 lung_axes_right{40.0, 50.0, 85.0};
    double lung_offset_x_mm = 60.0;
    int rib_count = 4;
    double rib_radius_mm = 15.0;
    double hu_air = -1000.0;
    double hu_body = 40.0;
    double hu_lung = -850.0;
    double hu_bone = 700.0;
    PhantomJitter jitter{};
    std::uint64_t seed = 0;

    void validate() const {
        if (dims.count() == 0) throw ShapeError("phantom dims must be positive");
        for (double h : {hu_air, hu_body, hu_lung, hu_bone})
            if (h < -1000.0 || h > 3000.0) throw DomainError("phantom HU values must lie in [-1000, 3000]");
        if (rib_count < 0 || rib_radius_mm < 0) throw DomainError("rib parameters must be non-negative");
    }
};

/// Default toy spec with jitter large enough that the dataset mean is a blurred average.
inline PhantomSpec default_phantom_spec(std::size_t n = 16) {
    PhantomSpec s;
    s.dims = {n, n, n};
    const double sp = 320.0 / double(n);
    s.spacing = {sp, sp, sp};
    s.jitter = {25.0, 0.12, 15.0, 0.15, 12.0};
    return s;
}

namespace detail {

struct Ellipsoid {
    Vec3 centre;
    Vec3 axes;
    double value(const Vec3& p) const {
        const Vec3 d = p - centre;
        return (d.x / axes.x) * (d.x / axes.x) + (d.y / axes.y) * (d.y / axes.y) +
               (d.z / axes.z) * (d.z / axes.z);
    }
    bool contains(const Vec3& p) const { return value(p) <= 1.0; }
};

inline bool ellipsoid_inside(const Ellipsoid& inner, const Ellipsoid& outer) {
    constexpr int n_theta = 24, n_phi = 12;
    for (int i = 0; i <= n_phi; ++i) {
        const double phi = std::numbers::pi * double(i) / n_phi;
        for (int j = 0; j < n_theta; ++j) {
            const double th = 2.0 * std::numbers::pi * double(j) / n_theta;
            const Vec3 p = inner.centre + Vec3{inner.axes.x * std::sin(phi) * std::cos(th),
                                               inner.axes.y * std::sin(phi) * std::sin(th),
                                               inner.axes.z * std::cos(phi)};
            if (!outer.contains(p)) return false;
        }
    }
    return true;
}

} // namespace detail

/// Piecewise-constant phantom in HU, point-sampled at voxel centres.
inline Volume generate_phantom(const PhantomSpec& spec, SeededRng& rng) {
    spec.validate();
    const auto& j = spec.jitter;
    auto jit = [&](double mag) { return mag * (2.0 * rng.uniform() - 1.0); };

    Volume v(spec.dims, spec.spacing, spec.hu_air, Domain::HU);
    const Vec3 ext = v.extent();
    const Vec3 c = ext * 0.5;

    const double body_s = 1.0 + jit(j.body_scale);
    const detail::Ellipsoid body{
        c + Vec3{jit(j.body_position_mm), jit(j.body_position_mm), jit(j.body_position_mm)},
        spec.body_axes * body_s};

    auto make_lung = [&](double side, const Vec3& axes) {
        const double s = 1.0 + jit(j.lung_scale);
        return detail::Ellipsoid{
            body.centre + Vec3{side * spec.lung_offset_x_mm * body_s + jit(j.lung_position_mm),
                               jit(j.lung_position_mm), jit(j.lung_position_mm)},
            axes * (s * body_s)};
    };
    const detail::Ellipsoid lung_l = make_lung(-1.0, spec.lung_axes_left);
    const detail::Ellipsoid lung_r = make_lung(+1.0, spec.lung_axes_right);
    if (!detail::ellipsoid_inside(lung_l, body) || !detail::ellipsoid_inside(lung_r, body))
        throw DomainError("phantom lungs are not contained in the body");

    // Rib arcs: rods of radius rib_radius following 85% of the body cross-section,
    // open over the anterior (+y) 60 degrees.
    std::vector<double> rib_z(std::size_t(std::max(spec.rib_count, 0)));
    for (std::size_t k = 0; k < rib_z.size(); ++k) {
        const double f = rib_z.size() == 1 ? 0.0 : -0.6 + 1.2 * double(k) / double(rib_z.size() - 1);
        rib_z[k] = body.centre.z + f * body.axes.z + jit(j.rib_position_mm);
    }
    auto in_rib = [&](const Vec3& p) {
        const double dx = p.x - body.centre.x, dy = p.y - body.centre.y;
        const double theta = std::atan2(dy, dx);
        if (std::abs(theta - std::numbers::pi / 2) < std::numbers::pi / 6) return false;
        const double rho = std::hypot(dx, dy);
        for (double z0 : rib_z) {
            const double dz = (z0 - body.centre.z) / body.axes.z;
            if (std::abs(dz) >= 1.0) continue;
            const double section = std::sqrt(1.0 - dz * dz) * 0.85;
            const double a = body.axes.x * section, b = body.axes.y * section;
            const double r_e = a * b / std::hypot(b * std::cos(theta), a * std::sin(theta));
            const double dr = rho - r_e, dzz = p.z - z0;
            if (dr * dr + dzz * dzz <= spec.rib_radius_mm * spec.rib_radius_mm) return true;
        }
        return false;
    };

    for (std::size_t z = 0; z < spec.dims.z; ++z)
        for (std::size_t y = 0; y < spec.dims.y; ++y)
            for (std::size_t x = 0; x < spec.dims.x; ++x) {
                const Vec3 p{(double(x) + 0.5) * spec.spacing.x, (double(y) + 0.5) * spec.spacing.y,
                             (double(z) + 0.5) * spec.spacing.z};
                double hu = spec.hu_air;
                if (body.contains(p)) {
                    hu = spec.hu_body;
                    if (lung_l.contains(p) || lung_r.contains(p)) hu = spec.hu_lung;
                    if (in_rib(p)) hu = spec.hu_bone;
                }
                v.at(x, y, z) = hu;
            }
    return v;
}

inline Volume generate_phantom(const PhantomSpec& spec) {
    SeededRng rng(spec.seed);
    return generate_phantom(spec, rng);
}

// ---------------------------------------------------------------------------
// Dataset generation.

enum class Split { Train, Val, Test };

inline const char* to_string(Split s) {
    return s == Split::Train ? "train" : (s == Split::Val ? "val" : "test");
}

inline Split split_from_string(const std::string& s) {
    if (s == "train") return Split::Train;
    if (s == "val") return Split::Val;
    if (s == "test") return Split::Test;
    throw IoError(IoErrorKind::Format, "unknown split '" + s + "'");
}

inline std::uint64_t fnv1a64(const std::string& s) {
    std::uint64_t h = 0xcbf29ce484222325ull;
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001b3ull;
    }
    return h;
}

/// Deterministic split: ids ordered by (FNV-1a hash, id); the first round(0.8 n) are
/// train, the next round(0.1 n) val, the rest test.
inline std::vector<Split> hash_split(const std::vector<std::string>& ids) {
    std::vector<std::size_t> order(ids.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        const auto ha = fnv1a64(ids[a]), hb = fnv1a64(ids[b]);
        return ha != hb ? ha < hb : ids[a] < ids[b];
    });
    const auto n = double(ids.size());
    const auto n_train = std::size_t(std::lround(0.8 * n));
    const auto n_val = std::size_t(std::lround(0.1 * n));
    std::vector<Split> out(ids.size(), Split::Test);
    for (std::size_t r = 0; r < order.size(); ++r)
        out[order[r]] = r < n_train ? Split::Train : (r < n_train + n_val ? Split::Val : Split::Test);
    return out;
}

struct DatasetOptions {
    double sid_factor = 4.0;       // source-detector distance as a multiple of the largest extent
    std::size_t projection_px = 64; // rendered and standardized projection size (square)
    bool lateral = true;
};

struct ManifestRecord {
    std::string id;
    std::uint64_t seed = 0;
    std::string vvol_path;
    std::string pa_path;
    std::string lateral_path;
    Split split = Split::Train;
};

inline std::uint64_t sample_seed(std::uint64_t base, std::size_t index) {
    const auto w = SeededRng(base, 0x9e3779b97f4a7c15ull).block(index);
    return (std::uint64_t(w[0]) << 32) | w[1];
}

inline std::string sample_id(std::size_t index) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "ph%05zu", index);
    return buf;
}

inline CameraPair dataset_geometry(const Volume& v, const DatasetOptions& opt) {
    const Vec3 e = v.extent();
    const double sid = opt.sid_factor * std::max({e.x, e.y, e.z});
    return default_geometries(v, sid, opt.projection_px, opt.projection_px);
}

/// Rendered and min-max standardized projections for one phantom.
inline std::pair<Projection, Projection> render_pair(const Volume& hu, const DatasetOptions& opt) {
    const auto geo = dataset_geometry(hu, opt);
    const auto av = hu_to_attenuation(hu);
    Projection pa = standardize_projection(render_drr(av, geo.pa), opt.projection_px, opt.projection_px);
    Projection lat = standardize_projection(render_drr(av, geo.lateral), opt.projection_px, opt.projection_px);
    return {std::move(pa), std::move(lat)};
}

inline nlohmann::json to_json(const PhantomSpec& s) {
    return {{"dims", {s.dims.x, s.dims.y, s.dims.z}},
            {"spacing", {s.spacing.x, s.spacing.y, s.spacing.z}},
            {"body_axes", {s.body_axes.x, s.body_axes.y, s.body_axes.z}},
            {"lung_axes_left", {s.lung_axes_left.x, s.lung_axes_left.y, s.lung_axes_left.z}},
            {"lung_axes_right", {s.lung_axes_right.x, s.lung_axes_right.y, s.lung_axes_right.z}},
            {"lung_offset_x_mm", s.lung_offset_x_mm},
            {"rib_count", s.rib_count},
            {"rib_radius_mm", s.rib_radius_mm},
            {"hu", {s.hu_air, s.hu_body, s.hu_lung, s.hu_bone}},
            {"jitter",
             {s.jitter.body_position_mm, s.jitter.body_scale, s.jitter.lung_position_mm,
              s.jitter.lung_scale, s.jitter.rib_position_mm}},
            {"seed", s.seed}};
}

inline std::string manifest_line(const ManifestRecord& r) {
    nlohmann::json j{{"id", r.id},         {"seed", r.seed},
                     {"vvol_path", r.vvol_path}, {"pa_path", r.pa_path},
                     {"lateral_path", r.lateral_path}, {"split", to_string(r.split)}};
    return j.dump();
}

inline std::vector<ManifestRecord> read_manifest(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError(IoErrorKind::Open, "cannot open manifest " + path.string());
    std::vector<ManifestRecord> out;
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        try {
            const auto j = nlohmann::json::parse(line);
            out.push_back({j.at("id").get<std::string>(), j.at("seed").get<std::uint64_t>(),
                           j.at("vvol_path").get<std::string>(), j.at("pa_path").get<std::string>(),
                           j.value("lateral_path", std::string()),
                           split_from_string(j.at("split").get<std::string>())});
        } catch (const nlohmann::json::exception& e) {
            throw IoError(IoErrorKind::Format, std::string("bad manifest line: ") + e.what());
        }
    }
    return out;
}

/// Writes n phantoms (HU .vvol), their PA (and optionally LATERAL) DRRs as PGM16,
/// `manifest.jsonl` and `dataset.json` (spec + geometry + preprocessing parameters)
/// into out_dir. Paths in the manifest are relative to out_dir.
inline std::vector<ManifestRecord> generate_dataset(const PhantomSpec& spec, std::size_t n,
                                                    const std::filesystem::path& out_dir,
                                                    const DatasetOptions& opt = {}) {
    if (n < 1) throw DomainError("dataset needs n >= 1");
    std::error_code ec;
    std::filesystem::create_directories(out_dir, ec);
    if (ec || !std::filesystem::is_directory(out_dir))
        throw IoError(IoErrorKind::Open, "cannot create dataset directory " + out_dir.string());

    std::vector<std::string> ids;
    for (std::size_t i = 0; i < n; ++i) ids.push_back(sample_id(i));
    const auto splits = hash_split(ids);

    std::vector<ManifestRecord> records;
    std::string manifest;
    for (std::size_t i = 0; i < n; ++i) {
        ManifestRecord r;
        r.id = ids[i];
        r.seed = sample_seed(spec.seed, i);
        r.split = splits[i];
        PhantomSpec s = spec;
        s.seed = r.seed;
        const Volume hu = generate_phantom(s);
        const auto [pa, lat] = render_pair(hu, opt);
        r.vvol_path = r.id + ".vvol";
        r.pa_path = r.id + "_pa.pgm";
        save_vvol(hu, out_dir / r.vvol_path);
        save_pgm16(pa, out_dir / r.pa_path);
        if (opt.lateral) {
            r.lateral_path = r.id + "_lat.pgm";
            save_pgm16(lat, out_dir / r.lateral_path);
        }
        manifest += manifest_line(r) + "\n";
        records.push_back(std::move(r));
    }
    detail::write_file(out_dir / "manifest.jsonl", manifest);
    nlohmann::json meta{{"phantom", to_json(spec)},
                        {"count", n},
                        {"sid_factor", opt.sid_factor},
                        {"projection_px", opt.projection_px},
                        {"lateral", opt.lateral},
                        {"mu_water", kMuWater},
                        {"projection_standardization", "bilinear resize + min-max [0,1]"}};
    detail::write_file(out_dir / "dataset.json", meta.dump(2) + "\n");
    return records;
}

} // namespace axon
