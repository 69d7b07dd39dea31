#pragma once
//
// Mono-energetic cone-beam radiograph synthesis: HU -> linear attenuation,
// exact Siddon line integrals through piecewise-constant voxels, and
// Beer-Lambert detector intensities.
//

#include <algorithm>
#include <cmath>
#include <limits>
#include <optional>
#include <utility>
#include <vector>

#include "axon/voxcore.hpp"

namespace axon {

inline constexpr double kMuWater = 0.02; // mm^-1

struct AttenuationVolume {
    Volume volume;     // mm^-1
    Vec3 origin{};     // corner of voxel (0,0,0), mm
};

inline AttenuationVolume hu_to_attenuation(const Volume& v, Vec3 origin = {}) {
    if (v.domain() != Domain::HU) throw DomainError("hu_to_attenuation expects an HU volume");
    Volume mu = v;
    for (auto& x : mu.data()) x = std::max(0.0, kMuWater * (1.0 + x / 1000.0));
    return {std::move(mu), origin};
}

/// Integral of mu along the segment p0 -> p1 (Siddon's parametric traversal).
/// Exact for piecewise-constant voxels; returns 0 if the segment misses the grid.
inline double siddon_line_integral(const AttenuationVolume& av, const Vec3& p0, const Vec3& p1) {
    const Volume& vol = av.volume;
    const Vec3 d = p1 - p0;
    const double length = norm(d);
    if (!(length > 0) || !std::isfinite(length)) return 0.0;

    double a_lo = 0.0, a_hi = 1.0;
    for (int i = 0; i < 3; ++i) {
        const double lo = av.origin[i];
        const double hi = lo + double(vol.dims()[i]) * vol.spacing()[i];
        if (d[i] == 0.0) {
            if (p0[i] <= lo || p0[i] >= hi) return 0.0;
            continue;
        }
        const double t0 = (lo - p0[i]) / d[i], t1 = (hi - p0[i]) / d[i];
        a_lo = std::max(a_lo, std::min(t0, t1));
        a_hi = std::min(a_hi, std::max(t0, t1));
    }
    if (!(a_lo < a_hi)) return 0.0;

    // Parametric positions of every voxel-plane crossing inside (a_lo, a_hi).
    std::vector<double> alphas;
    alphas.reserve(vol.dims().x + vol.dims().y + vol.dims().z + 2);
    alphas.push_back(a_lo);
    for (int i = 0; i < 3; ++i) {
        if (d[i] == 0.0) continue;
        const std::size_t n = vol.dims()[i];
        for (std::size_t k = 0; k <= n; ++k) {
            const double plane = av.origin[i] + double(k) * vol.spacing()[i];
            const double a = (plane - p0[i]) / d[i];
            if (a > a_lo && a < a_hi) alphas.push_back(a);
        }
    }
    alphas.push_back(a_hi);
    std::sort(alphas.begin(), alphas.end());

    double sum = 0.0;
    for (std::size_t k = 0; k + 1 < alphas.size(); ++k) {
        const double seg = alphas[k + 1] - alphas[k];
        if (seg <= 0.0) continue;
        const double mid = 0.5 * (alphas[k] + alphas[k + 1]);
        std::size_t idx[3];
        for (int i = 0; i < 3; ++i) {
            const double pos = (p0[i] + mid * d[i] - av.origin[i]) / vol.spacing()[i];
            const auto n = double(vol.dims()[i]);
            idx[i] = std::size_t(std::clamp(std::floor(pos), 0.0, n - 1.0));
        }
        sum += vol.at(idx[0], idx[1], idx[2]) * seg;
    }
    return sum * length;
}

struct CameraGeometry {
    Vec3 source{};
    Vec3 detector_center{};
    Vec3 u_axis{1, 0, 0};
    Vec3 v_axis{0, 0, 1};
    double width_mm = 1.0;
    double height_mm = 1.0;
    std::size_t pixels_u = 1;
    std::size_t pixels_v = 1;
    View view = View::PA;

    void validate() const {
        if (std::abs(dot(u_axis, v_axis)) > 1e-9) throw DomainError("detector axes not orthogonal");
        if (std::abs(norm(u_axis) - 1.0) > 1e-9 || std::abs(norm(v_axis) - 1.0) > 1e-9)
            throw DomainError("detector axes must be unit vectors");
        if (!(width_mm > 0 && height_mm > 0) || pixels_u == 0 || pixels_v == 0)
            throw DomainError("detector size and pixel counts must be positive");
        const Vec3 n = cross(u_axis, v_axis);
        if (std::abs(dot(source - detector_center, n)) < 1e-9)
            throw DomainError("source lies on the detector plane");
    }

    Vec3 pixel_center(std::size_t iu, std::size_t iv) const {
        const double fu = (double(iu) + 0.5) / double(pixels_u) - 0.5;
        const double fv = (double(iv) + 0.5) / double(pixels_v) - 0.5;
        return detector_center + u_axis * (fu * width_mm) + v_axis * (fv * height_mm);
    }

    CameraGeometry translated(const Vec3& by) const {
        CameraGeometry g = *this;
        g.source = source + by;
        g.detector_center = detector_center + by;
        return g;
    }
};

struct DetectorNoise {
    double sigma = 0.0;
    SeededRng rng{};
};

/// Beer-Lambert intensities exp(-integral of mu) from the source to each pixel centre.
inline Projection render_drr(const AttenuationVolume& av, const CameraGeometry& cam,
                             std::optional<DetectorNoise> noise = std::nullopt) {
    cam.validate();
    Projection p(cam.pixels_u, cam.pixels_v, cam.width_mm / double(cam.pixels_u), cam.view);
    for (std::size_t iv = 0; iv < cam.pixels_v; ++iv)
        for (std::size_t iu = 0; iu < cam.pixels_u; ++iu)
            p.at(iu, iv) = std::exp(-siddon_line_integral(av, cam.source, cam.pixel_center(iu, iv)));
    if (noise && noise->sigma > 0) {
        std::vector<double> g(p.size());
        noise->rng.fill_normal(g);
        for (std::size_t i = 0; i < g.size(); ++i) p.data()[i] += noise->sigma * g[i];
    }
    return p;
}

struct CameraPair {
    CameraGeometry pa;
    CameraGeometry lateral;
};

/// PA (source on -y, detector on +y) and LATERAL (the PA rig rotated +90 deg about z)
/// for a volume whose voxel (0,0,0) corner sits at `origin`. The source is sid/2 in
/// front of the volume centre and the detector sid/2 behind it; the detector covers the
/// projected footprint of the volume with a 10% margin.
inline CameraPair default_geometries(const Volume& v, double sid_mm, std::size_t pixels_u,
                                     std::size_t pixels_v, Vec3 origin = {}) {
    const Vec3 ext = v.extent();
    if (!(sid_mm > norm(ext))) throw DomainError("source-detector distance must exceed the volume diagonal");
    const Vec3 c = origin + ext * 0.5;

    auto rotate_z90 = [](const Vec3& p) { return Vec3{-p.y, p.x, p.z}; };

    auto make = [&](bool lateral) {
        Vec3 src_off{0, -sid_mm / 2, 0}, det_off{0, sid_mm / 2, 0};
        Vec3 u{1, 0, 0}, w{0, 0, 1};
        if (lateral) {
            src_off = rotate_z90(src_off);
            det_off = rotate_z90(det_off);
            u = rotate_z90(u);
        }
        CameraGeometry g;
        g.source = c + src_off;
        g.detector_center = c + det_off;
        g.u_axis = u;
        g.v_axis = w;
        g.pixels_u = pixels_u;
        g.pixels_v = pixels_v;
        g.view = lateral ? View::Lateral : View::PA;

        const Vec3 n = cross(u, w);
        double max_u = 0, max_v = 0;
        for (int corner = 0; corner < 8; ++corner) {
            const Vec3 p{origin.x + ((corner & 1) ? ext.x : 0.0), origin.y + ((corner & 2) ? ext.y : 0.0),
                         origin.z + ((corner & 4) ? ext.z : 0.0)};
            const Vec3 ray = p - g.source;
            const double t = dot(g.detector_center - g.source, n) / dot(ray, n);
            const Vec3 hit = g.source + ray * t - g.detector_center;
            max_u = std::max(max_u, std::abs(dot(hit, u)));
            max_v = std::max(max_v, std::abs(dot(hit, w)));
        }
        g.width_mm = 2.0 * max_u * 1.1;
        g.height_mm = 2.0 * max_v * 1.1;
        return g;
    };
    return {make(false), make(true)};
}

} // namespace axon
