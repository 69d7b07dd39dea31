#pragma once
//
// Volume and radiograph preprocessing: isotropic resampling, fixed-grid
// rescaling, HU windowing and normalization, projection standardization, and
// translation-only registration of a radiograph to a DRR reference.
//

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <tuple>

#include "axon/voxcore.hpp"

namespace axon {

namespace detail {

// Continuous index into an input axis of n voxels for output voxel j, with voxel
// centres at (i + 0.5) * spacing. Clamped to the valid sample range.
inline double centre_map(std::size_t j, double out_spacing, double in_spacing, std::size_t n) {
    const double pos = (double(j) + 0.5) * out_spacing / in_spacing - 0.5;
    return std::clamp(pos, 0.0, double(n - 1));
}

inline std::pair<std::size_t, double> split(double pos, std::size_t n) {
    auto i0 = std::size_t(std::floor(pos));
    if (i0 >= n - 1) return {n > 1 ? n - 2 : 0, n > 1 ? 1.0 : 0.0};
    return {i0, pos - double(i0)};
}

inline double trilinear(const Volume& v, double px, double py, double pz) {
    const auto& d = v.dims();
    const auto [x0, fx] = split(px, d.x);
    const auto [y0, fy] = split(py, d.y);
    const auto [z0, fz] = split(pz, d.z);
    const std::size_t x1 = std::min(x0 + 1, d.x - 1), y1 = std::min(y0 + 1, d.y - 1),
                      z1 = std::min(z0 + 1, d.z - 1);
    const double c00 = v.at(x0, y0, z0) * (1 - fx) + v.at(x1, y0, z0) * fx;
    const double c10 = v.at(x0, y1, z0) * (1 - fx) + v.at(x1, y1, z0) * fx;
    const double c01 = v.at(x0, y0, z1) * (1 - fx) + v.at(x1, y0, z1) * fx;
    const double c11 = v.at(x0, y1, z1) * (1 - fx) + v.at(x1, y1, z1) * fx;
    const double c0 = c00 * (1 - fy) + c10 * fy;
    const double c1 = c01 * (1 - fy) + c11 * fy;
    return c0 * (1 - fz) + c1 * fz;
}

inline Volume resample_to(const Volume& v, Dims3 out_dims, Spacing3 out_spacing) {
    Volume out(out_dims, out_spacing, 0.0, v.domain());
    const auto& d = v.dims();
    const auto& s = v.spacing();
    for (std::size_t z = 0; z < out_dims.z; ++z) {
        const double pz = centre_map(z, out_spacing.z, s.z, d.z);
        for (std::size_t y = 0; y < out_dims.y; ++y) {
            const double py = centre_map(y, out_spacing.y, s.y, d.y);
            for (std::size_t x = 0; x < out_dims.x; ++x)
                out.at(x, y, z) = trilinear(v, centre_map(x, out_spacing.x, s.x, d.x), py, pz);
        }
    }
    return out;
}

} // namespace detail

/// Trilinear resampling to a new voxel spacing; dims = round(dims * spacing / target).
inline Volume resample_volume(const Volume& v, Spacing3 target) {
    if (!(target.x > 0 && target.y > 0 && target.z > 0))
        throw DomainError("target spacing must be positive");
    auto n = [&](int i) {
        return std::max<std::size_t>(1, std::size_t(std::lround(double(v.dims()[i]) * v.spacing()[i] / target[i])));
    };
    return detail::resample_to(v, Dims3{n(0), n(1), n(2)}, target);
}

/// Trilinear resize to fixed dims; spacing is updated so the physical extent is unchanged.
inline Volume rescale_to_grid(const Volume& v, Dims3 target) {
    if (target.x == 0 || target.y == 0 || target.z == 0) throw ShapeError("target dims must be positive");
    const Vec3 ext = v.extent();
    const Spacing3 sp{ext.x / double(target.x), ext.y / double(target.y), ext.z / double(target.z)};
    if (target == v.dims()) {
        Volume out = v;
        out.set_spacing(sp);
        return out;
    }
    return detail::resample_to(v, target, sp);
}

struct WindowSpec {
    double lo = -100.0;
    double hi = 900.0;
};

enum class NormTarget { PM1, ZeroOne };

/// Clamp to [lo, hi], then map affinely onto [-1, 1] or [0, 1].
inline Volume window_and_normalize(const Volume& v, WindowSpec w, NormTarget target) {
    if (v.domain() != Domain::HU) throw DomainError("window_and_normalize expects an HU volume");
    if (!(w.lo < w.hi)) throw DomainError("window needs lo < hi");
    Volume out = v;
    const double span = w.hi - w.lo;
    for (auto& x : out.data()) {
        const double u = (std::clamp(x, w.lo, w.hi) - w.lo) / span;
        x = target == NormTarget::PM1 ? 2.0 * u - 1.0 : u;
    }
    out.set_domain(target == NormTarget::PM1 ? Domain::NormalizedPM1 : Domain::Normalized01);
    return out;
}

/// Inverse of the PM1 normalization (values inside the window only).
inline Volume denormalize_pm1(const Volume& v, WindowSpec w) {
    Volume out = v;
    for (auto& x : out.data()) x = w.lo + (std::clamp(x, -1.0, 1.0) + 1.0) * 0.5 * (w.hi - w.lo);
    out.set_domain(Domain::HU);
    return out;
}

/// Min-max normalization to [0, 1]; a constant image maps to all zeros.
inline void normalize_min_max(Projection& p) {
    const auto [mn, mx] = std::minmax_element(p.data().begin(), p.data().end());
    const double lo = *mn, range = *mx - *mn;
    for (auto& x : p.data()) x = range > 0 ? (x - lo) / range : 0.0;
}

/// Bilinear resize (corner-aligned: corner pixels map onto corner pixels).
inline Projection resize_bilinear(const Projection& p, std::size_t nu, std::size_t nv) {
    if (nu == 0 || nv == 0) throw ShapeError("target projection dims must be positive");
    const double scale = double(std::max(p.nu(), p.nv())) / double(std::max(nu, nv));
    Projection out(nu, nv, p.pixel_spacing() * scale, p.view());
    auto map = [](std::size_t j, std::size_t n_out, std::size_t n_in) {
        return n_out > 1 ? double(j) * double(n_in - 1) / double(n_out - 1) : 0.5 * double(n_in - 1);
    };
    for (std::size_t v = 0; v < nv; ++v) {
        const auto [v0, fv] = detail::split(map(v, nv, p.nv()), p.nv());
        const std::size_t v1 = std::min(v0 + 1, p.nv() - 1);
        for (std::size_t u = 0; u < nu; ++u) {
            const auto [u0, fu] = detail::split(map(u, nu, p.nu()), p.nu());
            const std::size_t u1 = std::min(u0 + 1, p.nu() - 1);
            const double a = p.at(u0, v0) * (1 - fu) + p.at(u1, v0) * fu;
            const double b = p.at(u0, v1) * (1 - fu) + p.at(u1, v1) * fu;
            out.at(u, v) = a * (1 - fv) + b * fv;
        }
    }
    return out;
}

/// Bilinear resize to n_u x n_v followed by min-max normalization to [0, 1].
inline Projection standardize_projection(const Projection& p, std::size_t nu, std::size_t nv) {
    Projection out = (nu == p.nu() && nv == p.nv()) ? p : resize_bilinear(p, nu, nv);
    normalize_min_max(out);
    return out;
}

/// Centre crop to nu x nv pixels (requires the image to be at least that large).
inline Projection center_crop(const Projection& p, std::size_t nu, std::size_t nv) {
    if (nu == 0 || nv == 0 || nu > p.nu() || nv > p.nv()) throw ShapeError("crop larger than image");
    Projection out(nu, nv, p.pixel_spacing(), p.view());
    const std::size_t ou = (p.nu() - nu) / 2, ov = (p.nv() - nv) / 2;
    for (std::size_t v = 0; v < nv; ++v)
        for (std::size_t u = 0; u < nu; ++u) out.at(u, v) = p.at(u + ou, v + ov);
    return out;
}

struct RigidShift2D {
    double dx = 0.0;
    double dy = 0.0;
    double score = 0.0;
};

/// Bilinear translation: out(u, v) = p(u - dx, v - dy); samples outside the image are 0.
inline Projection apply_shift(const Projection& p, const RigidShift2D& s) {
    Projection out(p.nu(), p.nv(), p.pixel_spacing(), p.view());
    const auto nu = double(p.nu()), nv = double(p.nv());
    auto sample = [&](double u, double v) -> double {
        if (u < 0 || v < 0 || u > nu - 1 || v > nv - 1) return 0.0;
        return p.at(std::size_t(u), std::size_t(v));
    };
    for (std::size_t v = 0; v < p.nv(); ++v)
        for (std::size_t u = 0; u < p.nu(); ++u) {
            const double su = double(u) - s.dx, sv = double(v) - s.dy;
            const double fu0 = std::floor(su), fv0 = std::floor(sv);
            const double fu = su - fu0, fv = sv - fv0;
            double acc = 0.0;
            if (fu == 0.0 && fv == 0.0) {
                acc = sample(fu0, fv0);
            } else {
                acc = sample(fu0, fv0) * (1 - fu) * (1 - fv) + sample(fu0 + 1, fv0) * fu * (1 - fv) +
                      sample(fu0, fv0 + 1) * (1 - fu) * fv + sample(fu0 + 1, fv0 + 1) * fu * fv;
            }
            out.at(u, v) = acc;
        }
    return out;
}

/// Normalized cross-correlation between reference(u, v) and moving(u - dx, v - dy)
/// over their overlap. Zero-variance overlap scores 0.
inline double ncc_at_shift(const Projection& moving, const Projection& reference, long dx, long dy) {
    const long nu = long(reference.nu()), nv = long(reference.nv());
    const long u_lo = std::max(0L, dx), u_hi = std::min(nu, nu + dx);
    const long v_lo = std::max(0L, dy), v_hi = std::min(nv, nv + dy);
    if (u_lo >= u_hi || v_lo >= v_hi) return 0.0;
    double sa = 0, sb = 0;
    const double n = double((u_hi - u_lo) * (v_hi - v_lo));
    for (long v = v_lo; v < v_hi; ++v)
        for (long u = u_lo; u < u_hi; ++u) {
            sa += reference.at(std::size_t(u), std::size_t(v));
            sb += moving.at(std::size_t(u - dx), std::size_t(v - dy));
        }
    const double ma = sa / n, mb = sb / n;
    double sab = 0, saa = 0, sbb = 0;
    for (long v = v_lo; v < v_hi; ++v)
        for (long u = u_lo; u < u_hi; ++u) {
            const double a = reference.at(std::size_t(u), std::size_t(v)) - ma;
            const double b = moving.at(std::size_t(u - dx), std::size_t(v - dy)) - mb;
            sab += a * b;
            saa += a * a;
            sbb += b * b;
        }
    const double den = std::sqrt(saa * sbb);
    if (!(den > 1e-300)) return 0.0;
    return std::clamp(sab / den, -1.0, 1.0);
}

/// Shift that, applied to `moving` with apply_shift, best aligns it to `reference`.
/// Exhaustive integer search over [-radius, radius]^2 maximizing NCC, then a
/// per-axis parabolic sub-pixel refinement around the peak.
inline RigidShift2D register_to_reference(const Projection& moving, const Projection& reference,
                                          int search_radius) {
    if (moving.nu() != reference.nu() || moving.nv() != reference.nv())
        throw ShapeError("registration inputs must have equal dims");
    if (search_radius < 1) throw DomainError("search radius must be >= 1");
    const int r = search_radius, side = 2 * r + 1;
    std::vector<double> scores(std::size_t(side * side));
    auto at = [&](int dx, int dy) -> double& { return scores[std::size_t((dy + r) * side + (dx + r))]; };

    int best_dx = 0, best_dy = 0;
    double best = -std::numeric_limits<double>::infinity();
    auto better_tie = [](int dx, int dy, int bx, int by) {
        const int l1 = std::abs(dx) + std::abs(dy), bl1 = std::abs(bx) + std::abs(by);
        return std::tie(l1, dx, dy) < std::tie(bl1, bx, by);
    };
    for (int dy = -r; dy <= r; ++dy)
        for (int dx = -r; dx <= r; ++dx) {
            const double s = ncc_at_shift(moving, reference, dx, dy);
            at(dx, dy) = s;
            if (s > best + 1e-12 || (std::abs(s - best) <= 1e-12 && better_tie(dx, dy, best_dx, best_dy))) {
                best = std::max(best, s);
                best_dx = dx;
                best_dy = dy;
            }
        }

    auto refine = [](double sm, double s0, double sp) {
        const double den = sm - 2.0 * s0 + sp;
        if (!(den < 0)) return 0.0;
        return std::clamp(0.5 * (sm - sp) / den, -0.5, 0.5);
    };
    RigidShift2D out{double(best_dx), double(best_dy), at(best_dx, best_dy)};
    if (best_dx > -r && best_dx < r)
        out.dx += refine(at(best_dx - 1, best_dy), at(best_dx, best_dy), at(best_dx + 1, best_dy));
    if (best_dy > -r && best_dy < r)
        out.dy += refine(at(best_dx, best_dy - 1), at(best_dx, best_dy), at(best_dx, best_dy + 1));
    return out;
}

} // namespace axon
