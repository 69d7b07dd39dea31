#pragma once
// Independent reference computations: straightforward loops, no shared code with the library.

#include <cmath>
#include <cstddef>

#include "axon/projector.hpp"
#include "axon/voxcore.hpp"

namespace axon::oracle {

/// Midpoint-rule quadrature of mu along p0 -> p1 with n samples.
inline double dense_integral(const AttenuationVolume& av, const Vec3& p0, const Vec3& p1, std::size_t n) {
    const Vec3 d = p1 - p0;
    const auto& v = av.volume;
    double acc = 0;
    for (std::size_t k = 0; k < n; ++k) {
        const Vec3 p = p0 + d * ((double(k) + 0.5) / double(n));
        const double fx = (p.x - av.origin.x) / v.spacing().x, fy = (p.y - av.origin.y) / v.spacing().y,
                     fz = (p.z - av.origin.z) / v.spacing().z;
        if (fx < 0 || fy < 0 || fz < 0 || fx >= double(v.dims().x) || fy >= double(v.dims().y) ||
            fz >= double(v.dims().z))
            continue;
        acc += v.at(std::size_t(fx), std::size_t(fy), std::size_t(fz));
    }
    return acc * norm(d) / double(n);
}

inline double mae(const Volume& a, const Volume& b) {
    double s = 0;
    for (std::size_t z = 0; z < a.dims().z; ++z)
        for (std::size_t y = 0; y < a.dims().y; ++y)
            for (std::size_t x = 0; x < a.dims().x; ++x) s += std::abs(a.at(x, y, z) - b.at(x, y, z));
    return s / double(a.size());
}

inline double mse(const Volume& a, const Volume& b) {
    double s = 0;
    for (std::size_t z = 0; z < a.dims().z; ++z)
        for (std::size_t y = 0; y < a.dims().y; ++y)
            for (std::size_t x = 0; x < a.dims().x; ++x) {
                const double d = a.at(x, y, z) - b.at(x, y, z);
                s += d * d;
            }
    return s / double(a.size());
}

/// Mean over all valid w^3 windows of the per-window SSIM (uniform weights, population moments).
inline double ssim(const Volume& a, const Volume& b, std::size_t w = 7, double L = 1.0) {
    const double c1 = (0.01 * L) * (0.01 * L), c2 = (0.03 * L) * (0.03 * L);
    const auto& d = a.dims();
    double total = 0;
    std::size_t count = 0;
    const double n = double(w * w * w);
    for (std::size_t z0 = 0; z0 + w <= d.z; ++z0)
        for (std::size_t y0 = 0; y0 + w <= d.y; ++y0)
            for (std::size_t x0 = 0; x0 + w <= d.x; ++x0) {
                double ma = 0, mb = 0;
                for (std::size_t z = z0; z < z0 + w; ++z)
                    for (std::size_t y = y0; y < y0 + w; ++y)
                        for (std::size_t x = x0; x < x0 + w; ++x) {
                            ma += a.at(x, y, z);
                            mb += b.at(x, y, z);
                        }
                ma /= n;
                mb /= n;
                double va = 0, vb = 0, cov = 0;
                for (std::size_t z = z0; z < z0 + w; ++z)
                    for (std::size_t y = y0; y < y0 + w; ++y)
                        for (std::size_t x = x0; x < x0 + w; ++x) {
                            const double da = a.at(x, y, z) - ma, db = b.at(x, y, z) - mb;
                            va += da * da;
                            vb += db * db;
                            cov += da * db;
                        }
                va /= n;
                vb /= n;
                cov /= n;
                total += ((2 * ma * mb + c1) * (2 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
                ++count;
            }
    return total / double(count);
}

} // namespace axon::oracle
