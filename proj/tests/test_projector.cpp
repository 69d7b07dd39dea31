#include <gtest/gtest.h>

#include <cmath>

#include "axon/phantom.hpp"
#include "axon/projector.hpp"
#include "oracles.hpp"
#include "support.hpp"

using namespace axon;

namespace {

using oracle::dense_integral;

AttenuationVolume uniform_cube(double mu, double side_mm, std::size_t n) {
    const double s = side_mm / double(n);
    return {Volume({n, n, n}, {s, s, s}, mu, Domain::HU), {0, 0, 0}};
}

} // namespace

TEST(Attenuation, HuMapping) {
    Volume v({3, 1, 1}, {1, 1, 1}, std::vector<double>{-1000, 0, 1000}, Domain::HU);
    const auto av = hu_to_attenuation(v);
    EXPECT_DOUBLE_EQ(av.volume[0], 0.0);
    EXPECT_DOUBLE_EQ(av.volume[1], 0.02);
    EXPECT_DOUBLE_EQ(av.volume[2], 0.04);
    v.set_domain(Domain::NormalizedPM1);
    EXPECT_THROW(hu_to_attenuation(v), DomainError);
}

TEST(Siddon, UniformCubeAnalytic) {
    const auto av = uniform_cube(0.1, 100, 10);
    EXPECT_NEAR(siddon_line_integral(av, {50, -20, 50}, {50, 130, 50}), 10.0, 1e-9);
    EXPECT_NEAR(siddon_line_integral(av, {0, 0, 0}, {100, 100, 100}), 0.1 * 100 * std::sqrt(3.0), 1e-9);
    EXPECT_EQ(siddon_line_integral(av, {-10, -10, 150}, {110, 110, 150}), 0.0);
}

TEST(Siddon, MatchesDenseQuadrature) {
    SeededRng rng(11);
    for (int c = 0; c < 20; ++c) {
        Volume mu({8, 8, 8}, {2, 3, 2.5}, 0.0, Domain::HU);
        for (auto& x : mu.data()) x = rng.uniform(0.5, 1.5);
        const AttenuationVolume av{mu, {rng.uniform(-3, 3), rng.uniform(-3, 3), rng.uniform(-3, 3)}};
        const Vec3 ctr = av.origin + mu.extent() * 0.5;
        auto on_sphere = [&] {
            Vec3 d{rng.normal(), rng.normal(), rng.normal()};
            return ctr + d * (20.0 / norm(d));
        };
        const Vec3 p0 = on_sphere(), p1 = on_sphere();
        const double s = siddon_line_integral(av, p0, p1);
        const double q = dense_integral(av, p0, p1, 200000);
        if (q == 0) EXPECT_EQ(s, 0);
        else EXPECT_LT(std::abs(s - q) / q, 1e-3) << "case " << c;
    }
}

TEST(Drr, EmptyVolumeIsAllOnes) {
    const Volume air({8, 8, 8}, {10, 10, 10}, -1000.0, Domain::HU);
    const auto geo = default_geometries(air, 400, 16, 16);
    const Projection p = render_drr(hu_to_attenuation(air), geo.pa);
    for (double x : p.data()) EXPECT_EQ(x, 1.0);
}

TEST(Drr, BeerLambertPerPixel) {
    const Volume water({6, 6, 6}, {10, 10, 10}, 0.0, Domain::HU);
    const auto av = hu_to_attenuation(water);
    const auto geo = default_geometries(water, 300, 12, 12);
    const Projection p = render_drr(av, geo.lateral);
    for (std::size_t v = 0; v < 12; ++v)
        for (std::size_t u = 0; u < 12; ++u) {
            const double L = siddon_line_integral(av, geo.lateral.source, geo.lateral.pixel_center(u, v));
            EXPECT_DOUBLE_EQ(p.at(u, v), std::exp(-L));
        }
}

TEST(Drr, ViewsDiffer) {
    const Volume ph = generate_phantom(default_phantom_spec(16));
    const auto geo = default_geometries(ph, 4 * 320, 32, 32);
    const auto av = hu_to_attenuation(ph);
    const Projection a = render_drr(av, geo.pa), b = render_drr(av, geo.lateral);
    double diff = 0;
    for (std::size_t i = 0; i < a.size(); ++i) diff = std::max(diff, std::abs(a.data()[i] - b.data()[i]));
    EXPECT_GT(diff, 1e-3);
}

TEST(Drr, NoiseIsSeeded) {
    const Volume ph = generate_phantom(default_phantom_spec(8));
    const auto geo = default_geometries(ph, 4 * 320, 8, 8);
    const auto av = hu_to_attenuation(ph);
    const Projection a = render_drr(av, geo.pa, DetectorNoise{0.01, SeededRng(5)});
    const Projection b = render_drr(av, geo.pa, DetectorNoise{0.01, SeededRng(5)});
    const Projection c = render_drr(av, geo.pa);
    EXPECT_TRUE(std::equal(a.data().begin(), a.data().end(), b.data().begin()));
    EXPECT_FALSE(std::equal(a.data().begin(), a.data().end(), c.data().begin()));
}

TEST(Geometry, CornersProjectInsideDetector) {
    const Volume v({16, 16, 16}, {20, 20, 20}, -1000.0, Domain::HU);
    const auto geo = default_geometries(v, 4 * 320, 64, 64);
    for (const auto* g : {&geo.pa, &geo.lateral}) {
        EXPECT_NEAR(dot(g->u_axis, g->v_axis), 0.0, 1e-15);
        const Vec3 n = cross(g->u_axis, g->v_axis);
        for (int c = 0; c < 8; ++c) {
            const Vec3 p{(c & 1) ? 320.0 : 0.0, (c & 2) ? 320.0 : 0.0, (c & 4) ? 320.0 : 0.0};
            const Vec3 ray = p - g->source;
            const double t = dot(g->detector_center - g->source, n) / dot(ray, n);
            const Vec3 hit = g->source + ray * t - g->detector_center;
            EXPECT_LE(std::abs(dot(hit, g->u_axis)), g->width_mm / 2);
            EXPECT_LE(std::abs(dot(hit, g->v_axis)), g->height_mm / 2);
        }
    }
}

TEST(Geometry, LateralIsPaRotatedAboutZ) {
    const Volume v({8, 8, 8}, {10, 10, 10}, -1000.0, Domain::HU);
    const auto geo = default_geometries(v, 400, 8, 8);
    const Vec3 c{40, 40, 40};
    const Vec3 s = geo.pa.source - c, l = geo.lateral.source - c;
    EXPECT_NEAR(l.x, -s.y, 1e-12);
    EXPECT_NEAR(l.y, s.x, 1e-12);
    EXPECT_NEAR(l.z, s.z, 1e-12);
    EXPECT_THROW(default_geometries(v, 100, 8, 8), DomainError);
}
