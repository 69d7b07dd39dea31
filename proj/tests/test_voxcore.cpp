#include <gtest/gtest.h>

#include <cmath>
#include <limits>

#include "axon/voxcore.hpp"
#include "support.hpp"

using namespace axon;

TEST(Volume, NewFillsEveryVoxel) {
    const Volume v = volume_new({2, 2, 2}, {1, 1, 1}, 0.0);
    EXPECT_EQ(v.size(), 8u);
    for (double x : v.data()) EXPECT_EQ(x, 0.0);
    const Volume one = volume_new({1, 1, 1}, {1, 1, 1}, 5.0);
    EXPECT_EQ(one.at(0, 0, 0), 5.0);
}

TEST(Volume, RejectsBadShapes) {
    EXPECT_THROW(volume_new({0, 1, 1}, {1, 1, 1}, 0.0), ShapeError);
    EXPECT_THROW(volume_new({1, 1, 1}, {1, 0, 1}, 0.0), ShapeError);
    EXPECT_THROW(Volume({2, 2, 2}, {1, 1, 1}, std::vector<double>(7), Domain::HU), ShapeError);
}

TEST(Volume, XFastestLayout) {
    Volume v({3, 4, 5}, {1, 1, 1});
    v.at(2, 1, 3) = 7;
    EXPECT_EQ(v[2 + 3 * (1 + 4 * 3)], 7);
}

TEST(Volume, DomainScan) {
    Volume v({2, 1, 1}, {1, 1, 1}, 0.5, Domain::Normalized01);
    EXPECT_TRUE(v.domain_consistent());
    v[1] = -0.1;
    EXPECT_FALSE(v.domain_consistent());
    v.set_domain(Domain::NormalizedPM1);
    EXPECT_TRUE(v.domain_consistent());
}

TEST(Rng, GaussianVolumeMeanAndDeterminism) {
    SeededRng a(1), b(1), c(2);
    const Volume va = gaussian_volume(a, {16, 16, 16});
    const Volume vb = gaussian_volume(b, {16, 16, 16});
    const Volume vc = gaussian_volume(c, {16, 16, 16});
    double mean = 0;
    for (double x : va.data()) mean += x;
    mean /= double(va.size());
    // 3 sigma for the mean of 4096 unit normals
    EXPECT_LT(std::abs(mean), 3.0 / 64.0);
    EXPECT_EQ(va, vb);
    EXPECT_NE(va, vc);
}

TEST(Rng, StreamsAreIndependentAndAddressable) {
    SeededRng s(9, 0), t(9, 1);
    EXPECT_NE(s.next_u64(), t.next_u64());
    SeededRng u(9, 0);
    const auto b3 = u.block(3);
    for (int i = 0; i < 3; ++i) u.next_u64();
    const auto w = u.block(u.counter());
    EXPECT_EQ(b3, w);
}

TEST(Rng, UniformBounds) {
    SeededRng r(4);
    for (int i = 0; i < 10000; ++i) {
        const double x = r.uniform();
        ASSERT_GT(x, 0.0);
        ASSERT_LT(x, 1.0);
        ASSERT_LT(r.below(7), 7u);
    }
}

TEST(Vvol, RoundTripQuantizesToFloat) {
    SeededRng rng(3);
    Volume v = axon::testing::random_volume({4, 4, 4}, rng);
    v.set_spacing({0.5, 1.5, 2.0});
    const auto dir = axon::testing::scratch_dir("vvol");
    save_vvol(v, dir / "a.vvol");
    const Volume w = load_vvol(dir / "a.vvol");
    EXPECT_EQ(w.dims(), v.dims());
    EXPECT_EQ(w.spacing().y, 1.5);
    EXPECT_EQ(w.domain(), Domain::NormalizedPM1);
    for (std::size_t i = 0; i < v.size(); ++i) EXPECT_EQ(w[i], double(float(v[i])));
}

TEST(Vvol, Errors) {
    Volume v({2, 2, 2}, {1, 1, 1});
    std::string buf = encode_vvol(v);
    std::string bad = buf;
    bad.replace(0, 4, "XXXX");
    try {
        decode_vvol(bad);
        FAIL();
    } catch (const IoError& e) {
        EXPECT_EQ(e.kind(), IoErrorKind::BadMagic);
    }
    try {
        decode_vvol(buf.substr(0, buf.size() - 4));
        FAIL();
    } catch (const IoError& e) {
        EXPECT_EQ(e.kind(), IoErrorKind::Truncated);
    }
}

TEST(Pgm, Scaling) {
    const std::vector<double> ramp{0.0, 1.0};
    const std::string b = encode_pgm16(ramp, 2, 1);
    const std::string body = b.substr(b.size() - 4);
    EXPECT_EQ((unsigned char)body[0], 0);
    EXPECT_EQ((unsigned char)body[1], 0);
    EXPECT_EQ((unsigned char)body[2], 0xff);
    EXPECT_EQ((unsigned char)body[3], 0xff);

    const std::vector<double> flat(6, 3.0);
    const std::string f = encode_pgm16(flat, 3, 2);
    for (std::size_t i = f.size() - 12; i < f.size(); ++i) EXPECT_EQ(f[i], 0);

    std::vector<double> nan{0.0, std::numeric_limits<double>::quiet_NaN()};
    EXPECT_THROW(encode_pgm16(nan, 2, 1), DomainError);
}

TEST(Pgm, LoadReturnsRawSamples) {
    const auto dir = axon::testing::scratch_dir("pgm");
    Projection p(2, 2, 1.0, View::PA, std::vector<double>{0, 1, 0.5, 1});
    save_pgm16(p, dir / "p.pgm");
    const Projection q = load_pgm16(dir / "p.pgm");
    EXPECT_EQ(q.at(0, 0), 0);
    EXPECT_EQ(q.at(1, 0), 65535);
    EXPECT_EQ(q.at(0, 1), std::lround(0.5 * 65535));
}
