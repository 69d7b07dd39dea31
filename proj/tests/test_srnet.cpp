#include <gtest/gtest.h>

#include "axon/srnet.hpp"
#include "support.hpp"

using namespace axon;
using axon::testing::fd_check;
using axon::testing::random_volume;
using axon::testing::tensors_of;

namespace {

SrConfig small() {
    SrConfig c;
    c.n_rrdb = 1;
    c.base_features = 4;
    c.growth = 2;
    c.dense_blocks = 2;
    c.head_channels = 2;
    return c;
}

// every voxel copied into a 2x2x2 block
Volume replicate2(const Volume& v) {
    const Dims3 d = v.dims();
    Volume out({2 * d.x, 2 * d.y, 2 * d.z}, {v.spacing().x / 2, v.spacing().y / 2, v.spacing().z / 2}, 0.0,
               v.domain());
    for (std::size_t z = 0; z < 2 * d.z; ++z)
        for (std::size_t y = 0; y < 2 * d.y; ++y)
            for (std::size_t x = 0; x < 2 * d.x; ++x) out.at(x, y, z) = v.at(x / 2, y / 2, z / 2);
    return out;
}

std::vector<double> values(const nn::ParamList& ps) {
    std::vector<double> out;
    for (const auto& [n, t] : ps) out.insert(out.end(), t.data().begin(), t.data().end());
    return out;
}

} // namespace

TEST(Sr, ShapesAndConfig) {
    SeededRng rng(1);
    const SrModel m(small(), rng);
    Volume v = random_volume({8, 8, 8}, rng);
    v.set_spacing({4, 4, 6});
    const Volume up = sr_forward(m, v);
    EXPECT_EQ(up.dims(), (Dims3{16, 16, 16}));
    EXPECT_EQ(up.spacing().z, 3.0);
    EXPECT_EQ(sr_forward(m, random_volume({6, 4, 2}, rng)).dims(), (Dims3{12, 8, 4}));
    for (std::size_t g : {0, 1, 3, 4}) {
        SrConfig c = small();
        c.gamma = g;
        EXPECT_THROW(c.validate(), ConfigError) << g;
    }
}

TEST(Sr, SliceStackTreatsSlicesIndependently) {
    SeededRng rng(2);
    const SrModel m(small(), rng);
    Volume v = random_volume({5, 6, 4}, rng);
    const nn::Tensor a = sr_slice_stack(m, nn::volume_to_tensor(v));
    EXPECT_EQ(a.shape(), (nn::Shape{1, 2, 4, 12, 10}));
    for (std::size_t y = 0; y < 6; ++y)
        for (std::size_t x = 0; x < 5; ++x) v.at(x, y, 2) = rng.uniform(-1, 1);
    const nn::Tensor b = sr_slice_stack(m, nn::volume_to_tensor(v));
    const std::size_t plane = 12 * 10;
    for (std::size_t c = 0; c < 2; ++c)
        for (std::size_t z = 0; z < 4; ++z) {
            bool same = true;
            for (std::size_t i = 0; i < plane; ++i)
                same &= a.data()[(c * 4 + z) * plane + i] == b.data()[(c * 4 + z) * plane + i];
            EXPECT_EQ(same, z != 2) << c << " " << z;
        }
}

TEST(Sr, Gradients) {
    SeededRng rng(3);
    const SrModel m(small(), rng);
    const Volume lo = random_volume({3, 4, 3}, rng);
    SeededRng wr(5);
    const nn::Tensor w = axon::testing::random_tensor({1, 1, 6, 8, 6}, wr);
    auto loss = [&] { return nn::sum(nn::mul(sr_forward_tensor(m, nn::volume_to_tensor(lo)), w)); };
    EXPECT_LT(fd_check(loss, tensors_of(m.parameters()), 30, rng).max_rel, 1e-4);
}

TEST(Sr, LearnsBlockReplication) {
    SeededRng rng(4);
    SrModel m(small(), rng);
    std::vector<SrPair> pairs;
    for (int i = 0; i < 4; ++i) {
        const Volume lo = random_volume({4, 4, 4}, rng);
        pairs.push_back({lo, replicate2(lo), std::nullopt});
    }
    nn::Adam opt(m.parameters(), {.lr = 5e-3});
    const auto log = train_sr(m, pairs, opt, {75, 1});
    ASSERT_EQ(log.size(), 75u);
    EXPECT_LT(log.back().mean_loss, 0.3 * log.front().mean_loss);
}

TEST(Sr, TrainingChecksAndDeterminism) {
    SeededRng rng(5);
    SrModel m(small(), rng);
    nn::Adam opt(m.parameters(), {});
    EXPECT_THROW(train_sr(m, {}, opt, {1, 0}), DomainError);
    const Volume lo = random_volume({4, 4, 4}, rng);
    EXPECT_THROW(train_sr(m, {{lo, lo, std::nullopt}}, opt, {1, 0}), ShapeError);
    EXPECT_THROW(train_sr(m, {{lo, replicate2(lo), std::nullopt}}, opt, {1, 0}, true), DomainError);

    auto run = [&] {
        SeededRng r(9);
        SrModel k(small(), r);
        nn::Adam o(k.parameters(), {});
        train_sr(k, {{lo, replicate2(lo), std::nullopt}}, o, {3, 2});
        return values(k.parameters());
    };
    EXPECT_EQ(run(), run());
}
