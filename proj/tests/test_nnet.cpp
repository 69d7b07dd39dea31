#include <gtest/gtest.h>

#include <cmath>
#include <numeric>

#include "axon/nn/adam.hpp"
#include "axon/nn/checkpoint.hpp"
#include "axon/nn/layers.hpp"
#include "support.hpp"

using namespace axon;
using namespace axon::nn;
using axon::testing::fd_check;
using axon::testing::random_tensor;

namespace {

constexpr std::size_t kProbes = 24;

double inner(const Tensor& a, const Tensor& b) {
    return std::inner_product(a.data().begin(), a.data().end(), b.data().begin(), 0.0);
}

// Weighted sum with fixed random weights, so every output element gets a distinct upstream gradient.
Tensor probe_loss(const Tensor& y, std::uint64_t seed = 99) {
    SeededRng r(seed);
    return sum(mul(y, random_tensor(y.shape(), r)));
}

} // namespace

TEST(Ops, ElementwiseGradients) {
    SeededRng rng(1);
    Tensor a = random_tensor({2, 3, 4}, rng, 1, true), b = random_tensor({2, 3, 4}, rng, 1, true);
    // keep relu away from its kink
    for (auto& x : a.data())
        if (std::abs(x) < 0.05) x = 0.3;
    const std::vector<std::function<Tensor()>> fs{
        [&] { return probe_loss(add(a, b)); },
        [&] { return probe_loss(sub(a, b)); },
        [&] { return probe_loss(mul(a, b)); },
        [&] { return probe_loss(lincomb(a, 0.3, b, -1.7)); },
        [&] { return probe_loss(affine(a, 2.5, 0.1)); },
        [&] { return probe_loss(relu(a)); },
        [&] { return probe_loss(silu(a)); },
        [&] { return mean(mul(a, a)); },
        [&] { return mse_loss(a, b); },
    };
    for (std::size_t i = 0; i < fs.size(); ++i) EXPECT_LT(fd_check(fs[i], {a, b}, kProbes, rng).max_rel, 1e-4) << i;
}

TEST(Ops, L1Gradient) {
    SeededRng rng(2);
    Tensor a = random_tensor({20}, rng, 1, true);
    Tensor b = a.detach();
    for (std::size_t i = 0; i < 20; ++i) b.data()[i] += (i % 2 ? 0.2 : -0.2);
    EXPECT_LT(fd_check([&] { return l1_loss(a, b); }, {a}, kProbes, rng).max_rel, 1e-4);
}

TEST(Ops, ShapeGradients) {
    SeededRng rng(3);
    Tensor a = random_tensor({2, 3, 4, 5}, rng, 1, true), b = random_tensor({2, 2, 4, 5}, rng, 1, true);
    Tensor v = random_tensor({3}, rng, 1, true);
    const std::vector<std::function<Tensor()>> fs{
        [&] { return probe_loss(reshape(a, {6, 20})); },
        [&] { return probe_loss(permute(a, {0, 2, 3, 1})); },
        [&] { return probe_loss(permute(a, {3, 1, 0, 2})); },
        [&] { return probe_loss(concat_channels(a, b)); },
        [&] { return probe_loss(slice_channels(a, 1, 2)); },
        [&] { return probe_loss(concat_batch({a, a, slice_channels(concat_channels(b, a), 0, 3)})); },
        [&] { return probe_loss(add_channelwise(a, reshape(concat_batch({v, v}), {2, 3}))); },
    };
    for (std::size_t i = 0; i < fs.size(); ++i)
        EXPECT_LT(fd_check(fs[i], {a, b, v}, kProbes, rng).max_rel, 1e-4) << i;
}

TEST(Ops, ConcatSliceRecovers) {
    SeededRng rng(4);
    Tensor a = random_tensor({1, 2, 3, 3}, rng), b = random_tensor({1, 3, 3, 3}, rng);
    const Tensor c = concat_channels(a, b);
    EXPECT_EQ(c.dim(1), 5u);
    const Tensor a2 = slice_channels(c, 0, 2), b2 = slice_channels(c, 2, 3);
    EXPECT_TRUE(std::equal(a.data().begin(), a.data().end(), a2.data().begin()));
    EXPECT_TRUE(std::equal(b.data().begin(), b.data().end(), b2.data().begin()));
}

TEST(Ops, SmallValues) {
    const Tensor x({2}, std::vector<double>{-1, 2});
    const Tensor r = relu(x);
    EXPECT_EQ(r.data()[0], 0.0);
    EXPECT_EQ(r.data()[1], 2.0);
    const double t0 = 0;
    const Tensor e = time_embedding(std::span<const double>(&t0, 1), 8);
    for (std::size_t i = 0; i < 8; ++i) EXPECT_EQ(e.data()[i], i % 2 ? 1.0 : 0.0);
    EXPECT_THROW(time_embedding(std::span<const double>(&t0, 1), 7), ShapeError);
    EXPECT_THROW(add(Tensor({2}), Tensor({3})), ShapeError);
}

TEST(Linear, Gradient) {
    SeededRng rng(5);
    Tensor x = random_tensor({3, 4}, rng, 1, true), w = random_tensor({5, 4}, rng, 1, true),
           b = random_tensor({5}, rng, 1, true);
    EXPECT_LT(fd_check([&] { return probe_loss(linear(x, w, b)); }, {x, w, b}, kProbes, rng).max_rel, 1e-4);
}

TEST(Conv, KnownValues) {
    Tensor x({1, 1, 3, 3, 3}, std::vector<double>(27));
    std::iota(x.data().begin(), x.data().end(), 0.0);
    const Tensor y = conv3d(x, Tensor({1, 1, 1, 1, 1}, 2.0), Tensor({1}, 0.0));
    for (std::size_t i = 0; i < 27; ++i) EXPECT_EQ(y.data()[i], 2.0 * double(i));

    const Tensor ones({1, 1, 5, 5, 5}, 1.0);
    const Tensor s = conv3d(ones, Tensor({1, 1, 3, 3, 3}, 1.0), Tensor({1}, 0.0), 1, 1);
    EXPECT_EQ(s.shape(), (Shape{1, 1, 5, 5, 5}));
    EXPECT_EQ(s.data()[2 + 5 * (2 + 5 * 2)], 27.0);
    EXPECT_EQ(s.data()[0], 8.0);
}

TEST(Conv, TransposeReplicates) {
    SeededRng rng(6);
    const Tensor x = random_tensor({1, 1, 2, 2, 2}, rng);
    const Tensor y = conv_transpose3d(x, Tensor({1, 1, 2, 2, 2}, 1.0), Tensor({1}, 0.0), {2, 2, 2});
    ASSERT_EQ(y.shape(), (Shape{1, 1, 4, 4, 4}));
    for (std::size_t z = 0; z < 4; ++z)
        for (std::size_t yy = 0; yy < 4; ++yy)
            for (std::size_t xx = 0; xx < 4; ++xx)
                EXPECT_EQ(y.data()[xx + 4 * (yy + 4 * z)], x.data()[xx / 2 + 2 * (yy / 2 + 2 * (z / 2))]);
}

TEST(Conv, TransposeIsAdjoint) {
    SeededRng rng(7);
    // (stride, pad, k, d, h, w) with (n + 2 pad - k) divisible by stride so the shapes round-trip
    const std::vector<std::array<std::size_t, 6>> cases{
        {1, 1, 3, 7, 6, 5}, {2, 1, 3, 7, 5, 9}, {2, 0, 2, 8, 6, 4}, {3, 1, 4, 5, 8, 11}};
    for (auto [stride, pad, k, d, h, w_] : cases) {
        const Tensor x = random_tensor({2, 3, d, h, w_}, rng), w = random_tensor({4, 3, k, k, k}, rng);
        const Tensor zero3({3}, 0.0), zero4({4}, 0.0);
        const Tensor y = conv(x, w, zero4, {stride, stride, stride}, {pad, pad, pad});
        const Tensor g = random_tensor(y.shape(), rng);
        const Tensor xt = conv_transpose(g, w, zero3, {stride, stride, stride}, {pad, pad, pad});
        ASSERT_EQ(xt.shape(), x.shape());
        EXPECT_NEAR(inner(y, g), inner(x, xt), 1e-9 * std::max(1.0, std::abs(inner(y, g))));
    }
}

TEST(Conv, Gradients) {
    SeededRng rng(8);
    Tensor x = random_tensor({2, 2, 5, 4, 6}, rng, 1, true), w = random_tensor({3, 2, 3, 3, 3}, rng, 0.5, true),
           b = random_tensor({3}, rng, 1, true);
    EXPECT_LT(fd_check([&] { return probe_loss(conv3d(x, w, b, 2, 1)); }, {x, w, b}, kProbes, rng).max_rel, 1e-4);
    Tensor x2 = random_tensor({2, 2, 7, 5}, rng, 1, true), w2 = random_tensor({3, 2, 3, 3}, rng, 0.5, true);
    EXPECT_LT(fd_check([&] { return probe_loss(conv2d(x2, w2, b, 1, 1)); }, {x2, w2, b}, kProbes, rng).max_rel, 1e-4);
    Tensor wt = random_tensor({2, 3, 2, 2, 2}, rng, 0.5, true);
    EXPECT_LT(fd_check([&] { return probe_loss(conv_transpose3d(x, wt, b, {2, 2, 2})); }, {x, wt, b}, kProbes, rng)
                  .max_rel,
              1e-4);
    Tensor wt2 = random_tensor({2, 3, 2, 2}, rng, 0.5, true);
    EXPECT_LT(fd_check([&] { return probe_loss(conv_transpose2d(x2, wt2, b, 2)); }, {x2, wt2, b}, kProbes, rng)
                  .max_rel,
              1e-4);
    Tensor wa = random_tensor({2, 3, 4, 3, 3}, rng, 0.5, true);
    EXPECT_LT(fd_check([&] { return probe_loss(conv_transpose(x, wa, b, {2, 1, 1}, {1, 1, 1})); }, {x, wa, b},
                       kProbes, rng)
                  .max_rel,
              1e-4);
}

TEST(GroupNorm, StatisticsAndGradient) {
    SeededRng rng(9);
    Tensor x = random_tensor({2, 4, 3, 3, 3}, rng, 2, true);
    const Tensor one({4}, 1.0), zero({4}, 0.0);
    const Tensor y = group_norm(x, 2, one, zero);
    const std::size_t m = 2 * 27;
    for (std::size_t g = 0; g < 4; ++g) {
        double mu = 0, var = 0;
        for (std::size_t i = 0; i < m; ++i) mu += y.data()[g * m + i];
        mu /= double(m);
        for (std::size_t i = 0; i < m; ++i) var += (y.data()[g * m + i] - mu) * (y.data()[g * m + i] - mu);
        var /= double(m);
        EXPECT_NEAR(mu, 0.0, 1e-9);
        EXPECT_NEAR(var, 1.0, 1e-4); // eps = 1e-5 against a variance of about 1.3
    }
    const Tensor c = group_norm(Tensor({1, 2, 2, 2, 2}, 3.0), 1, Tensor({2}, 1.0), Tensor({2}, std::vector<double>{0.5, -2}));
    for (std::size_t i = 0; i < 8; ++i) EXPECT_EQ(c.data()[i], 0.5);
    for (std::size_t i = 8; i < 16; ++i) EXPECT_EQ(c.data()[i], -2.0);

    Tensor gamma = random_tensor({4}, rng, 1, true), beta = random_tensor({4}, rng, 1, true);
    EXPECT_LT(fd_check([&] { return probe_loss(group_norm(x, 2, gamma, beta)); }, {x, gamma, beta}, kProbes, rng)
                  .max_rel,
              1e-4);
    EXPECT_THROW(group_norm(x, 3, gamma, beta), ShapeError);
}

TEST(Autodiff, GradientsAccumulateAndNoGrad) {
    Tensor a({2}, std::vector<double>{1, 2}, true);
    sum(mul(a, a)).backward();
    sum(mul(a, a)).backward();
    EXPECT_EQ(a.grad()[0], 4.0);
    EXPECT_EQ(a.grad()[1], 8.0);
    a.zero_grad();
    {
        NoGradGuard g;
        const Tensor y = sum(mul(a, a));
        EXPECT_FALSE(y.requires_grad());
        EXPECT_THROW(y.backward(), Error);
    }
    EXPECT_FALSE(a.has_grad());
}

TEST(UNet, ShapePurityAndGradient) {
    SeededRng rng(10);
    UNet3d net = build_unet3d(4, {1, 2}, 1, 2, 1, rng);
    Tensor x = random_tensor({1, 1, 8, 8, 8}, rng), c = random_tensor({1, 1, 8, 8, 8}, rng);
    const double t = 37;
    const std::span<const double> ts(&t, 1);
    const Tensor y1 = net(x, &c, ts), y2 = net(x, &c, ts);
    EXPECT_EQ(y1.shape(), (Shape{1, 2, 8, 8, 8}));
    EXPECT_TRUE(std::equal(y1.data().begin(), y1.data().end(), y2.data().begin()));
    EXPECT_THROW(net(random_tensor({1, 1, 7, 8, 8}, rng), &c, ts), ShapeError);

    auto loss = [&] { return mean(mul(net(x, &c, ts), net(x, &c, ts))); };
    const auto r = fd_check(loss, axon::testing::tensors_of(net.parameters()), kProbes, rng);
    EXPECT_LT(r.max_rel, 1e-3);
}

TEST(ControlBranch, StartsAsNoOpAndHasGradients) {
    SeededRng rng(11);
    UNet3d net = build_unet3d(4, {1, 2}, 1, 1, 0, rng);
    ControlBranch ctl(net, 1, rng);
    const Tensor x = random_tensor({1, 1, 8, 8, 8}, rng), c = random_tensor({1, 1, 8, 8, 8}, rng);
    const double t = 500;
    const std::span<const double> ts(&t, 1);
    auto res = ctl(x, c, ts);
    const Tensor a = net(x, nullptr, ts), b = net(x, nullptr, ts, &res);
    EXPECT_TRUE(std::equal(a.data().begin(), a.data().end(), b.data().begin()));

    // perturb the zero projections so the whole branch is exercised
    for (auto& z : ctl.zero_proj)
        for (auto& w : z.weight.data()) w = rng.uniform(-0.3, 0.3);
    Tensor cc = c;
    auto loss = [&] {
        auto r = ctl(x, cc, ts);
        return probe_loss(net(x, nullptr, ts, &r));
    };
    net.set_trainable(false);
    const auto r = fd_check(loss, axon::testing::tensors_of(ctl.parameters()), kProbes, rng);
    EXPECT_LT(r.max_rel, 1e-3);
}

TEST(Adam, FirstStepAndZeroGrad) {
    Tensor w({1}, 0.5, true);
    Adam opt({{"w", w}}, {0.1});
    w.zero_grad();
    sum(w).backward();
    opt.step();
    EXPECT_NEAR(w.item(), 0.5 - 0.1, 1e-6);

    Tensor z({1}, 0.5, true);
    Adam o2({{"z", z}}, {0.1});
    affine(sum(z), 0.0).backward();
    o2.step();
    EXPECT_EQ(z.item(), 0.5);

    Tensor missing({1}, 0.5, true);
    Adam o3({{"m", missing}});
    EXPECT_THROW(o3.step(), Error);
}

TEST(Adam, ConvergesOnQuadratic) {
    Tensor w({1}, 0.0, true);
    Adam opt({{"w", w}}, {0.1});
    for (int i = 0; i < 200; ++i) {
        opt.zero_grad();
        const Tensor d = affine(w, 1.0, -3.0);
        sum(mul(d, d)).backward();
        opt.step();
    }
    EXPECT_LT(std::abs(w.item() - 3.0), 0.1);
}

TEST(Adam, StateRoundTrip) {
    Tensor a({2}, 0.0, true), b({2}, 0.0, true);
    Adam o1({{"w", a}}, {0.05}), o2({{"w", b}}, {0.05});
    for (int i = 0; i < 3; ++i) {
        o1.zero_grad();
        sum(mul(a, affine(a, 1.0, -1.0))).backward();
        o1.step();
    }
    std::copy(a.data().begin(), a.data().end(), b.data().begin());
    o2.load_state(o1.state());
    o1.zero_grad();
    o2.zero_grad();
    sum(mul(a, affine(a, 1.0, -1.0))).backward();
    sum(mul(b, affine(b, 1.0, -1.0))).backward();
    o1.step();
    o2.step();
    EXPECT_EQ(a.data()[0], b.data()[0]);
}

TEST(Checkpoint, RoundTripAndErrors) {
    SeededRng rng(12);
    UNet3d a = build_unet3d(4, {1, 2}, 1, 1, 0, rng), b = build_unet3d(4, {1, 2}, 1, 1, 0, rng);
    const auto dir = axon::testing::scratch_dir("ckpt");
    save_module(a, dir / "a.vnet");
    load_module(b, dir / "a.vnet");
    const auto pa = a.parameters(), pb = b.parameters();
    for (std::size_t i = 0; i < pa.size(); ++i)
        for (std::size_t k = 0; k < pa[i].second.size(); ++k)
            ASSERT_EQ(pb[i].second.data()[k], double(float(pa[i].second.data()[k])));

    const std::string buf = encode_vnet(pa);
    auto kind_of = [](const std::string& s) {
        try {
            decode_vnet(s);
        } catch (const IoError& e) {
            return e.kind();
        }
        return IoErrorKind::Open;
    };
    EXPECT_EQ(kind_of("XXXX" + buf.substr(4)), IoErrorKind::BadMagic);
    EXPECT_EQ(kind_of(buf.substr(0, buf.size() - 3)), IoErrorKind::Truncated);
    EXPECT_EQ(kind_of(buf + "z"), IoErrorKind::Format);
    std::string ver = buf;
    ver[4] = 9;
    EXPECT_EQ(kind_of(ver), IoErrorKind::UnknownVersion);

    UNet3d other = build_unet3d(4, {1, 2, 2}, 1, 1, 0, rng);
    EXPECT_THROW(load_module(other, dir / "a.vnet"), Error);
}
