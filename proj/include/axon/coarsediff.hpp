#pragma once

#include <cmath>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "axon/error.hpp"
#include "axon/training.hpp"
#include "axon/nn/layers.hpp"
#include "axon/schedules.hpp"
#include "axon/voxcore.hpp"

namespace axon {

struct CoarseConfig {
    Dims3 dims{16, 16, 16};
    Spacing3 spacing{20, 20, 20};
    std::size_t r = 4;             // projection pixels per voxel (power of two)
    std::size_t encoder_channels = 8;
    std::size_t fusion_channels = 8;
    std::size_t base_channels = 8;
    std::vector<std::size_t> channel_mults{1, 2, 4};
    bool bi_planar = true;
    int T = 1000;
    double s_max = 1.0;

    std::size_t projection_u(View v) const { return r * (v == View::PA ? dims.x : dims.y); }
    std::size_t projection_v() const { return r * dims.z; }

    void validate() const {
        if (r == 0 || (r & (r - 1)) != 0) throw ConfigError("r must be a power of two, got " + std::to_string(r));
        if (bi_planar && dims.x != dims.y)
            throw ConfigError("bi-planar encoding needs equal x and y extents");
        if (encoder_channels == 0 || fusion_channels == 0) throw ConfigError("encoder/fusion channels must be positive");
    }
};

/// Strided 2D encoder; its output channels become the depth axis along the view's ray.
struct EncoderLift final : nn::Module {
    std::vector<nn::ConvLayer> down;
    nn::ConvLayer head;
    std::size_t r = 1;

    EncoderLift() = default;
    EncoderLift(std::size_t r, std::size_t channels, std::size_t f, SeededRng& rng) : r(r) {
        std::size_t c_in = 1;
        for (std::size_t s = r; s > 1; s /= 2) {
            down.push_back(nn::ConvLayer::square(c_in, channels, 3, 2, 1, rng));
            c_in = channels;
        }
        head = nn::ConvLayer::square(c_in, f, 3, 1, 1, rng);
    }

    std::size_t features() const { return head.out_channels(); }

    /// [N, 1, rv, ru] -> [N, f, v, u]
    nn::Tensor features_2d(const nn::Tensor& x) const {
        nn::Tensor h = x;
        for (const auto& c : down) h = nn::silu(c(h));
        return head(h);
    }

    /// Projection tensor -> [N, 1, D, H, W] volume tensor.
    nn::Tensor lift(const nn::Tensor& x, View view) const {
        nn::Tensor f = features_2d(x); // [N, f, Z, U]
        const std::size_t n = f.dim(0), d = f.dim(1), z = f.dim(2), u = f.dim(3);
        if (view == View::PA) // u = x, rays along y
            return nn::reshape(nn::permute(f, {0, 2, 1, 3}), {n, 1, z, d, u});
        // lateral: u = y, rays along x
        return nn::reshape(nn::permute(f, {0, 2, 3, 1}), {n, 1, z, u, d});
    }

    void collect(const std::string& prefix, nn::ParamList& out) const override {
        for (std::size_t i = 0; i < down.size(); ++i) down[i].collect(nn::join(prefix, "down" + std::to_string(i)), out);
        head.collect(nn::join(prefix, "head"), out);
    }
};

/// Fuses two lifted views: three conv3+GN+ReLU layers plus a 1x1x1 residual projection.
struct FusionBlock final : nn::Module {
    nn::ConvLayer conv1, conv2, conv3, residual;
    nn::GroupNormLayer norm1, norm2, norm3;

    FusionBlock() = default;
    FusionBlock(std::size_t channels, SeededRng& rng)
        : conv1(nn::ConvLayer::cube(2, channels, 3, 1, 1, rng)),
          conv2(nn::ConvLayer::cube(channels, channels, 3, 1, 1, rng)),
          conv3(nn::ConvLayer::cube(channels, 1, 3, 1, 1, rng)),
          residual(nn::ConvLayer::cube(2, 1, 1, 1, 0, rng)),
          norm1(channels, nn::default_groups(channels)),
          norm2(channels, nn::default_groups(channels)),
          norm3(1, 1) {}

    nn::Tensor operator()(const nn::Tensor& x) const {
        nn::Tensor h = nn::relu(norm1(conv1(x)));
        h = nn::relu(norm2(conv2(h)));
        h = nn::relu(norm3(conv3(h)));
        return nn::add(h, residual(x));
    }

    void collect(const std::string& prefix, nn::ParamList& out) const override {
        conv1.collect(nn::join(prefix, "conv1"), out);
        norm1.collect(nn::join(prefix, "norm1"), out);
        conv2.collect(nn::join(prefix, "conv2"), out);
        norm2.collect(nn::join(prefix, "norm2"), out);
        conv3.collect(nn::join(prefix, "conv3"), out);
        norm3.collect(nn::join(prefix, "norm3"), out);
        residual.collect(nn::join(prefix, "residual"), out);
    }
};

struct CoarseModel final : nn::Module {
    CoarseConfig cfg;
    EncoderLift encoder;
    std::optional<FusionBlock> fusion;
    nn::UNet3d backbone;
    BridgeSchedule schedule;

    CoarseModel() = default;
    CoarseModel(const CoarseConfig& c, SeededRng& rng) : cfg(c), schedule(bridge_schedule(c.T, c.s_max)) {
        cfg.validate();
        encoder = EncoderLift(cfg.r, cfg.encoder_channels, cfg.dims.y, rng);
        if (cfg.bi_planar) fusion.emplace(cfg.fusion_channels, rng);
        backbone = nn::build_unet3d(cfg.base_channels, cfg.channel_mults, 1, 1, 1, rng);
    }

    void collect(const std::string& prefix, nn::ParamList& out) const override {
        encoder.collect(nn::join(prefix, "encoder"), out);
        if (fusion) fusion->collect(nn::join(prefix, "fusion"), out);
        backbone.collect(nn::join(prefix, "backbone"), out);
    }
};

/// Views accepted by the coarse stage: PA alone, or PA then LATERAL.
inline void check_views(const CoarseModel& m, const std::vector<const Projection*>& views) {
    if (views.empty() || views.size() > 2) throw ShapeError("coarse stage takes one or two views");
    if (views[0]->view() != View::PA) throw ShapeError("first view must be PA");
    if (views.size() == 2 && views[1]->view() != View::Lateral)
        throw ShapeError("second view must be LATERAL (two PA views given)");
    if ((views.size() == 2) != m.cfg.bi_planar)
        throw ShapeError(std::string("model is ") + (m.cfg.bi_planar ? "bi-planar" : "single-planar") + " but got " +
                         std::to_string(views.size()) + " view(s)");
    for (const Projection* p : views) {
        const std::size_t nu = m.cfg.projection_u(p->view()), nv = m.cfg.projection_v();
        if (p->nu() != nu || p->nv() != nv)
            throw ShapeError("projection must be " + std::to_string(nu) + "x" + std::to_string(nv) + ", got " +
                             std::to_string(p->nu()) + "x" + std::to_string(p->nv()));
    }
}

/// Lifted (pre-fusion) encodings of each view, shared encoder weights.
inline std::vector<nn::Tensor> encode_views(const CoarseModel& m, const std::vector<const Projection*>& views) {
    check_views(m, views);
    std::vector<nn::Tensor> out;
    for (const Projection* p : views) out.push_back(m.encoder.lift(nn::projection_to_tensor(*p), p->view()));
    return out;
}

/// F(x) as a differentiable [1, 1, D, H, W] tensor.
inline nn::Tensor encode_condition_tensor(const CoarseModel& m, const std::vector<const Projection*>& views) {
    auto enc = encode_views(m, views);
    if (enc.size() == 1) return enc[0];
    return (*m.fusion)(nn::concat_channels(enc[0], enc[1]));
}

inline Volume encode_condition(const CoarseModel& m, const std::vector<const Projection*>& views) {
    nn::NoGradGuard g;
    return nn::tensor_to_volume(encode_condition_tensor(m, views), m.cfg.spacing, Domain::NormalizedPM1);
}

/// x_t = (1 - a_t) x0 + a_t xT + sqrt(d_t) eps
inline std::pair<Volume, Volume> bridge_forward(const Volume& x0, const Volume& xT, int t, const BridgeSchedule& s,
                                                SeededRng& rng) {
    if (x0.dims() != xT.dims()) throw ShapeError("bridge_forward: x0 and xT dims differ");
    if (t < 0 || t > s.T) throw DomainError("bridge_forward: t out of range");
    Volume eps = gaussian_volume(rng, x0.dims(), x0.spacing());
    const double a = s.alpha[std::size_t(t)], sd = std::sqrt(s.delta[std::size_t(t)]);
    Volume xt(x0.dims(), x0.spacing(), 0.0, x0.domain());
    for (std::size_t i = 0; i < xt.data().size(); ++i) xt[i] = (1 - a) * x0[i] + a * xT[i] + sd * eps[i];
    return {std::move(xt), std::move(eps)};
}

/// mean((x_t - x0) - f(x_t, t, F(x)))^2 with gradients into encoder, fusion and backbone.
inline nn::Tensor coarse_loss(const CoarseModel& m, const Volume& x0, const std::vector<const Projection*>& views,
                              int t, SeededRng& rng) {
    if (x0.dims() != m.cfg.dims) throw ShapeError("coarse_loss: volume dims do not match the model");
    if (x0.domain() != Domain::NormalizedPM1 || !x0.domain_consistent())
        throw DomainError("coarse_loss: target volume must be normalized to [-1, 1]");
    for (const Projection* p : views)
        for (double v : p->data())
            if (v < 0.0 || v > 1.0) throw DomainError("coarse_loss: projections must be normalized to [0, 1]");
    if (t < 0 || t > m.schedule.T) throw DomainError("coarse_loss: t out of range");
    const double a = m.schedule.alpha[std::size_t(t)], sd = std::sqrt(m.schedule.delta[std::size_t(t)]);
    nn::Tensor xT = encode_condition_tensor(m, views);
    nn::Tensor x0t = nn::volume_to_tensor(x0);
    nn::Tensor eps = nn::volume_to_tensor(gaussian_volume(rng, x0.dims(), x0.spacing()));
    nn::Tensor xt = nn::add(nn::lincomb(x0t, 1 - a, xT, a), nn::affine(eps, sd));
    nn::Tensor target = nn::sub(xt, x0t);
    const double tt = t;
    nn::Tensor pred = m.backbone(xt, &xT, std::span<const double>(&tt, 1));
    return nn::mse_loss(pred, target);
}

struct CoarseSample {
    Volume x0;
    std::vector<Projection> views; // PA, or PA + LATERAL

    std::vector<const Projection*> view_ptrs() const {
        std::vector<const Projection*> out;
        for (const auto& p : views) out.push_back(&p);
        return out;
    }
};

/// Joint training of encoder, fusion and backbone, t ~ U{1..T}.
template <class OnEpoch>
std::vector<EpochLoss> train_coarse(CoarseModel& m, const std::vector<CoarseSample>& data, nn::Adam& opt,
                                    const TrainOptions& o, OnEpoch&& on_epoch) {
    auto loss_of = [&](std::size_t i, SeededRng& rng) {
        const int t = 1 + int(rng.below(std::uint64_t(m.schedule.T)));
        return coarse_loss(m, data[i].x0, data[i].view_ptrs(), t, rng);
    };
    return train_epochs(data.size(), opt, o, loss_of, on_epoch);
}

/// Reverse bridge from x_T along `plan` using any residual predictor r(x_t, t).
template <class Predictor>
Volume bridge_sample_with(Predictor&& predict, const Volume& xT, const DdimPlan& plan, const BridgeSchedule& s,
                          SeededRng& rng) {
    if (plan.steps.empty()) throw DomainError("bridge_sample: empty plan");
    if (plan.steps.back() != s.T) throw DomainError("bridge_sample: plan must end at T");
    const double eta = plan.eta;
    Volume x = xT;
    for (std::size_t k = plan.steps.size(); k-- > 0;) {
        const int t = plan.steps[k], tp = k > 0 ? plan.steps[k - 1] : 0;
        const double a = s.alpha[std::size_t(t)], d = s.delta[std::size_t(t)];
        const double ap = s.alpha[std::size_t(tp)], dp = s.delta[std::size_t(tp)];
        const Volume r = predict(static_cast<const Volume&>(x), t);
        if (r.dims() != x.dims()) throw ShapeError("bridge_sample: predictor returned wrong dims");
        const double c = (d > 0 ? std::sqrt(dp / d) : 0.0) * std::sqrt(1 - eta);
        const double sn = std::sqrt(eta * dp);
        std::optional<Volume> z;
        if (sn > 0) z = gaussian_volume(rng, x.dims(), x.spacing());
        Volume next(x.dims(), x.spacing(), 0.0, xT.domain());
        for (std::size_t i = 0; i < x.data().size(); ++i) {
            const double x0 = x[i] - r[i];
            next[i] = (1 - ap) * x0 + ap * xT[i] + c * (x[i] - (1 - a) * x0 - a * xT[i]) + (z ? sn * (*z)[i] : 0.0);
        }
        x = std::move(next);
    }
    return x;
}

/// X^ = reverse bridge starting from F(x).
inline Volume bridge_sample(const CoarseModel& m, const std::vector<const Projection*>& views, const DdimPlan& plan,
                            SeededRng& rng) {
    nn::NoGradGuard g;
    const nn::Tensor cond = encode_condition_tensor(m, views);
    const Volume xT = nn::tensor_to_volume(cond, m.cfg.spacing, Domain::NormalizedPM1);
    auto predict = [&](const Volume& xt, int t) {
        const double tt = t;
        return nn::tensor_to_volume(m.backbone(nn::volume_to_tensor(xt), &cond, std::span<const double>(&tt, 1)),
                                    xt.spacing(), xt.domain());
    };
    return bridge_sample_with(predict, xT, plan, m.schedule, rng);
}

} // namespace axon
