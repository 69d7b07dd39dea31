#pragma once

#include <algorithm>
#include <cmath>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "axon/error.hpp"
#include "axon/nn/adam.hpp"
#include "axon/nn/layers.hpp"
#include "axon/schedules.hpp"
#include "axon/training.hpp"
#include "axon/voxcore.hpp"

namespace axon {

struct FineConfig {
    Dims3 dims{16, 16, 16};
    Spacing3 spacing{20, 20, 20};
    std::size_t base_channels = 8;
    std::vector<std::size_t> channel_mults{1, 2, 4};
    int T = 1000;
    double beta_start = 1e-4;
    double beta_end = 2e-2;
};

/// Prior backbone eps(y_t, t) plus an optional control branch fed with X^.
struct FineModel final : nn::Module {
    FineConfig cfg;
    nn::UNet3d backbone;
    std::optional<nn::ControlBranch> control;
    DdpmSchedule schedule;
    bool backbone_frozen = false;
    bool clamp_output = false;

    FineModel() = default;
    FineModel(const FineConfig& c, SeededRng& rng)
        : cfg(c),
          backbone(nn::build_unet3d(c.base_channels, c.channel_mults, 1, 1, 0, rng)),
          schedule(ddpm_schedule(c.T, c.beta_start, c.beta_end)) {}

    /// Freezes the backbone and attaches a fresh zero-initialized control branch.
    void attach_control(SeededRng& rng) {
        control.emplace(backbone, 1, rng);
        freeze_backbone();
    }

    void freeze_backbone() {
        backbone_frozen = true;
        backbone.set_trainable(false);
    }

    void collect(const std::string& prefix, nn::ParamList& out) const override {
        backbone.collect(nn::join(prefix, "backbone"), out);
        if (control) control->collect(nn::join(prefix, "control"), out);
    }
};

/// eps^(y_t, t[, X^]) for a batch of one.
inline nn::Tensor predict_noise(const FineModel& m, const nn::Tensor& yt, int t, const nn::Tensor* cond) {
    const double tt = t;
    const std::span<const double> ts(&tt, 1);
    if (cond && m.control) {
        auto residuals = (*m.control)(yt, *cond, ts);
        return m.backbone(yt, nullptr, ts, &residuals);
    }
    return m.backbone(yt, nullptr, ts);
}

/// y_t = sqrt(abar_t) y0 + sqrt(1 - abar_t) eps
inline std::pair<Volume, Volume> ddpm_forward(const Volume& y0, int t, const DdpmSchedule& s, SeededRng& rng) {
    if (t < 1 || t > s.T) throw DomainError("ddpm_forward: t must lie in [1, " + std::to_string(s.T) + "]");
    Volume eps = gaussian_volume(rng, y0.dims(), y0.spacing());
    const double ab = s.alpha_bar[std::size_t(t)];
    const double a = std::sqrt(ab), b = std::sqrt(1 - ab);
    Volume yt(y0.dims(), y0.spacing(), 0.0, y0.domain());
    for (std::size_t i = 0; i < yt.data().size(); ++i) yt[i] = a * y0[i] + b * eps[i];
    return {std::move(yt), std::move(eps)};
}

inline void check_training_volume(const FineModel& m, const Volume& y0) {
    if (y0.dims() != m.cfg.dims) throw ShapeError("fine stage: volume dims do not match the model");
    if (y0.domain() != Domain::NormalizedPM1 || !y0.domain_consistent())
        throw DomainError("fine stage: volumes must be normalized to [-1, 1]");
}

inline int sample_timestep(const DdpmSchedule& s, SeededRng& rng) { return 1 + int(rng.below(std::uint64_t(s.T))); }

/// Unconditional eps-prediction loss for prior training.
inline nn::Tensor prior_loss(const FineModel& m, const Volume& y0, int t, SeededRng& rng) {
    check_training_volume(m, y0);
    auto [yt, eps] = ddpm_forward(y0, t, m.schedule, rng);
    return nn::mse_loss(predict_noise(m, nn::volume_to_tensor(yt), t, nullptr), nn::volume_to_tensor(eps));
}

/// mean (eps - eps(y_t, t, X^))^2; only the control branch receives gradients.
inline nn::Tensor fine_loss(const FineModel& m, const Volume& y0, const Volume& cond, int t, SeededRng& rng) {
    if (!m.backbone_frozen) throw Error("fine_loss: backbone must be frozen");
    if (!m.control) throw Error("fine_loss: no control branch attached");
    check_training_volume(m, y0);
    if (cond.dims() != y0.dims()) throw ShapeError("fine_loss: condition dims differ from the target");
    auto [yt, eps] = ddpm_forward(y0, t, m.schedule, rng);
    const nn::Tensor c = nn::volume_to_tensor(cond);
    return nn::mse_loss(predict_noise(m, nn::volume_to_tensor(yt), t, &c), nn::volume_to_tensor(eps));
}

/// Stochastic minimization of the prior loss, t ~ U{1..T}.
template <class OnEpoch>
std::vector<EpochLoss> train_prior(FineModel& m, const std::vector<Volume>& data, nn::Adam& opt,
                                   const TrainOptions& o, OnEpoch&& on_epoch) {
    if (data.empty()) throw DomainError("train_prior: empty dataset");
    if (m.backbone_frozen) throw Error("train_prior: backbone is frozen");
    auto loss_of = [&](std::size_t i, SeededRng& rng) {
        return prior_loss(m, data[i], sample_timestep(m.schedule, rng), rng);
    };
    return train_epochs(data.size(), opt, o, loss_of, on_epoch);
}

inline std::vector<EpochLoss> train_prior(FineModel& m, const std::vector<Volume>& data, nn::Adam& opt,
                                          const TrainOptions& o) {
    return train_prior(m, data, opt, o, [](const EpochLoss&) {});
}

/// Control-branch training on (ground truth Y, condition X^) pairs.
template <class OnEpoch>
std::vector<EpochLoss> train_control(FineModel& m, const std::vector<std::pair<Volume, Volume>>& pairs, nn::Adam& opt,
                                     const TrainOptions& o, OnEpoch&& on_epoch) {
    if (pairs.empty()) throw DomainError("train_control: empty dataset");
    auto loss_of = [&](std::size_t i, SeededRng& rng) {
        const int t = sample_timestep(m.schedule, rng);
        return fine_loss(m, pairs[i].first, pairs[i].second, t, rng);
    };
    return train_epochs(pairs.size(), opt, o, loss_of, on_epoch);
}

/// DDIM / ancestral reverse process from y_T along `plan` using any noise predictor eps(y_t, t).
template <class Predictor>
Volume fine_sample_with(Predictor&& predict, Volume y, const DdimPlan& plan, const DdpmSchedule& s, SeededRng& rng,
                        bool clamp_output) {
    if (plan.steps.empty()) throw DomainError("fine_sample: empty plan");
    if (plan.steps.back() != s.T) throw DomainError("fine_sample: plan must end at T");
    const double eta = plan.eta;
    for (std::size_t k = plan.steps.size(); k-- > 0;) {
        const int t = plan.steps[k], tp = k > 0 ? plan.steps[k - 1] : 0;
        const double ab = s.alpha_bar[std::size_t(t)], abp = s.alpha_bar[std::size_t(tp)];
        const Volume e = predict(static_cast<const Volume&>(y), t);
        if (e.dims() != y.dims()) throw ShapeError("fine_sample: predictor returned wrong dims");
        const double sigma = eta * std::sqrt((1 - abp) / (1 - ab)) * std::sqrt(1 - ab / abp);
        const double dir = std::sqrt(std::max(0.0, 1 - abp - sigma * sigma));
        std::optional<Volume> z;
        if (sigma > 0) z = gaussian_volume(rng, y.dims(), y.spacing());
        Volume next(y.dims(), y.spacing(), 0.0, y.domain());
        for (std::size_t i = 0; i < y.data().size(); ++i) {
            double x0 = (y[i] - std::sqrt(1 - ab) * e[i]) / std::sqrt(ab);
            if (clamp_output) x0 = std::clamp(x0, -1.0, 1.0);
            next[i] = std::sqrt(abp) * x0 + dir * e[i] + (z ? sigma * (*z)[i] : 0.0);
        }
        y = std::move(next);
    }
    return y;
}

/// Y^: start from y_T ~ N(0, I) and denoise under the control branch's guidance.
inline Volume fine_sample(const FineModel& m, const Volume* cond, const DdimPlan& plan, SeededRng& rng) {
    nn::NoGradGuard g;
    std::optional<nn::Tensor> c;
    if (cond) {
        if (cond->dims() != m.cfg.dims) throw ShapeError("fine_sample: condition dims do not match the model");
        c = nn::volume_to_tensor(*cond);
    }
    Volume yT = gaussian_volume(rng, m.cfg.dims, m.cfg.spacing);
    yT.set_domain(Domain::NormalizedPM1);
    auto predict = [&](const Volume& yt, int t) {
        return nn::tensor_to_volume(predict_noise(m, nn::volume_to_tensor(yt), t, c ? &*c : nullptr), yt.spacing(),
                                    yt.domain());
    };
    return fine_sample_with(predict, std::move(yT), plan, m.schedule, rng, m.clamp_output);
}

} // namespace axon
