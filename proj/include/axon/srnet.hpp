#pragma once

#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "axon/error.hpp"
#include "axon/training.hpp"
#include "axon/nn/adam.hpp"
#include "axon/nn/layers.hpp"
#include "axon/voxcore.hpp"

namespace axon {

struct SrConfig {
    std::size_t gamma = 2;
    std::size_t n_rrdb = 2;
    std::size_t base_features = 8;
    std::size_t growth = 4;        // channels added by each dense layer
    std::size_t dense_blocks = 3;  // dense blocks inside one RRDB
    std::size_t head_channels = 4; // per-slice channels handed to the volume head

    void validate() const {
        if (gamma < 2) throw ConfigError("sr: gamma must be >= 2 (the stage is skipped at gamma = 1)");
        if (gamma != 2) throw ConfigError("sr: only gamma = 2 is supported, got " + std::to_string(gamma));
        if (n_rrdb < 1) throw ConfigError("sr: n_rrdb must be >= 1");
        if (base_features == 0 || growth == 0 || dense_blocks == 0 || head_channels == 0)
            throw ConfigError("sr: feature counts must be positive");
    }
};

/// Three densely connected 3x3 convolutions, output scaled by 0.2 and added back.
struct DenseBlock final : nn::Module {
    nn::ConvLayer c1, c2, c3;

    DenseBlock() = default;
    DenseBlock(std::size_t f, std::size_t g, SeededRng& rng)
        : c1(nn::ConvLayer::square(f, g, 3, 1, 1, rng)),
          c2(nn::ConvLayer::square(f + g, g, 3, 1, 1, rng)),
          c3(nn::ConvLayer::square(f + 2 * g, f, 3, 1, 1, rng)) {}

    nn::Tensor operator()(const nn::Tensor& x) const {
        nn::Tensor a = nn::silu(c1(x));
        nn::Tensor xa = nn::concat_channels(x, a);
        nn::Tensor b = nn::silu(c2(xa));
        nn::Tensor out = c3(nn::concat_channels(xa, b));
        return nn::add(x, nn::affine(out, 0.2));
    }

    void collect(const std::string& prefix, nn::ParamList& out) const override {
        c1.collect(nn::join(prefix, "c1"), out);
        c2.collect(nn::join(prefix, "c2"), out);
        c3.collect(nn::join(prefix, "c3"), out);
    }
};

struct Rrdb final : nn::Module {
    std::vector<DenseBlock> blocks;

    Rrdb() = default;
    Rrdb(std::size_t f, std::size_t g, std::size_t n_blocks, SeededRng& rng) {
        for (std::size_t i = 0; i < n_blocks; ++i) blocks.emplace_back(f, g, rng);
    }

    nn::Tensor operator()(const nn::Tensor& x) const {
        nn::Tensor h = x;
        for (const auto& b : blocks) h = b(h);
        return nn::add(x, nn::affine(h, 0.2));
    }

    void collect(const std::string& prefix, nn::ParamList& out) const override {
        for (std::size_t i = 0; i < blocks.size(); ++i) blocks[i].collect(nn::join(prefix, "dense" + std::to_string(i)), out);
    }
};

/// 2D path on a batch of slices [S, 1, h, w] -> [S, head_channels, gamma h, gamma w].
struct SliceNet final : nn::Module {
    nn::ConvLayer feature, trunk, out;
    std::vector<Rrdb> rrdb;
    nn::ConvTransposeLayer upsample;

    SliceNet() = default;
    SliceNet(const SrConfig& c, SeededRng& rng)
        : feature(nn::ConvLayer::square(1, c.base_features, 3, 1, 1, rng)),
          trunk(nn::ConvLayer::square(c.base_features, c.base_features, 3, 1, 1, rng)),
          out(nn::ConvLayer::square(c.base_features, c.head_channels, 3, 1, 1, rng)),
          upsample(2, c.base_features, c.base_features, {1, c.gamma, c.gamma}, {1, c.gamma, c.gamma}, rng) {
        for (std::size_t i = 0; i < c.n_rrdb; ++i) rrdb.emplace_back(c.base_features, c.growth, c.dense_blocks, rng);
    }

    nn::Tensor operator()(const nn::Tensor& x) const {
        nn::Tensor f = feature(x);
        nn::Tensor h = f;
        for (const auto& b : rrdb) h = b(h);
        h = nn::add(f, trunk(h));
        return out(nn::silu(upsample(h)));
    }

    void collect(const std::string& prefix, nn::ParamList& o) const override {
        feature.collect(nn::join(prefix, "feature"), o);
        for (std::size_t i = 0; i < rrdb.size(); ++i) rrdb[i].collect(nn::join(prefix, "rrdb" + std::to_string(i)), o);
        trunk.collect(nn::join(prefix, "trunk"), o);
        upsample.collect(nn::join(prefix, "upsample"), o);
        out.collect(nn::join(prefix, "out"), o);
    }
};

struct SrModel final : nn::Module {
    SrConfig cfg;
    SliceNet slice_net;
    nn::ConvTransposeLayer volume_head; // stride (gamma, 1, 1)

    SrModel() = default;
    SrModel(const SrConfig& c, SeededRng& rng) : cfg(c) {
        cfg.validate();
        slice_net = SliceNet(cfg, rng);
        const std::size_t g = cfg.gamma;
        volume_head = nn::ConvTransposeLayer(3, cfg.head_channels, 1, {2 * g, 3, 3}, {g, 1, 1}, rng);
        volume_head.pad = {g / 2, 1, 1};
    }

    void collect(const std::string& prefix, nn::ParamList& out) const override {
        slice_net.collect(nn::join(prefix, "slice_net"), out);
        volume_head.collect(nn::join(prefix, "volume_head"), out);
    }
};

/// Depth slices of a [1, 1, D, H, W] tensor as a batch [D, 1, H, W].
inline nn::Tensor slices_as_batch(const nn::Tensor& v) {
    return nn::reshape(v, {v.dim(2), 1, v.dim(3), v.dim(4)});
}

/// In-plane upsampled slice stack [1, C, D, gH, gW] (before the volume head).
inline nn::Tensor sr_slice_stack(const SrModel& m, const nn::Tensor& v) {
    if (v.rank() != 5 || v.dim(0) != 1 || v.dim(1) != 1) throw ShapeError("sr: expected a [1, 1, D, H, W] volume");
    nn::Tensor s = m.slice_net(slices_as_batch(v)); // [D, C, gH, gW]
    const std::size_t d = s.dim(0), c = s.dim(1), h = s.dim(2), w = s.dim(3);
    return nn::reshape(nn::permute(s, {1, 0, 2, 3}), {1, c, d, h, w});
}

inline nn::Tensor sr_forward_tensor(const SrModel& m, const nn::Tensor& v) {
    return m.volume_head(sr_slice_stack(m, v));
}

/// (h, w, d) -> (gamma h, gamma w, gamma d); spacing divided by gamma.
inline Volume sr_forward(const SrModel& m, const Volume& v) {
    nn::NoGradGuard g;
    const double k = double(m.cfg.gamma);
    const Spacing3 sp{v.spacing().x / k, v.spacing().y / k, v.spacing().z / k};
    return nn::tensor_to_volume(sr_forward_tensor(m, nn::volume_to_tensor(v)), sp, v.domain());
}

struct SrPair {
    Volume low;
    Volume high;
    std::optional<Volume> synthetic; // stage-2 output standing in for `low`
};

inline nn::Tensor sr_loss(const SrModel& m, const Volume& low, const Volume& high) {
    const std::size_t g = m.cfg.gamma;
    const Dims3 want{g * low.dims().x, g * low.dims().y, g * low.dims().z};
    if (high.dims() != want) throw ShapeError("sr: high-resolution dims must be gamma x low dims");
    return nn::l1_loss(sr_forward_tensor(m, nn::volume_to_tensor(low)), nn::volume_to_tensor(high));
}

/// L1 training; inputs are ground-truth downsamples, or stage-2 outputs when `use_synthetic_inputs`.
template <class OnEpoch>
std::vector<EpochLoss> train_sr(SrModel& m, const std::vector<SrPair>& pairs, nn::Adam& opt, const TrainOptions& o,
                                bool use_synthetic_inputs, OnEpoch&& on_epoch) {
    if (pairs.empty()) throw DomainError("train_sr: empty pair list");
    for (const auto& p : pairs) {
        if (use_synthetic_inputs && !p.synthetic) throw DomainError("train_sr: synthetic input missing for a pair");
        const Volume& in = use_synthetic_inputs ? *p.synthetic : p.low;
        const std::size_t g = m.cfg.gamma;
        if (p.high.dims() != Dims3{g * in.dims().x, g * in.dims().y, g * in.dims().z})
            throw ShapeError("train_sr: mismatched pair dims");
    }
    auto loss_of = [&](std::size_t i, SeededRng&) {
        return sr_loss(m, use_synthetic_inputs ? *pairs[i].synthetic : pairs[i].low, pairs[i].high);
    };
    return train_epochs(pairs.size(), opt, o, loss_of, on_epoch);
}

inline std::vector<EpochLoss> train_sr(SrModel& m, const std::vector<SrPair>& pairs, nn::Adam& opt,
                                       const TrainOptions& o, bool use_synthetic_inputs = false) {
    return train_sr(m, pairs, opt, o, use_synthetic_inputs, [](const EpochLoss&) {});
}

} // namespace axon
