#pragma once

#include <cmath>
#include <map>
#include <numeric>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "axon/nn/conv.hpp"
#include "axon/nn/tensor.hpp"
#include "axon/voxcore.hpp"

namespace axon::nn {

using ParamList = std::vector<std::pair<std::string, Tensor>>;

/// A parameterized network piece. Copies share parameter storage; use
/// copy_parameters_from for a deep copy of values between two instances.
class Module {
public:
    virtual ~Module() = default;

    /// Appends every parameter under `prefix` in a fixed order.
    virtual void collect(const std::string& prefix, ParamList& out) const = 0;

    ParamList parameters() const {
        ParamList p;
        collect("", p);
        return p;
    }

    std::size_t param_count() const {
        std::size_t n = 0;
        for (const auto& [name, t] : parameters()) n += t.size();
        return n;
    }

    void zero_grad() const {
        for (auto& [name, t] : parameters()) t.zero_grad();
    }

    void set_trainable(bool trainable) const {
        for (auto& [name, t] : parameters()) t.set_requires_grad(trainable);
    }

    /// Copies values of every same-named, same-shaped parameter from `src`; returns the count copied.
    std::size_t copy_parameters_from(const Module& src) const {
        std::map<std::string, Tensor> by_name;
        for (auto& [name, t] : src.parameters()) by_name.emplace(name, t);
        std::size_t copied = 0;
        for (auto& [name, t] : parameters()) {
            auto it = by_name.find(name);
            if (it == by_name.end() || it->second.shape() != t.shape()) continue;
            auto dst = t.data();
            std::copy(it->second.data().begin(), it->second.data().end(), dst.begin());
            ++copied;
        }
        return copied;
    }
};

inline std::string join(const std::string& prefix, const std::string& name) {
    return prefix.empty() ? name : prefix + "." + name;
}

/// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) initialization.
inline Tensor init_uniform(Shape shape, std::size_t fan_in, SeededRng& rng, double gain = 1.0) {
    Tensor t(std::move(shape), 0.0, true);
    const double bound = gain / std::sqrt(double(std::max<std::size_t>(fan_in, 1)));
    for (auto& v : t.data()) v = rng.uniform(-bound, bound);
    return t;
}

/// Largest of {4, 2, 1} groups that divides `channels`.
inline std::size_t default_groups(std::size_t channels) {
    for (std::size_t g : {4u, 2u, 1u})
        if (channels % g == 0 && channels >= g) return g;
    return 1;
}

/// Convolution layer over 2 or 3 spatial axes.
struct ConvLayer final : Module {
    Tensor weight, bias;
    Int3 stride{1, 1, 1}, pad{0, 0, 0};
    int spatial_rank = 3;

    ConvLayer() = default;
    ConvLayer(int spatial_rank, std::size_t c_in, std::size_t c_out, Int3 kernel, Int3 stride, Int3 pad,
              SeededRng& rng, bool zero_init = false)
        : stride(stride), pad(pad), spatial_rank(spatial_rank) {
        Shape ws = spatial_rank == 3 ? Shape{c_out, c_in, kernel[0], kernel[1], kernel[2]}
                                     : Shape{c_out, c_in, kernel[1], kernel[2]};
        const std::size_t fan_in = c_in * kernel[0] * kernel[1] * kernel[2];
        weight = zero_init ? Tensor(ws, 0.0, true) : init_uniform(ws, fan_in, rng);
        bias = zero_init ? Tensor({c_out}, 0.0, true) : init_uniform({c_out}, fan_in, rng);
    }

    static ConvLayer cube(std::size_t c_in, std::size_t c_out, std::size_t k, std::size_t stride,
                          std::size_t pad, SeededRng& rng, bool zero_init = false) {
        return ConvLayer(3, c_in, c_out, {k, k, k}, {stride, stride, stride}, {pad, pad, pad}, rng, zero_init);
    }
    static ConvLayer square(std::size_t c_in, std::size_t c_out, std::size_t k, std::size_t stride,
                            std::size_t pad, SeededRng& rng) {
        return ConvLayer(2, c_in, c_out, {1, k, k}, {1, stride, stride}, {0, pad, pad}, rng);
    }

    std::size_t in_channels() const { return weight.dim(1); }
    std::size_t out_channels() const { return weight.dim(0); }

    Tensor operator()(const Tensor& x) const { return conv(x, weight, bias, stride, pad); }

    void collect(const std::string& prefix, ParamList& out) const override {
        out.emplace_back(join(prefix, "weight"), weight);
        out.emplace_back(join(prefix, "bias"), bias);
    }
};

/// Transposed convolution layer; weight [C_in, C_out, k...].
struct ConvTransposeLayer final : Module {
    Tensor weight, bias;
    Int3 stride{1, 1, 1}, pad{0, 0, 0};

    ConvTransposeLayer() = default;
    ConvTransposeLayer(int spatial_rank, std::size_t c_in, std::size_t c_out, Int3 kernel, Int3 stride,
                       SeededRng& rng)
        : stride(stride) {
        Shape ws = spatial_rank == 3 ? Shape{c_in, c_out, kernel[0], kernel[1], kernel[2]}
                                     : Shape{c_in, c_out, kernel[1], kernel[2]};
        // fan-in of each output element: c_in * (k / stride) taps per axis
        std::size_t taps = c_in;
        for (int i = 0; i < 3; ++i) taps *= std::max<std::size_t>(1, kernel[i] / std::max<std::size_t>(stride[i], 1));
        weight = init_uniform(ws, taps, rng);
        bias = init_uniform({c_out}, taps, rng);
    }

    Tensor operator()(const Tensor& x) const { return conv_transpose(x, weight, bias, stride, pad); }

    void collect(const std::string& prefix, ParamList& out) const override {
        out.emplace_back(join(prefix, "weight"), weight);
        out.emplace_back(join(prefix, "bias"), bias);
    }
};

struct GroupNormLayer final : Module {
    std::size_t groups = 1;
    Tensor gamma, beta;

    GroupNormLayer() = default;
    GroupNormLayer(std::size_t channels, std::size_t groups)
        : groups(groups), gamma({channels}, 1.0, true), beta({channels}, 0.0, true) {
        if (groups == 0 || channels % groups != 0)
            throw ShapeError("group norm: " + std::to_string(channels) + " channels not divisible by " +
                             std::to_string(groups) + " groups");
    }

    Tensor operator()(const Tensor& x) const { return group_norm(x, groups, gamma, beta); }

    void collect(const std::string& prefix, ParamList& out) const override {
        out.emplace_back(join(prefix, "gamma"), gamma);
        out.emplace_back(join(prefix, "beta"), beta);
    }
};

struct LinearLayer final : Module {
    Tensor weight, bias;

    LinearLayer() = default;
    LinearLayer(std::size_t in, std::size_t out, SeededRng& rng)
        : weight(init_uniform({out, in}, in, rng)), bias(init_uniform({out}, in, rng)) {}

    Tensor operator()(const Tensor& x) const { return linear(x, weight, bias); }

    void collect(const std::string& prefix, ParamList& out) const override {
        out.emplace_back(join(prefix, "weight"), weight);
        out.emplace_back(join(prefix, "bias"), bias);
    }
};

/// conv3 -> (+ time projection) -> GN -> SiLU -> conv3 -> GN -> SiLU, plus a (1x1x1) skip.
struct ResBlock3d final : Module {
    ConvLayer conv1, conv2;
    std::optional<LinearLayer> time_proj;
    GroupNormLayer norm1, norm2;
    std::optional<ConvLayer> skip;

    ResBlock3d() = default;
    ResBlock3d(std::size_t c_in, std::size_t c_out, std::size_t temb_dim, SeededRng& rng)
        : conv1(ConvLayer::cube(c_in, c_out, 3, 1, 1, rng)),
          conv2(ConvLayer::cube(c_out, c_out, 3, 1, 1, rng)),
          norm1(c_out, default_groups(c_out)),
          norm2(c_out, default_groups(c_out)) {
        if (temb_dim > 0) time_proj.emplace(temb_dim, c_out, rng);
        if (c_in != c_out) skip = ConvLayer::cube(c_in, c_out, 1, 1, 0, rng);
    }

    Tensor operator()(const Tensor& x, const Tensor* temb) const {
        Tensor h = conv1(x);
        if (time_proj && temb) h = add_channelwise(h, (*time_proj)(*temb));
        h = silu(norm1(h));
        h = silu(norm2(conv2(h)));
        return add(h, skip ? (*skip)(x) : x);
    }

    void collect(const std::string& prefix, ParamList& out) const override {
        conv1.collect(join(prefix, "conv1"), out);
        if (time_proj) time_proj->collect(join(prefix, "time_proj"), out);
        norm1.collect(join(prefix, "norm1"), out);
        conv2.collect(join(prefix, "conv2"), out);
        norm2.collect(join(prefix, "norm2"), out);
        if (skip) skip->collect(join(prefix, "skip"), out);
    }
};

struct UNetConfig {
    std::size_t in_channels = 1;
    std::size_t cond_channels = 0;
    std::size_t out_channels = 1;
    std::size_t base_channels = 8;
    std::vector<std::size_t> channel_mults{1, 2, 4};
    std::size_t time_dim = 0; // 0 -> 4 * base_channels

    std::size_t levels() const { return channel_mults.size(); }
    std::size_t channels(std::size_t level) const { return base_channels * channel_mults.at(level); }
    std::size_t temb_dim() const { return time_dim ? time_dim : 4 * base_channels; }

    void validate() const {
        if (channel_mults.empty()) throw ConfigError("U-Net needs at least one resolution level");
        if (in_channels == 0 || out_channels == 0 || base_channels == 0)
            throw ConfigError("U-Net channel counts must be positive");
        for (auto m : channel_mults)
            if (m == 0) throw ConfigError("U-Net channel multipliers must be positive");
        if (temb_dim() % 2 != 0) throw ConfigError("U-Net time embedding dim must be even");
    }
};

struct EncoderFeatures {
    std::vector<Tensor> levels; // per-level features after the residual blocks
    Tensor temb;
};

/// Input convolution, timestep MLP and the downsampling half of the U-Net.
struct UNetEncoder final : Module {
    UNetConfig cfg;
    ConvLayer in_conv;
    LinearLayer time1, time2;
    std::vector<ResBlock3d> block_a, block_b;
    std::vector<ConvLayer> down;

    UNetEncoder() = default;
    UNetEncoder(const UNetConfig& c, std::size_t input_channels, SeededRng& rng) : cfg(c) {
        cfg.validate();
        const std::size_t e = cfg.temb_dim();
        in_conv = ConvLayer::cube(input_channels, cfg.channels(0), 3, 1, 1, rng);
        time1 = LinearLayer(e, e, rng);
        time2 = LinearLayer(e, e, rng);
        for (std::size_t l = 0; l < cfg.levels(); ++l) {
            block_a.emplace_back(cfg.channels(l), cfg.channels(l), e, rng);
            block_b.emplace_back(cfg.channels(l), cfg.channels(l), e, rng);
            if (l + 1 < cfg.levels()) down.push_back(ConvLayer::cube(cfg.channels(l), cfg.channels(l + 1), 2, 2, 0, rng));
        }
    }

    EncoderFeatures operator()(const Tensor& x, std::span<const double> t) const {
        if (x.rank() != 5) throw ShapeError("U-Net expects [N, C, D, H, W], got " + shape_str(x.shape()));
        if (t.size() != x.dim(0)) throw ShapeError("U-Net needs one timestep per batch element");
        const std::size_t factor = std::size_t(1) << (cfg.levels() - 1);
        for (std::size_t a = 2; a < 5; ++a)
            if (x.dim(a) % factor != 0)
                throw ShapeError("U-Net spatial extent " + std::to_string(x.dim(a)) + " not divisible by " +
                                 std::to_string(factor));
        EncoderFeatures f;
        f.temb = time2(silu(time1(time_embedding(t, cfg.temb_dim()))));
        Tensor h = in_conv(x);
        for (std::size_t l = 0; l < cfg.levels(); ++l) {
            h = block_b[l](block_a[l](h, &f.temb), &f.temb);
            f.levels.push_back(h);
            if (l + 1 < cfg.levels()) h = down[l](h);
        }
        return f;
    }

    void collect(const std::string& prefix, ParamList& out) const override {
        in_conv.collect(join(prefix, "in_conv"), out);
        time1.collect(join(prefix, "time1"), out);
        time2.collect(join(prefix, "time2"), out);
        for (std::size_t l = 0; l < block_a.size(); ++l) {
            block_a[l].collect(join(prefix, "level" + std::to_string(l) + ".a"), out);
            block_b[l].collect(join(prefix, "level" + std::to_string(l) + ".b"), out);
            if (l < down.size()) down[l].collect(join(prefix, "level" + std::to_string(l) + ".down"), out);
        }
    }
};

/// 3D U-Net: encoder-decoder with skip concatenation; the condition (if any) is
/// concatenated to the state channels at the input. Optional per-level residuals
/// (a control branch) are added to the skip features and to the bottleneck.
struct UNet3d final : Module {
    UNetConfig cfg;
    UNetEncoder encoder;
    std::vector<ConvTransposeLayer> up;
    std::vector<ResBlock3d> dec_a, dec_b;
    ConvLayer out_conv;

    UNet3d() = default;
    UNet3d(const UNetConfig& c, SeededRng& rng) : cfg(c), encoder(c, c.in_channels + c.cond_channels, rng) {
        const std::size_t e = cfg.temb_dim();
        for (std::size_t l = 0; l + 1 < cfg.levels(); ++l) {
            up.emplace_back(3, cfg.channels(l + 1), cfg.channels(l), Int3{2, 2, 2}, Int3{2, 2, 2}, rng);
            dec_a.emplace_back(2 * cfg.channels(l), cfg.channels(l), e, rng);
            dec_b.emplace_back(cfg.channels(l), cfg.channels(l), e, rng);
        }
        out_conv = ConvLayer::cube(cfg.channels(0), cfg.out_channels, 3, 1, 1, rng);
    }

    Tensor operator()(const Tensor& x, const Tensor* cond, std::span<const double> t,
                      const std::vector<Tensor>* residuals = nullptr) const {
        if (x.rank() != 5 || x.dim(1) != cfg.in_channels)
            throw ShapeError("U-Net state input must be [N, " + std::to_string(cfg.in_channels) + ", D, H, W], got " +
                             shape_str(x.shape()));
        Tensor input = x;
        if (cfg.cond_channels > 0) {
            if (!cond || cond->rank() != 5 || cond->dim(1) != cfg.cond_channels)
                throw ShapeError("U-Net condition must have " + std::to_string(cfg.cond_channels) + " channels");
            input = concat_channels(x, *cond);
        } else if (cond) {
            throw ShapeError("U-Net configured without condition channels");
        }
        if (residuals && residuals->size() != cfg.levels())
            throw ShapeError("control residual count does not match U-Net levels");
        auto feats = encoder(input, t);
        auto with_res = [&](std::size_t l) {
            return residuals ? add(feats.levels[l], (*residuals)[l]) : feats.levels[l];
        };
        Tensor h = with_res(cfg.levels() - 1);
        for (std::size_t l = cfg.levels() - 1; l-- > 0;) {
            h = up[l](h);
            h = concat_channels(h, with_res(l));
            h = dec_b[l](dec_a[l](h, &feats.temb), &feats.temb);
        }
        return out_conv(h);
    }

    void collect(const std::string& prefix, ParamList& out) const override {
        encoder.collect(join(prefix, "enc"), out);
        for (std::size_t l = 0; l < up.size(); ++l) {
            up[l].collect(join(prefix, "dec" + std::to_string(l) + ".up"), out);
            dec_a[l].collect(join(prefix, "dec" + std::to_string(l) + ".a"), out);
            dec_b[l].collect(join(prefix, "dec" + std::to_string(l) + ".b"), out);
        }
        out_conv.collect(join(prefix, "out_conv"), out);
    }
};

inline UNet3d build_unet3d(std::size_t base_channels, std::vector<std::size_t> channel_mults, std::size_t in_ch,
                           std::size_t out_ch, std::size_t cond_ch, SeededRng& rng) {
    UNetConfig c;
    c.base_channels = base_channels;
    c.channel_mults = std::move(channel_mults);
    c.in_channels = in_ch;
    c.out_channels = out_ch;
    c.cond_channels = cond_ch;
    return UNet3d(c, rng);
}

/// Trainable copy of a U-Net encoder fed with [state, condition]; each level's
/// features pass through a zero-initialized 1x1x1 projection, so a fresh branch
/// contributes exactly zero.
struct ControlBranch final : Module {
    UNetEncoder encoder;
    std::vector<ConvLayer> zero_proj;

    ControlBranch() = default;
    ControlBranch(const UNet3d& backbone, std::size_t cond_channels, SeededRng& rng)
        : encoder(backbone.cfg, backbone.cfg.in_channels + backbone.cfg.cond_channels + cond_channels, rng) {
        // Initialize from the backbone: every same-shaped tensor is copied; the input
        // convolution keeps the backbone weights for the state channels and zeros for the
        // added condition channels.
        encoder.copy_parameters_from(backbone.encoder);
        const auto& src = backbone.encoder.in_conv.weight;
        auto dst = encoder.in_conv.weight.data();
        const std::size_t co = src.dim(0), ci_src = src.dim(1), ci_dst = encoder.in_conv.weight.dim(1);
        const std::size_t kvol = src.size() / (co * ci_src);
        std::fill(dst.begin(), dst.end(), 0.0);
        for (std::size_t o = 0; o < co; ++o)
            for (std::size_t i = 0; i < ci_src; ++i)
                for (std::size_t k = 0; k < kvol; ++k)
                    dst[(o * ci_dst + i) * kvol + k] = src.data()[(o * ci_src + i) * kvol + k];
        std::copy(backbone.encoder.in_conv.bias.data().begin(), backbone.encoder.in_conv.bias.data().end(),
                  encoder.in_conv.bias.data().begin());
        for (std::size_t l = 0; l < backbone.cfg.levels(); ++l) {
            const std::size_t c = backbone.cfg.channels(l);
            zero_proj.push_back(ConvLayer::cube(c, c, 1, 1, 0, rng, /*zero_init=*/true));
        }
    }

    std::vector<Tensor> operator()(const Tensor& state, const Tensor& cond, std::span<const double> t) const {
        auto feats = encoder(concat_channels(state, cond), t);
        std::vector<Tensor> out;
        for (std::size_t l = 0; l < feats.levels.size(); ++l) out.push_back(zero_proj[l](feats.levels[l]));
        return out;
    }

    void collect(const std::string& prefix, ParamList& out) const override {
        encoder.collect(join(prefix, "enc"), out);
        for (std::size_t l = 0; l < zero_proj.size(); ++l) zero_proj[l].collect(join(prefix, "zero" + std::to_string(l)), out);
    }
};

// ---------------------------------------------------------------------------
// Volume <-> tensor helpers. A Volume maps to [1, 1, D=z, H=y, W=x].

inline Tensor volume_to_tensor(const Volume& v) {
    const auto& d = v.dims();
    return Tensor({1, 1, d.z, d.y, d.x}, std::vector<double>(v.data().begin(), v.data().end()));
}

inline Tensor volumes_to_batch(const std::vector<const Volume*>& vs) {
    if (vs.empty()) throw ShapeError("empty volume batch");
    const auto& d = vs[0]->dims();
    std::vector<double> data;
    data.reserve(vs.size() * d.count());
    for (const Volume* v : vs) {
        if (v->dims() != d) throw ShapeError("volume batch with mixed dims");
        data.insert(data.end(), v->data().begin(), v->data().end());
    }
    return Tensor({vs.size(), 1, d.z, d.y, d.x}, std::move(data));
}

/// Item `n`, channel `c` of a [N, C, D, H, W] tensor as a Volume.
inline Volume tensor_to_volume(const Tensor& t, Spacing3 spacing, Domain domain, std::size_t n = 0,
                               std::size_t c = 0) {
    if (t.rank() != 5) throw ShapeError("tensor_to_volume expects a rank-5 tensor");
    const Dims3 d{t.dim(4), t.dim(3), t.dim(2)};
    const std::size_t off = (n * t.dim(1) + c) * d.count();
    return Volume(d, spacing, std::vector<double>(t.data().begin() + std::ptrdiff_t(off),
                                                  t.data().begin() + std::ptrdiff_t(off + d.count())),
                  domain);
}

inline Tensor projection_to_tensor(const Projection& p) {
    return Tensor({1, 1, p.nv(), p.nu()}, std::vector<double>(p.data().begin(), p.data().end()));
}

} // namespace axon::nn
