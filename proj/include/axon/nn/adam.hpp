#pragma once

#include <cmath>
#include <map>
#include <string>
#include <vector>

#include "axon/nn/layers.hpp"

namespace axon::nn {

struct AdamConfig {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double grad_clip = 0.0; // global L2 norm clip; 0 disables
};

/// Bias-corrected Adam over a fixed parameter list.
class Adam {
public:
    Adam(ParamList params, AdamConfig cfg = {}) : params_(std::move(params)), cfg_(cfg) {
        for (auto& [name, t] : params_) {
            m_.emplace_back(t.size(), 0.0);
            v_.emplace_back(t.size(), 0.0);
        }
    }

    const AdamConfig& config() const { return cfg_; }
    void set_lr(double lr) { cfg_.lr = lr; }
    std::size_t steps() const { return step_; }

    void zero_grad() {
        for (auto& [name, t] : params_) t.zero_grad();
    }

    /// Applies one update. Every trainable parameter must have a gradient.
    void step() {
        double scale = 1.0;
        if (cfg_.grad_clip > 0) {
            double sq = 0;
            for (auto& [name, t] : params_)
                if (t.requires_grad() && t.has_grad())
                    for (double g : t.grad()) sq += g * g;
            const double norm = std::sqrt(sq);
            if (norm > cfg_.grad_clip) scale = cfg_.grad_clip / norm;
        }
        ++step_;
        const double bc1 = 1.0 - std::pow(cfg_.beta1, double(step_));
        const double bc2 = 1.0 - std::pow(cfg_.beta2, double(step_));
        for (std::size_t i = 0; i < params_.size(); ++i) {
            auto& [name, t] = params_[i];
            if (!t.requires_grad()) continue;
            if (!t.has_grad()) throw Error("adam: parameter '" + name + "' has no gradient");
            auto w = t.data();
            auto g = t.grad();
            auto& m = m_[i];
            auto& v = v_[i];
            for (std::size_t k = 0; k < w.size(); ++k) {
                const double gk = g[k] * scale;
                m[k] = cfg_.beta1 * m[k] + (1 - cfg_.beta1) * gk;
                v[k] = cfg_.beta2 * v[k] + (1 - cfg_.beta2) * gk * gk;
                w[k] -= cfg_.lr * (m[k] / bc1) / (std::sqrt(v[k] / bc2) + cfg_.eps);
            }
        }
    }

    /// Moment buffers as named tensors (for checkpointing) and their restore.
    ParamList state() const {
        ParamList out;
        for (std::size_t i = 0; i < params_.size(); ++i) {
            out.emplace_back("m." + params_[i].first, Tensor(params_[i].second.shape(), m_[i]));
            out.emplace_back("v." + params_[i].first, Tensor(params_[i].second.shape(), v_[i]));
        }
        out.emplace_back("step", Tensor::scalar(double(step_)));
        return out;
    }

    void load_state(const ParamList& st) {
        std::map<std::string, const Tensor*> by;
        for (auto& [n, t] : st) by[n] = &t;
        auto fetch = [&](const std::string& n, std::size_t len) -> const Tensor& {
            auto it = by.find(n);
            if (it == by.end() || it->second->size() != len) throw Error("adam state missing or mismatched: " + n);
            return *it->second;
        };
        for (std::size_t i = 0; i < params_.size(); ++i) {
            const auto& m = fetch("m." + params_[i].first, m_[i].size());
            const auto& v = fetch("v." + params_[i].first, v_[i].size());
            m_[i].assign(m.data().begin(), m.data().end());
            v_[i].assign(v.data().begin(), v.data().end());
        }
        step_ = std::size_t(std::llround(fetch("step", 1).item()));
    }

private:
    ParamList params_;
    AdamConfig cfg_;
    std::vector<std::vector<double>> m_, v_;
    std::size_t step_ = 0;
};

} // namespace axon::nn
