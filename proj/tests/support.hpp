#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "axon/nn/layers.hpp"
#include "axon/voxcore.hpp"

namespace axon::testing {

inline nn::Tensor random_tensor(nn::Shape s, SeededRng& rng, double scale = 1.0, bool grad = false) {
    nn::Tensor t(s, 0.0, grad);
    for (auto& v : t.data()) v = rng.uniform(-scale, scale);
    return t;
}

inline Volume random_volume(Dims3 d, SeededRng& rng, double lo = -1, double hi = 1,
                            Domain dom = Domain::NormalizedPM1) {
    Volume v(d, {1, 1, 1}, 0.0, dom);
    for (auto& x : v.data()) x = rng.uniform(lo, hi);
    return v;
}

struct FdResult {
    double max_rel = 0;
    std::size_t probes = 0;
};

// Central differences of a scalar loss against the analytic gradient at randomly
// chosen entries of `params`. Relative error uses max(|a|, |n|, floor).
inline FdResult fd_check(const std::function<nn::Tensor()>& loss, std::vector<nn::Tensor> params,
                         std::size_t probes, SeededRng& rng, double h = 1e-5, double floor = 1e-6) {
    for (auto& p : params) p.zero_grad();
    loss().backward();
    std::vector<std::vector<double>> analytic;
    for (auto& p : params) {
        if (p.has_grad()) analytic.emplace_back(p.grad().begin(), p.grad().end());
        else analytic.emplace_back(p.size(), 0.0);
    }
    FdResult r;
    nn::NoGradGuard ng;
    for (std::size_t k = 0; k < probes; ++k) {
        const std::size_t pi = rng.below(params.size());
        auto& p = params[pi];
        const std::size_t i = rng.below(p.size());
        const double v0 = p.data()[i];
        p.data()[i] = v0 + h;
        const double fp = loss().item();
        p.data()[i] = v0 - h;
        const double fm = loss().item();
        p.data()[i] = v0;
        const double num = (fp - fm) / (2 * h), a = analytic[pi][i];
        const double rel = std::abs(a - num) / std::max({std::abs(a), std::abs(num), floor});
        r.max_rel = std::max(r.max_rel, rel);
        ++r.probes;
    }
    return r;
}

inline std::vector<nn::Tensor> tensors_of(const nn::ParamList& ps) {
    std::vector<nn::Tensor> out;
    for (const auto& [n, t] : ps)
        if (t.requires_grad()) out.push_back(t);
    return out;
}

/// Fresh scratch directory under the system temp dir.
inline std::filesystem::path scratch_dir(const std::string& name) {
    const auto p = std::filesystem::temp_directory_path() / ("axon_test_" + name);
    std::filesystem::remove_all(p);
    std::filesystem::create_directories(p);
    return p;
}

} // namespace axon::testing
