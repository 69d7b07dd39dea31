#pragma once
//
// Timestep coefficient tables. Timesteps are 1-indexed; index 0 is the clean
// state, so every table has T + 1 entries.
//

#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "axon/error.hpp"

namespace axon {

/// Brownian-bridge interpolation and variance schedule:
/// alpha_t = t / T, delta_t = 2 * s_max * (alpha_t - alpha_t^2).
struct BridgeSchedule {
    int T = 0;
    double s_max = 1.0;
    std::vector<double> alpha;
    std::vector<double> delta;
};

inline BridgeSchedule bridge_schedule(int T, double s_max = 1.0) {
    if (T < 2) throw DomainError("bridge schedule needs T >= 2, got " + std::to_string(T));
    if (!(s_max > 0)) throw DomainError("bridge schedule needs s_max > 0");
    BridgeSchedule s{T, s_max, std::vector<double>(std::size_t(T) + 1),
                     std::vector<double>(std::size_t(T) + 1)};
    for (int t = 0; t <= T; ++t) {
        const double a = double(t) / double(T);
        s.alpha[std::size_t(t)] = a;
        s.delta[std::size_t(t)] = 2.0 * s_max * (a - a * a);
    }
    // Exact endpoints regardless of rounding in the formula.
    s.alpha[0] = 0.0;
    s.alpha[std::size_t(T)] = 1.0;
    s.delta[0] = 0.0;
    s.delta[std::size_t(T)] = 0.0;
    return s;
}

/// Linear-beta DDPM schedule; alpha_bar[0] = 1 by convention.
struct DdpmSchedule {
    int T = 0;
    double beta_start = 0, beta_end = 0;
    std::vector<double> beta;      // beta[0] unused (0)
    std::vector<double> alpha_bar; // alpha_bar[0] = 1
};

inline DdpmSchedule ddpm_schedule(int T, double beta_start = 1e-4, double beta_end = 2e-2) {
    if (T < 1) throw DomainError("ddpm schedule needs T >= 1");
    if (!(beta_start > 0 && beta_start <= beta_end && beta_end < 1))
        throw DomainError("ddpm schedule needs 0 < beta_start <= beta_end < 1");
    DdpmSchedule s{T, beta_start, beta_end, std::vector<double>(std::size_t(T) + 1, 0.0),
                   std::vector<double>(std::size_t(T) + 1, 1.0)};
    for (int t = 1; t <= T; ++t) {
        const double b = T == 1 ? beta_start
                                : beta_start + (beta_end - beta_start) * double(t - 1) / double(T - 1);
        s.beta[std::size_t(t)] = b;
        s.alpha_bar[std::size_t(t)] = s.alpha_bar[std::size_t(t) - 1] * (1.0 - b);
    }
    return s;
}

/// Strictly increasing subsequence of [1, T] ending at T.
struct DdimPlan {
    std::vector<int> steps;
    double eta = 0.0;
};

inline DdimPlan ddim_plan(int T, int n_steps, double eta = 0.0) {
    if (n_steps < 1) throw DomainError("ddim plan needs at least one step");
    if (n_steps > T) throw DomainError("ddim plan cannot have more steps than T");
    if (!(eta >= 0.0 && eta <= 1.0)) throw DomainError("ddim eta must lie in [0, 1]");
    DdimPlan plan{{}, eta};
    for (int k = 1; k <= n_steps; ++k) {
        const int t = int(std::lround(double(k) * double(T) / double(n_steps)));
        if (t >= 1 && (plan.steps.empty() || t > plan.steps.back())) plan.steps.push_back(t);
    }
    if (plan.steps.back() != T) plan.steps.push_back(T);
    return plan;
}

} // namespace axon
