#pragma once

#include <cstdint>
#include <numeric>
#include <vector>

#include "axon/error.hpp"
#include "axon/nn/adam.hpp"
#include "axon/nn/tensor.hpp"
#include "axon/voxcore.hpp"

namespace axon {

struct TrainOptions {
    std::size_t epochs = 1;
    std::uint64_t seed = 0;
    std::size_t start_epoch = 0; // epochs already completed (resume)
    std::size_t batch = 1;       // samples whose gradients are averaged per optimizer step
};

struct EpochLoss {
    std::size_t epoch = 0; // 1-based
    double mean_loss = 0;
};

/// Order in which epoch `epoch` visits `n` items: a seeded Fisher-Yates permutation.
inline std::vector<std::size_t> epoch_order(std::size_t n, std::uint64_t seed, std::size_t epoch) {
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    SeededRng rng(seed, 0x5EED0000ULL + epoch);
    for (std::size_t i = n; i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
    return order;
}

/// Shared epoch loop. `loss_of(item, rng)` builds the loss graph for one item; each item
/// gets its own noise stream keyed by (epoch, position), so a resumed run replays exactly.
template <class LossOf, class OnEpoch>
std::vector<EpochLoss> train_epochs(std::size_t n_items, nn::Adam& opt, const TrainOptions& o, LossOf&& loss_of,
                                    OnEpoch&& on_epoch) {
    if (n_items == 0) throw DomainError("training: empty dataset");
    if (o.batch == 0) throw ConfigError("training: batch must be >= 1");
    std::vector<EpochLoss> log;
    for (std::size_t e = o.start_epoch; e < o.start_epoch + o.epochs; ++e) {
        double total = 0;
        const auto order = epoch_order(n_items, o.seed, e);
        for (std::size_t k0 = 0; k0 < n_items; k0 += o.batch) {
            const std::size_t k1 = std::min(n_items, k0 + o.batch);
            opt.zero_grad();
            for (std::size_t k = k0; k < k1; ++k) {
                SeededRng rng(o.seed, (std::uint64_t(e) << 32) | k);
                nn::Tensor loss = loss_of(order[k], rng);
                total += loss.item();
                nn::affine(loss, 1.0 / double(k1 - k0)).backward();
            }
            opt.step();
        }
        log.push_back({e + 1, total / double(n_items)});
        on_epoch(log.back());
    }
    return log;
}

} // namespace axon
