#pragma once

#include "stfbnn/sgd.hpp"

#include <functional>

namespace stfbnn {

struct TrainConfig {
    int epochs = 50;
    std::size_t batch_size = 128;
    SgdConfig sgd;
    /// Early stop once the train loss improved by less than `min_improvement`
    /// over the last `patience` epochs (0 disables).
    int patience = 0;
    double min_improvement = 1e-4;

    void validate() const;
};

struct TrainHooks {
    /// Layers receiving updates; empty means all. Frozen layers are never written.
    std::vector<bool> trainable;
    /// Replaces each batch's inputs before the step (adversarial training).
    std::function<Matrix(const Mlp&, const Matrix&, const Labels&)> perturb;
    /// Called after every optimizer step with the 0-based epoch.
    std::function<void(int, const Mlp&)> after_step;
};

struct TrainResult {
    Mlp model;
    std::vector<double> loss_curve; // mean train loss per epoch
    int epochs_run = 0;
};

/// Shuffled minibatch indices for one epoch; the last partial batch is kept.
std::vector<std::vector<std::size_t>> epoch_batches(std::size_t m, std::size_t batch_size, Prng& prng);

Matrix gather_rows(const Matrix& x, const std::vector<std::size_t>& rows);
Labels gather(const Labels& y, const std::vector<std::size_t>& rows);

/// Minibatch SGD on the classification loss. Batch order is reshuffled each
/// epoch from `prng`. Throws TrainingError carrying the epoch if the loss turns
/// non-finite.
TrainResult train_deterministic(Mlp model, const Matrix& x, const Labels& y, const TrainConfig& cfg, Prng& prng,
                                const TrainHooks& hooks = {});

} // namespace stfbnn
