#pragma once

#include "stfbnn/mlp.hpp"

#include <utility>
#include <vector>

namespace stfbnn {

struct SgdConfig {
    double learning_rate = 0.1;
    double momentum = 0.9;
    double weight_decay = 5e-4;
    /// (epoch, multiplier): from that 0-based epoch on, the rate is multiplied by `multiplier`.
    std::vector<std::pair<int, double>> schedule;

    void validate() const;
    double rate_at(int epoch) const;
};

/// One heavy-ball step with coupled L2 decay: v <- m v + g + wd p ; p <- p - lr v.
template <typename P, typename G, typename V>
void sgd_update(Eigen::MatrixBase<P>& param, const Eigen::MatrixBase<G>& grad, Eigen::MatrixBase<V>& velocity,
                double lr, double momentum, double weight_decay)
{
    velocity = momentum * velocity + grad + weight_decay * param;
    param -= lr * velocity;
}

struct SgdState {
    std::vector<Matrix> weight_velocity;
    std::vector<Vector> bias_velocity;

    static SgdState zeros_like(const Mlp& model);
};

/// Applies sgd_update to every layer with `trainable[k]` set (all layers when empty).
void sgd_step(Mlp& model, const Gradients& grads, SgdState& state, const SgdConfig& cfg, double lr,
              const std::vector<bool>& trainable = {});

} // namespace stfbnn
