#include "stfbnn/sgd.hpp"

namespace stfbnn {

void SgdConfig::validate() const
{
    if (!(learning_rate >= 0.0)) {
        throw InputError("sgd: learning_rate must be nonnegative");
    }
    if (!(momentum >= 0.0 && momentum < 1.0)) {
        throw InputError("sgd: momentum must lie in [0, 1)");
    }
    if (!(weight_decay >= 0.0)) {
        throw InputError("sgd: weight_decay must be nonnegative");
    }
    for (std::size_t i = 1; i < schedule.size(); ++i) {
        if (schedule[i].first <= schedule[i - 1].first) {
            throw InputError("sgd: schedule epochs must be strictly increasing");
        }
    }
}

double SgdConfig::rate_at(int epoch) const
{
    double lr = learning_rate;
    for (const auto& [at, mult] : schedule) {
        if (epoch >= at) {
            lr *= mult;
        }
    }
    return lr;
}

SgdState SgdState::zeros_like(const Mlp& model)
{
    SgdState s;
    for (const auto& l : model.layers()) {
        s.weight_velocity.push_back(Matrix::Zero(l.weight.rows(), l.weight.cols()));
        s.bias_velocity.push_back(Vector::Zero(l.bias.size()));
    }
    return s;
}

void sgd_step(Mlp& model, const Gradients& grads, SgdState& state, const SgdConfig& cfg, double lr,
              const std::vector<bool>& trainable)
{
    if (state.weight_velocity.size() != model.depth()) {
        state = SgdState::zeros_like(model);
    }
    for (std::size_t k = 0; k < model.depth(); ++k) {
        if (!trainable.empty() && !trainable[k]) {
            continue;
        }
        if (grads.weight[k].size() == 0) {
            throw UsageError("sgd_step: no gradient for trainable layer " + std::to_string(k + 1));
        }
        model.update_layer(k, [&](DenseLayer& l) {
            require_dims(grads.weight[k].rows(), l.weight.rows(), "sgd_step gradient rows");
            require_dims(grads.weight[k].cols(), l.weight.cols(), "sgd_step gradient cols");
            sgd_update(l.weight, grads.weight[k], state.weight_velocity[k], lr, cfg.momentum, cfg.weight_decay);
            sgd_update(l.bias, grads.bias[k], state.bias_velocity[k], lr, cfg.momentum, cfg.weight_decay);
        });
    }
}

} // namespace stfbnn
