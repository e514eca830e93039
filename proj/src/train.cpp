#include "stfbnn/train.hpp"

#include <algorithm>
#include <cmath>

namespace stfbnn {

void TrainConfig::validate() const
{
    if (epochs < 0) {
        throw InputError("train: epochs must be nonnegative");
    }
    if (batch_size < 1) {
        throw InputError("train: batch_size must be at least 1");
    }
    if (patience < 0) {
        throw InputError("train: patience must be nonnegative");
    }
    sgd.validate();
}

std::vector<std::vector<std::size_t>> epoch_batches(std::size_t m, std::size_t batch_size, Prng& prng)
{
    if (batch_size < 1) {
        throw InputError("epoch_batches: batch_size must be at least 1");
    }
    const auto order = permutation(m, prng);
    std::vector<std::vector<std::size_t>> batches;
    for (std::size_t start = 0; start < m; start += batch_size) {
        const std::size_t end = std::min(m, start + batch_size);
        batches.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(start),
                             order.begin() + static_cast<std::ptrdiff_t>(end));
    }
    return batches;
}

Matrix gather_rows(const Matrix& x, const std::vector<std::size_t>& rows)
{
    Matrix out(static_cast<Eigen::Index>(rows.size()), x.cols());
    for (std::size_t i = 0; i < rows.size(); ++i) {
        out.row(static_cast<Eigen::Index>(i)) = x.row(static_cast<Eigen::Index>(rows[i]));
    }
    return out;
}

Labels gather(const Labels& y, const std::vector<std::size_t>& rows)
{
    Labels out;
    out.reserve(rows.size());
    for (auto r : rows) {
        out.push_back(y[r]);
    }
    return out;
}

TrainResult train_deterministic(Mlp model, const Matrix& x, const Labels& y, const TrainConfig& cfg, Prng& prng,
                                const TrainHooks& hooks)
{
    cfg.validate();
    if (x.rows() == 0) {
        throw InputError("train_deterministic: empty dataset");
    }
    require_dims(static_cast<Eigen::Index>(y.size()), x.rows(), "train_deterministic labels");
    require_dims(x.cols(), model.input_dim(), "train_deterministic input width");
    if (!hooks.trainable.empty() && hooks.trainable.size() != model.depth()) {
        throw DimensionError("train_deterministic: trainable mask length differs from depth");
    }

    std::size_t lowest = 0;
    if (!hooks.trainable.empty()) {
        while (lowest < model.depth() && !hooks.trainable[lowest]) {
            ++lowest;
        }
    }
    TrainResult result;
    if (lowest == model.depth()) {
        // nothing to train; still honor the epoch count for the loss curve
        lowest = 0;
    }

    // A frozen prefix never changes, so its output can be computed once.
    const bool cache_prefix = lowest > 0 && !hooks.perturb;
    const Matrix prefix_features = cache_prefix ? activations_through(model, x, lowest - 1) : Matrix();
    const Matrix& inputs = cache_prefix ? prefix_features : x;
    const std::size_t first_layer = cache_prefix ? lowest : 0;

    SgdState state = SgdState::zeros_like(model);
    const BackwardOptions bopts{lowest, false};
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        const double lr = cfg.sgd.rate_at(epoch);
        double total = 0.0;
        for (const auto& batch : epoch_batches(static_cast<std::size_t>(x.rows()), cfg.batch_size, prng)) {
            Matrix xb = gather_rows(inputs, batch);
            const Labels yb = gather(y, batch);
            if (hooks.perturb) {
                xb = hooks.perturb(model, xb, yb);
            }
            auto pass = forward(model, xb, first_layer);
            const LossResult loss = classification_loss(pass.logits, yb);
            if (!std::isfinite(loss.loss)) {
                throw TrainingError("train_deterministic: non-finite loss at epoch " + std::to_string(epoch), epoch);
            }
            total += loss.loss * static_cast<double>(batch.size());
            const Gradients grads = backward(model, pass.cache, loss.dlogits, bopts);
            sgd_step(model, grads, state, cfg.sgd, lr, hooks.trainable);
            if (hooks.after_step) {
                hooks.after_step(epoch, model);
            }
        }
        result.loss_curve.push_back(total / static_cast<double>(x.rows()));
        result.epochs_run = epoch + 1;

        if (cfg.patience > 0 && epoch >= cfg.patience) {
            const auto& c = result.loss_curve;
            const double recent = *std::min_element(c.end() - cfg.patience, c.end());
            if (c[c.size() - 1 - static_cast<std::size_t>(cfg.patience)] - recent < cfg.min_improvement) {
                break;
            }
        }
    }
    result.model = std::move(model);
    return result;
}

} // namespace stfbnn
