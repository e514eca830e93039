#pragma once

#include "stfbnn/dataset.hpp"
#include "stfbnn/train.hpp"

#include <string>

namespace stfbnn {

/// Mean absolute cosine similarity between corresponding rows of two weight
/// matrices, in [0, 1]. Insensitive to rescaling either matrix by any c != 0.
/// Throws SingularityError naming the first zero row.
template <typename DA, typename DB>
double layer_stability(const Eigen::MatrixBase<DA>& w, const Eigen::MatrixBase<DB>& w_prime)
{
    require_dims(w_prime.rows(), w.rows(), "layer_stability rows");
    require_dims(w_prime.cols(), w.cols(), "layer_stability cols");
    if (w.rows() == 0) {
        throw InputError("layer_stability: empty weight matrix");
    }
    double total = 0.0;
    for (Eigen::Index i = 0; i < w.rows(); ++i) {
        const double na = w.row(i).norm();
        const double nb = w_prime.row(i).norm();
        if (na == 0.0 || nb == 0.0) {
            throw SingularityError("layer_stability: zero row " + std::to_string(i), static_cast<long>(i));
        }
        const double c = std::abs(w.row(i).dot(w_prime.row(i))) / (na * nb);
        // parallel rows land a few ulps off 1 after rounding
        total += c > 1.0 - 16 * std::numeric_limits<double>::epsilon() ? 1.0 : c;
    }
    return total / static_cast<double>(w.rows());
}

/// Reinitializes layer `layer_number` (1-based) with the He scheme and retrains
/// it alone; every other layer is left bit-identical.
Mlp retrain_layer(const Mlp& pretrained, std::size_t layer_number, const Dataset& data, const TrainConfig& cfg,
                  Prng& prng);

struct StabilityConfig {
    TrainConfig pretrain;
    TrainConfig retrain; // defaults: 60 epochs, stop when < 1e-4 improvement over 5 epochs

    StabilityConfig()
    {
        retrain.epochs = 60;
        retrain.patience = 5;
        retrain.min_improvement = 1e-4;
    }
};

struct StabilityReport {
    std::vector<std::uint64_t> seeds;
    Matrix per_seed; // seeds x layers, column k is layer k+1
    Vector mean;
    Vector std;      // population std across seeds
    std::vector<double> pretrain_test_accuracy;
    std::string config_hash;

    std::size_t layers() const { return static_cast<std::size_t>(per_seed.cols()); }
};

/// Per seed: pretrain once, retrain every layer independently from that
/// checkpoint, and score each layer. `test` is only used for reporting accuracy.
StabilityReport stability_profile(std::span<const Eigen::Index> dims, const Dataset& train, const Dataset& test,
                                  const std::vector<std::uint64_t>& seeds, const StabilityConfig& cfg);

} // namespace stfbnn
