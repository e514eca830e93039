#include "stfbnn/stability.hpp"

#include <cmath>

namespace stfbnn {

Mlp retrain_layer(const Mlp& pretrained, std::size_t layer_number, const Dataset& data, const TrainConfig& cfg,
                  Prng& prng)
{
    if (layer_number < 1 || layer_number > pretrained.depth()) {
        throw InputError("retrain_layer: layer " + std::to_string(layer_number) + " outside 1.." +
                         std::to_string(pretrained.depth()));
    }
    const std::size_t k = layer_number - 1;
    Mlp model = pretrained;
    model.update_layer(k, [&](DenseLayer& l) {
        l.weight = sample_gaussian(prng, 0.0, std::sqrt(2.0 / static_cast<double>(l.in_dim())), l.out_dim(), l.in_dim());
        l.bias.setZero();
    });
    TrainHooks hooks;
    hooks.trainable.assign(model.depth(), false);
    hooks.trainable[k] = true;
    return train_deterministic(std::move(model), data.features, data.labels, cfg, prng, hooks).model;
}

StabilityReport stability_profile(std::span<const Eigen::Index> dims, const Dataset& train, const Dataset& test,
                                  const std::vector<std::uint64_t>& seeds, const StabilityConfig& cfg)
{
    if (seeds.size() < 2) {
        throw InputError("stability_profile: need at least two seeds");
    }
    const auto depth = static_cast<Eigen::Index>(dims.size() - 1);
    StabilityReport report;
    report.seeds = seeds;
    report.per_seed.resize(static_cast<Eigen::Index>(seeds.size()), depth);
    for (std::size_t s = 0; s < seeds.size(); ++s) {
        Prng prng(seeds[s]);
        Prng init_prng = prng.derive("init");
        Prng pre_prng = prng.derive("pretrain");
        const Mlp pretrained =
            train_deterministic(Mlp::he_init(dims, init_prng), train.features, train.labels, cfg.pretrain, pre_prng)
                .model;
        report.pretrain_test_accuracy.push_back(accuracy(pretrained, test.features, test.labels));
        for (Eigen::Index k = 0; k < depth; ++k) {
            Prng layer_prng = prng.derive(0x5eed0000ULL + static_cast<std::uint64_t>(k));
            const Mlp retrained = retrain_layer(pretrained, static_cast<std::size_t>(k + 1), train, cfg.retrain, layer_prng);
            report.per_seed(static_cast<Eigen::Index>(s), k) =
                layer_stability(pretrained.layer(static_cast<std::size_t>(k)).weight,
                                retrained.layer(static_cast<std::size_t>(k)).weight);
        }
    }
    report.mean = report.per_seed.colwise().mean().transpose();
    report.std = ((report.per_seed.rowwise() - report.mean.transpose()).array().square().colwise().mean())
                     .sqrt()
                     .transpose();
    return report;
}

} // namespace stfbnn
