#include "stfbnn/bayes.hpp"

#include <cmath>

namespace stfbnn {

void VariationalLayer::validate() const
{
    if (mu_b.size() != mu_w.rows() || rho_w.rows() != mu_w.rows() || rho_w.cols() != mu_w.cols() ||
        rho_b.size() != mu_w.rows()) {
        throw DimensionError("variational layer: mu and rho shapes disagree");
    }
    require_finite(mu_w, "variational mu_w");
    require_finite(mu_b, "variational mu_b");
    require_finite(rho_w, "variational rho_w");
    require_finite(rho_b, "variational rho_b");
}

VariationalLayer init_variational(Eigen::Index out_dim, Eigen::Index in_dim, Activation activation, Prng& prng,
                                  const VariationalInit& init)
{
    if (out_dim < 1 || in_dim < 1) {
        throw InputError("init_variational: dimensions must be positive");
    }
    VariationalLayer l;
    l.activation = activation;
    l.mu_w = sample_gaussian(prng, 0.0, init.mu_std, out_dim, in_dim);
    l.mu_b = sample_gaussian(prng, 0.0, init.mu_std, out_dim, 1);
    l.rho_w = sample_gaussian(prng, init.rho_mean, init.rho_std, out_dim, in_dim);
    l.rho_b = sample_gaussian(prng, init.rho_mean, init.rho_std, out_dim, 1);
    return l;
}

WeightSample weights_from_noise(const VariationalLayer& layer, Matrix eps_w, Vector eps_b)
{
    require_dims(eps_w.rows(), layer.out_dim(), "weights_from_noise eps rows");
    require_dims(eps_w.cols(), layer.in_dim(), "weights_from_noise eps cols");
    require_dims(eps_b.size(), layer.out_dim(), "weights_from_noise eps bias");
    WeightSample s;
    s.weight = layer.mu_w + layer.sigma_w().cwiseProduct(eps_w);
    s.bias = layer.mu_b + layer.sigma_b().cwiseProduct(eps_b);
    s.eps_w = std::move(eps_w);
    s.eps_b = std::move(eps_b);
    return s;
}

WeightSample sample_weights(const VariationalLayer& layer, Prng& prng)
{
    Matrix eps_w = sample_gaussian(prng, 0.0, 1.0, layer.out_dim(), layer.in_dim());
    Vector eps_b = sample_gaussian(prng, 0.0, 1.0, layer.out_dim(), 1);
    return weights_from_noise(layer, std::move(eps_w), std::move(eps_b));
}

double kl_gaussian_to_std_normal(const VariationalLayer& layer)
{
    return kl_to_standard_normal(layer.mu_w, layer.sigma_w()) + kl_to_standard_normal(layer.mu_b, layer.sigma_b());
}

StfModel::StfModel(Mlp base, std::size_t bayes_index, VariationalLayer layer)
    : base_(std::move(base)), bayes_index_(bayes_index)
{
    if (bayes_index_ >= base_.depth()) {
        throw InputError("StfModel: bayes layer index " + std::to_string(bayes_index_ + 1) + " out of range 1.." +
                         std::to_string(base_.depth()));
    }
    set_bayes(std::move(layer));
}

void StfModel::set_bayes(VariationalLayer layer)
{
    layer.validate();
    const DenseLayer& slot = base_.layer(bayes_index_);
    if (layer.out_dim() != slot.out_dim() || layer.in_dim() != slot.in_dim()) {
        throw DimensionError("StfModel: variational layer shape differs from the layer it replaces");
    }
    if (layer.activation != slot.activation) {
        throw InputError("StfModel: variational layer activation differs from the layer it replaces");
    }
    base_.set_layer(bayes_index_, DenseLayer{layer.mu_w, layer.mu_b, layer.activation});
    bayes_ = std::move(layer);
}

Mlp StfModel::realize(const WeightSample& sample) const
{
    Mlp m = base_;
    m.set_layer(bayes_index_, DenseLayer{sample.weight, sample.bias, bayes_.activation});
    return m;
}

const char* to_string(KlWeightMode m)
{
    switch (m) {
    case KlWeightMode::per_batch_1_over_B:
        return "per_batch_1_over_B";
    case KlWeightMode::unit:
        return "unit";
    }
    return "?";
}

KlWeightMode kl_weight_mode_from_string(const std::string& s)
{
    if (s == "per_batch_1_over_B") {
        return KlWeightMode::per_batch_1_over_B;
    }
    if (s == "unit") {
        return KlWeightMode::unit;
    }
    throw InputError("unknown kl_weight_mode '" + s + "'");
}

void ElboConfig::validate() const
{
    if (epochs < 0) {
        throw InputError("elbo: epochs must be nonnegative");
    }
    if (batch_size < 1) {
        throw InputError("elbo: batch_size must be at least 1");
    }
    if (mc_samples_per_step < 1) {
        throw InputError("elbo: mc_samples_per_step must be at least 1");
    }
    if (init.mu_std < 0 || init.rho_std < 0) {
        throw InputError("elbo: init standard deviations must be nonnegative");
    }
    sgd.validate();
}

double kl_weight(KlWeightMode mode, std::size_t num_batches, std::size_t batch_rows)
{
    if (num_batches < 1 || batch_rows < 1) {
        throw InputError("kl_weight: batch counts must be positive");
    }
    const double per_batch = mode == KlWeightMode::unit ? 1.0 : 1.0 / static_cast<double>(num_batches);
    return per_batch / static_cast<double>(batch_rows);
}

ElboGradients elbo_gradients(const StfModel& stf, const Matrix& x, const Labels& y, const WeightSample& sample,
                             double kl_weight_value, bool x_is_layer_input)
{
    const std::size_t k = stf.bayes_index();
    const Mlp model = stf.realize(sample);
    auto pass = forward(model, x, x_is_layer_input ? k : 0);
    const LossResult loss = classification_loss(pass.logits, y);
    const Gradients g = backward(model, pass.cache, loss.dlogits, BackwardOptions{k, false});

    const VariationalLayer& v = stf.bayes();
    const Matrix sig_w = sigmoid(v.rho_w);
    const Vector sig_b = sigmoid(v.rho_b);
    const Matrix sd_w = v.sigma_w();
    const Vector sd_b = v.sigma_b();

    ElboGradients out;
    out.parts.nll = loss.loss;
    out.parts.kl = kl_gaussian_to_std_normal(v);
    out.parts.loss = out.parts.nll + kl_weight_value * out.parts.kl;

    // d KL / d sigma = sigma - 1/sigma ; d sigma / d rho = sigmoid(rho)
    out.mu_w = g.weight[k] + kl_weight_value * v.mu_w;
    out.mu_b = g.bias[k] + kl_weight_value * v.mu_b;
    out.rho_w = (g.weight[k].cwiseProduct(sample.eps_w) + kl_weight_value * sd_w).cwiseProduct(sig_w) -
                kl_weight_value * sig_w.cwiseQuotient(sd_w);
    out.rho_b = (g.bias[k].cwiseProduct(sample.eps_b) + kl_weight_value * sd_b).cwiseProduct(sig_b) -
                kl_weight_value * sig_b.cwiseQuotient(sd_b);
    return out;
}

ElboParts elbo_loss(const StfModel& stf, const Matrix& x, const Labels& y, const WeightSample& sample,
                    double kl_weight_value)
{
    const LossResult loss = classification_loss(logits(stf.realize(sample), x), y);
    ElboParts parts;
    parts.nll = loss.loss;
    parts.kl = kl_gaussian_to_std_normal(stf.bayes());
    parts.loss = parts.nll + kl_weight_value * parts.kl;
    return parts;
}

ElboParts elbo_loss(const StfModel& stf, const Matrix& x, const Labels& y, Prng& prng, double kl_weight_value)
{
    return elbo_loss(stf, x, y, sample_weights(stf.bayes(), prng), kl_weight_value);
}

StfTrainResult stf_train(const Mlp& pretrained, std::size_t bayes_layer, const Dataset& train, const ElboConfig& cfg,
                         Prng& prng)
{
    cfg.validate();
    train.validate();
    if (bayes_layer < 1 || bayes_layer > pretrained.depth()) {
        throw InputError("stf_train: bayes layer " + std::to_string(bayes_layer) + " out of range 1.." +
                         std::to_string(pretrained.depth()));
    }
    require_dims(train.dim(), pretrained.input_dim(), "stf_train input width");
    if (train.size() == 0) {
        throw InputError("stf_train: empty dataset");
    }
    const std::size_t k = bayes_layer - 1;
    const DenseLayer& replaced = pretrained.layer(k);
    VariationalLayer layer = init_variational(replaced.out_dim(), replaced.in_dim(), replaced.activation, prng, cfg.init);

    StfTrainResult result;
    result.model = StfModel(pretrained, k, layer);

    // Layers below the Bayesian one are frozen, so their output is fixed.
    const bool cached = k > 0;
    const Matrix prefix = cached ? activations_through(pretrained, train.features, k - 1) : Matrix();
    const Matrix& inputs = cached ? prefix : train.features;

    const std::size_t m = train.size();
    const std::size_t num_batches = (m + cfg.batch_size - 1) / cfg.batch_size;
    Matrix v_mu_w = Matrix::Zero(layer.out_dim(), layer.in_dim());
    Vector v_mu_b = Vector::Zero(layer.out_dim());
    Matrix v_rho_w = v_mu_w;
    Vector v_rho_b = v_mu_b;
    const double momentum = cfg.sgd.momentum;
    const double wd = cfg.sgd.weight_decay;
    const double inv_s = 1.0 / cfg.mc_samples_per_step;

    long step = 0;
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        const double lr = cfg.sgd.rate_at(epoch);
        double total = 0.0;
        double total_nll = 0.0;
        for (const auto& batch : epoch_batches(m, cfg.batch_size, prng)) {
            const Matrix xb = gather_rows(inputs, batch);
            const Labels yb = gather(train.labels, batch);
            const double w = kl_weight(cfg.kl_weight_mode, num_batches, batch.size());

            ElboGradients acc;
            for (int s = 0; s < cfg.mc_samples_per_step; ++s) {
                const WeightSample sample = sample_weights(result.model.bayes(), prng);
                ElboGradients g = elbo_gradients(result.model, xb, yb, sample, w, cached);
                if (s == 0) {
                    acc = std::move(g);
                    continue;
                }
                acc.parts.nll += g.parts.nll;
                acc.parts.loss += g.parts.loss;
                acc.mu_w += g.mu_w;
                acc.mu_b += g.mu_b;
                acc.rho_w += g.rho_w;
                acc.rho_b += g.rho_b;
            }
            if (cfg.mc_samples_per_step > 1) {
                acc.parts.nll *= inv_s;
                acc.parts.loss *= inv_s;
                acc.mu_w *= inv_s;
                acc.mu_b *= inv_s;
                acc.rho_w *= inv_s;
                acc.rho_b *= inv_s;
            }
            if (!std::isfinite(acc.parts.loss)) {
                throw TrainingError("stf_train: non-finite loss at step " + std::to_string(step), step);
            }
            total += acc.parts.loss * static_cast<double>(batch.size());
            total_nll += acc.parts.nll * static_cast<double>(batch.size());

            sgd_update(layer.mu_w, acc.mu_w, v_mu_w, lr, momentum, wd);
            sgd_update(layer.mu_b, acc.mu_b, v_mu_b, lr, momentum, wd);
            sgd_update(layer.rho_w, acc.rho_w, v_rho_w, lr, momentum, 0.0);
            sgd_update(layer.rho_b, acc.rho_b, v_rho_b, lr, momentum, 0.0);
            if (!all_finite(layer.mu_w) || !all_finite(layer.mu_b) || !all_finite(layer.rho_w) ||
                !all_finite(layer.rho_b)) {
                throw TrainingError("stf_train: non-finite parameters after step " + std::to_string(step), step);
            }
            result.model.set_bayes(layer);
            ++step;
        }
        result.loss_curve.push_back(total / static_cast<double>(m));
        result.nll_curve.push_back(total_nll / static_cast<double>(m));
        result.kl_curve.push_back(kl_gaussian_to_std_normal(layer));
    }
    return result;
}

namespace {

constexpr int kStfVersion = 1;

const Json& need(const Json& j, const char* key)
{
    if (!j.is_object() || !j.contains(key)) {
        throw FormatError(std::string("stf checkpoint: missing field '") + key + "'");
    }
    return j.at(key);
}

} // namespace

Json stf_to_json(const StfModel& stf, const std::string& config_hash)
{
    const VariationalLayer& v = stf.bayes();
    return Json{{"format", "stfbnn-stf"},
                {"version", kStfVersion},
                {"bayes_layer", stf.bayes_index() + 1},
                {"config_hash", config_hash},
                {"base", mlp_to_json(stf.base())},
                {"variational",
                 {{"mu_w", matrix_to_json(v.mu_w)},
                  {"mu_b", vector_to_json(v.mu_b)},
                  {"rho_w", matrix_to_json(v.rho_w)},
                  {"rho_b", vector_to_json(v.rho_b)}}}};
}

StfModel stf_from_json(const Json& j)
{
    if (need(j, "format") != "stfbnn-stf") {
        throw FormatError("stf checkpoint: not an stfbnn-stf container");
    }
    if (need(j, "version") != kStfVersion) {
        throw FormatError("stf checkpoint: unsupported version " + need(j, "version").dump());
    }
    Mlp base = mlp_from_json(need(j, "base"));
    const auto index = need(j, "bayes_layer").get<std::size_t>();
    if (index < 1 || index > base.depth()) {
        throw FormatError("stf checkpoint: bayes_layer out of range");
    }
    const Json& jv = need(j, "variational");
    VariationalLayer v;
    v.mu_w = matrix_from_json(need(jv, "mu_w"));
    v.mu_b = vector_from_json(need(jv, "mu_b"));
    v.rho_w = matrix_from_json(need(jv, "rho_w"));
    v.rho_b = vector_from_json(need(jv, "rho_b"));
    v.activation = base.layer(index - 1).activation;
    try {
        return StfModel(std::move(base), index - 1, std::move(v));
    } catch (const Error& e) {
        throw FormatError(std::string("stf checkpoint: ") + e.what());
    }
}

void save_stf(const std::filesystem::path& path, const StfModel& stf, const std::string& config_hash)
{
    write_json(path, stf_to_json(stf, config_hash));
}

StfModel load_stf(const std::filesystem::path& path) { return stf_from_json(read_json(path)); }

} // namespace stfbnn
