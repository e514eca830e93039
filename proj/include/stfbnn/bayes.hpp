#pragma once

#include "stfbnn/checkpoint.hpp"
#include "stfbnn/dataset.hpp"
#include "stfbnn/train.hpp"

namespace stfbnn {

/// Closed-form KL(N(mu, diag(sigma^2)) || N(0, I)) summed over all entries:
/// sum of (sigma^2 + mu^2 - 1 - log sigma^2) / 2. The log is taken of sigma
/// itself so tiny deviations do not underflow to log 0.
template <typename DM, typename DS>
typename DM::Scalar kl_to_standard_normal(const Eigen::MatrixBase<DM>& mu, const Eigen::MatrixBase<DS>& sigma)
{
    const auto s = sigma.array();
    return typename DM::Scalar(0.5) * (s.square() + mu.array().square() - 1 - 2 * s.log()).sum();
}

struct VariationalInit {
    double mu_std = 0.1;     // mu ~ N(0, mu_std^2)
    double rho_mean = -2.25; // rho ~ N(rho_mean, rho_std^2)
    double rho_std = 0.1;
};

/// Mean-field Gaussian over one dense layer's weights and biases, with
/// sigma = softplus(rho) so every standard deviation stays positive.
struct VariationalLayer {
    Matrix mu_w;
    Vector mu_b;
    Matrix rho_w;
    Vector rho_b;
    Activation activation = Activation::relu;

    Matrix sigma_w() const { return softplus(rho_w); }
    Vector sigma_b() const { return softplus(rho_b); }
    Eigen::Index in_dim() const { return mu_w.cols(); }
    Eigen::Index out_dim() const { return mu_w.rows(); }
    std::size_t scalar_count() const { return static_cast<std::size_t>(mu_w.size() + mu_b.size()); }
    void validate() const;
};

VariationalLayer init_variational(Eigen::Index out_dim, Eigen::Index in_dim, Activation activation, Prng& prng,
                                  const VariationalInit& init = {});

/// One reparameterized draw theta = mu + sigma * eps, with the noise kept for the pathwise gradient.
struct WeightSample {
    Matrix weight;
    Vector bias;
    Matrix eps_w;
    Vector eps_b;
};

WeightSample sample_weights(const VariationalLayer& layer, Prng& prng);
WeightSample weights_from_noise(const VariationalLayer& layer, Matrix eps_w, Vector eps_b);

double kl_gaussian_to_std_normal(const VariationalLayer& layer);

/// A deterministic network whose layer `bayes_index` (0-based) is replaced by a
/// variational layer. `base()` always carries the posterior mean in that slot;
/// every other layer is frozen.
class StfModel {
public:
    StfModel() = default;
    StfModel(Mlp base, std::size_t bayes_index, VariationalLayer layer);

    const Mlp& base() const { return base_; }
    /// The network with theta1 = mu1.
    const Mlp& mean_model() const { return base_; }
    const VariationalLayer& bayes() const { return bayes_; }
    std::size_t bayes_index() const { return bayes_index_; }
    bool binary_logit() const { return base_.binary_logit(); }

    void set_bayes(VariationalLayer layer);
    Mlp realize(const WeightSample& sample) const;

private:
    Mlp base_;
    std::size_t bayes_index_ = 0;
    VariationalLayer bayes_;
};

enum class KlWeightMode {
    per_batch_1_over_B, // KL counted once per epoch (scaled by 1 / number of batches)
    unit                // KL added in full to every minibatch objective
};

const char* to_string(KlWeightMode m);
KlWeightMode kl_weight_mode_from_string(const std::string& s);

struct ElboConfig {
    int epochs = 30;
    std::size_t batch_size = 128;
    SgdConfig sgd{0.1, 0.9, 5e-4, {{10, 0.2}, {20, 0.2}, {25, 0.2}}}; // weight decay reaches mu only
    KlWeightMode kl_weight_mode = KlWeightMode::per_batch_1_over_B;
    int mc_samples_per_step = 1;
    VariationalInit init;

    void validate() const;
};

/// Multiplier on KL in the batch-mean objective, so that
/// loss = mean_nll + kl_weight * KL is the minibatch ELBO divided by the batch size.
double kl_weight(KlWeightMode mode, std::size_t num_batches, std::size_t batch_rows);

struct ElboParts {
    double loss = 0.0;
    double nll = 0.0; // mean cross-entropy over the batch
    double kl = 0.0;
};

struct ElboGradients {
    ElboParts parts;
    Matrix mu_w;
    Vector mu_b;
    Matrix rho_w;
    Vector rho_b;
};

/// Negative ELBO of one batch at a fixed noise draw, with pathwise gradients:
/// d/dmu = g_theta + w_kl * mu, d/drho = (g_theta * eps + w_kl * (sigma - 1/sigma)) * sigmoid(rho).
/// `x` is the input of the Bayesian layer's network (or of the layer itself when `x_is_layer_input`).
ElboGradients elbo_gradients(const StfModel& stf, const Matrix& x, const Labels& y, const WeightSample& sample,
                             double kl_weight_value, bool x_is_layer_input = false);

ElboParts elbo_loss(const StfModel& stf, const Matrix& x, const Labels& y, const WeightSample& sample,
                    double kl_weight_value);
ElboParts elbo_loss(const StfModel& stf, const Matrix& x, const Labels& y, Prng& prng, double kl_weight_value);

struct StfTrainResult {
    StfModel model;
    std::vector<double> loss_curve; // per-epoch mean objective
    std::vector<double> nll_curve;
    std::vector<double> kl_curve;   // KL at the end of each epoch
};

/// Phase two: layer `bayes_layer` (1-based) of the pretrained net becomes
/// variational and is fit by Bayes by backprop; all other layers stay frozen.
/// Throws TrainingError carrying the global step if the loss goes non-finite.
StfTrainResult stf_train(const Mlp& pretrained, std::size_t bayes_layer, const Dataset& train, const ElboConfig& cfg,
                         Prng& prng);

Json stf_to_json(const StfModel& stf, const std::string& config_hash = "");
StfModel stf_from_json(const Json& j);
void save_stf(const std::filesystem::path& path, const StfModel& stf, const std::string& config_hash = "");
StfModel load_stf(const std::filesystem::path& path);

} // namespace stfbnn
