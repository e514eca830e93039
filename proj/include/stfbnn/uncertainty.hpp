#pragma once

#include "stfbnn/bayes.hpp"

#include <filesystem>
#include <optional>

namespace stfbnn {

/// Averaged class probabilities with the derived confidence and label per row.
struct PredictiveSummary {
    Matrix mean_probs; // batch x classes
    Vector confidence; // row max
    Labels predicted;  // row argmax
    int mc_samples = 1;

    static PredictiveSummary from_probs(Matrix probs, int mc_samples);
    /// Probability assigned to the true label of each row.
    Vector true_class_confidence(const Labels& labels) const;
    double accuracy(const Labels& labels) const;
};

/// Mean of `samples` predictive distributions, each under a fresh draw of the
/// variational layer. Layers below it are evaluated once.
PredictiveSummary mc_predict(const StfModel& stf, const Matrix& x, int samples, Prng& prng);
PredictiveSummary predict_deterministic(const Mlp& model, const Matrix& x);

enum class EceNormalization {
    sample_count, // sum_m |B_m|/N |acc - conf|
    bin_count     // sum_m |B_m|/M |acc - conf|, the literal variant
};

const char* to_string(EceNormalization n);
EceNormalization ece_normalization_from_string(const std::string& s);

struct EceBin {
    double lower = 0.0; // bin is (lower, upper]; the first bin also takes confidence 0
    double upper = 0.0;
    std::size_t count = 0;
    double accuracy = 0.0;   // 0 for an empty bin
    double confidence = 0.0; // 0 for an empty bin
};

struct EceReport {
    int bins = 15;
    EceNormalization normalization = EceNormalization::sample_count;
    std::vector<EceBin> per_bin;
    std::size_t total = 0;
    double ece = 0.0;
};

EceReport ece(const Vector& confidence, const Labels& predicted, const Labels& labels, int bins = 15,
              EceNormalization normalization = EceNormalization::sample_count);
EceReport ece(const PredictiveSummary& summary, const Labels& labels, int bins = 15,
              EceNormalization normalization = EceNormalization::sample_count);

struct ThresholdPoint {
    double threshold = 0.0;
    std::size_t retained = 0;
    double coverage = 0.0;
    std::optional<double> accuracy; // empty when nothing is retained
};

/// Predictions with confidence below a threshold are refused; accuracy is over the rest.
std::vector<ThresholdPoint> accuracy_at_threshold(const PredictiveSummary& summary, const Labels& labels,
                                                  const std::vector<double>& thresholds);

/// Per-row d f / d(pre-activation of layer k) for a scalar-output model.
Matrix pre_activation_gradient(const Mlp& model, const Matrix& x, std::size_t k);

struct ProbitResult {
    Vector mean_logit; // f at theta1 = mu1
    Vector variance;   // d1' Sigma1 d1, biases included
    Vector z;
    Vector confidence; // sigmoid(z), probability of class 1
};

/// Linearized predictive logit z = f_mu / sqrt(1 + pi/8 d1' Sigma1 d1) for a
/// binary (scalar-logit) model. Throws UsageError for multi-output models.
ProbitResult probit_logit(const StfModel& stf, const Matrix& x);

/// Everything describing the far-field behaviour of a binary model along one
/// direction x, where f(delta x) = u'(w delta x + b) + c inside a fixed region.
struct AsymptoticBound {
    Vector direction;
    double delta_star = 0.0; // scale from which the activation pattern stays fixed
    std::vector<std::vector<bool>> pattern;
    Vector u;
    Matrix w;
    Vector b;
    double c = 0.0;
    double lambda_min_sigma1 = 0.0; // smallest weight variance
    double s_min_reduced = 0.0;     // ||u||
    double s_min_direct = 0.0;      // from an SVD of the assembled matrix; NaN when too large to assemble
    double bound_logit = 0.0;
    double bound_confidence = 0.0;
    double limit_abs_logit = 0.0;   // lim |z(delta x)|

    /// |z(delta x)| from the closed form valid for delta >= delta_star.
    double abs_logit_at(double delta, const VariationalLayer& layer) const;
};

/// Walks delta = 1, 2, 4, ... until the activation pattern at delta x is
/// unchanged over three consecutive doublings, then evaluates the bound.
/// Requires the variational layer to be the first layer and a scalar logit.
/// Throws RegionError if no stable region is found by delta = 2^64.
AsymptoticBound asymptotic_bound(const StfModel& stf, const Vector& x);

struct ScaleSweepRow {
    std::size_t direction = 0;
    double delta = 0.0;
    double confidence = 0.0; // sigmoid(|z(delta x)|)
    double bound = 0.0;      // bound_confidence of that direction
};

struct ScaleSweep {
    std::vector<ScaleSweepRow> rows;
    std::vector<AsymptoticBound> bounds; // one per direction
};

ScaleSweep scale_sweep(const StfModel& stf, const Matrix& directions, const std::vector<double>& deltas);

void write_ece_csv(const std::filesystem::path& path, const EceReport& report);
void write_threshold_csv(const std::filesystem::path& path, const std::vector<ThresholdPoint>& curve);
void write_scale_sweep_csv(const std::filesystem::path& path, const ScaleSweep& sweep);

Json ece_to_json(const EceReport& report);
Json threshold_curve_to_json(const std::vector<ThresholdPoint>& curve);

} // namespace stfbnn
