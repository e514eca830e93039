#pragma once

#include "stfbnn/bayes.hpp"
#include "stfbnn/dataset.hpp"
#include "stfbnn/train.hpp"

#include <span>

namespace stfbnn {

/// L-infinity attack settings in feature units.
struct AttackConfig {
    double radius = 0.0;
    int steps = 10;
    /// Defaults to 2.5 * radius / steps.
    std::optional<double> step_size;
    bool random_start = true;
    FeatureRange clip;

    static AttackConfig fgsm(double radius, FeatureRange clip = {});
    static AttackConfig pgd(double radius, FeatureRange clip = {});

    double effective_step() const;
    void validate() const;
};

/// Where attack gradients on a variational model are taken.
enum class GradientMode { posterior_mean, sampled };
const char* to_string(GradientMode m);
GradientMode gradient_mode_from_string(const std::string& s);

/// d(mean classification loss)/dx, one row per example.
Matrix input_gradient(const Mlp& model, const Matrix& x, const Labels& y);

/// clip(x + radius * sign(grad)), kept inside the radius ball exactly; radius 0
/// returns x unchanged.
Matrix fgsm(const Mlp& model, const Matrix& x, const Labels& y, double radius, const FeatureRange& clip = {});

/// Projected sign-gradient ascent. Each step moves by step_size, projects onto
/// the radius ball around x, then clips to the feature range.
Matrix pgd(const Mlp& model, const Matrix& x, const Labels& y, const AttackConfig& cfg, Prng& prng);

/// Network the attack differentiates: the posterior mean or one fresh draw.
Mlp attack_surrogate(const StfModel& stf, GradientMode mode, Prng& prng);

/// Each batch is replaced by its PGD perturbation before the step. Attack noise
/// comes from a stream derived from `prng`, so radius 0 reproduces plain training.
TrainResult adversarial_train(Mlp model, const Dataset& train, const TrainConfig& cfg, const AttackConfig& attack,
                              Prng& prng, const TrainHooks& hooks = {});

struct AttackPoint {
    double radius = 0.0;
    double accuracy = 0.0;
};

struct AttackReport {
    std::string model_kind; // "deterministic" or "stf"
    std::string checkpoint_hash;
    AttackConfig attack;    // radius field unused; one point per radius
    int mc_samples = 1;
    GradientMode gradient_mode = GradientMode::posterior_mean;
    double clean_accuracy = 0.0;
    std::vector<AttackPoint> points;
};

double attack_eval(const Mlp& model, const Dataset& d, const AttackConfig& cfg, Prng& prng);
/// Examples are crafted against the surrogate, accuracy uses mc_predict.
double attack_eval(const StfModel& stf, const Dataset& d, const AttackConfig& cfg, Prng& prng, int mc_samples,
                   GradientMode mode = GradientMode::posterior_mean);

AttackReport attack_sweep(const Mlp& model, const Dataset& d, const AttackConfig& base, std::span<const double> radii,
                          Prng& prng);
AttackReport attack_sweep(const StfModel& stf, const Dataset& d, const AttackConfig& base,
                          std::span<const double> radii, Prng& prng, int mc_samples,
                          GradientMode mode = GradientMode::posterior_mean);

Json attack_report_to_json(const AttackReport& r);

/// Membership score per example.
enum class MiScore { true_class, max_confidence };
const char* to_string(MiScore s);
MiScore mi_score_from_string(const std::string& s);

struct MiReport {
    MiScore score = MiScore::true_class;
    std::string checkpoint_hash;
    std::size_t train_count = 0;
    std::size_t test_count = 0;
    std::vector<double> thresholds; // ascending
    std::vector<double> accuracy;   // Acc(zeta) per threshold
    double zeta_optim = 0.0;        // smallest maximizer
    double acc_optim = 0.5;
};

/// Threshold attack: guess "member" when the score is at least zeta. Thresholds
/// are every observed score plus 0 and 1 + 1e-9.
MiReport mi_attack_scores(std::span<const double> train_scores, std::span<const double> test_scores);

std::vector<double> membership_scores(const Matrix& probs, const Labels& labels, MiScore score);

MiReport mi_attack(const Mlp& model, const Dataset& train, const Dataset& test, MiScore score = MiScore::true_class);
MiReport mi_attack(const StfModel& stf, const Dataset& train, const Dataset& test, int mc_samples, Prng& prng,
                   MiScore score = MiScore::true_class);

Json mi_report_to_json(const MiReport& r);

} // namespace stfbnn
