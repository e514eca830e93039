#pragma once

#include "stfbnn/bayes.hpp"

#include <optional>
#include <span>

namespace stfbnn {

/// Diagonal variance of the frozen parameters, estimated from late SGD iterates.
struct Sigma2Estimate {
    Vector variance;           // one entry per frozen scalar, floored at `floor`
    std::size_t iterates = 0;  // snapshots used
    int window_epochs = 0;
    double floor = 1e-12;
};

/// Parameters of every layer except `excluded` flattened in layer order
/// (weights row-major, then bias).
Vector flatten_parameters(const Mlp& model, std::optional<std::size_t> excluded = std::nullopt);

/// Running (Welford) per-scalar mean and variance of the frozen parameters over
/// the final `window` epochs of a run lasting `total_epochs`.
class IterateVariance {
public:
    IterateVariance(int total_epochs, int window, std::optional<std::size_t> excluded_layer, double floor = 1e-12);

    void observe(int epoch, const Mlp& model);
    /// For TrainHooks::after_step.
    std::function<void(int, const Mlp&)> hook();
    Sigma2Estimate finish() const;
    std::size_t count() const { return count_; }

private:
    int total_epochs_;
    int window_;
    std::optional<std::size_t> excluded_;
    double floor_;
    std::size_t count_ = 0;
    Vector mean_;
    Vector m2_;
};

/// Same estimate from explicit snapshots (sample variance about their mean).
Sigma2Estimate estimate_sigma2_from_iterates(std::span<const Vector> iterates, double floor = 1e-12);

struct DeltaComponents {
    double kl_q1_p1 = 0.0;
    double trace_term = 0.0;  // tr(Sigma - 2I)
    double logdet_term = 0.0; // log det Sigma
    double frob_terms = 0.0;  // ||Sigma1||_F^2 + ||Sigma2||_F^2
    std::size_t dim = 0;
    double delta = 0.0;       // 2 KL + trace - logdet + frob
};

/// Delta for a block-diagonal covariance given as diagonal variance blocks.
DeltaComponents delta_from_blocks(double kl_q1_p1, std::span<const Vector> variance_blocks);

/// Delta with Sigma = diag(Sigma1, Sigma2) and no cross-covariance.
DeltaComponents delta_term(const VariationalLayer& q1, const Sigma2Estimate& s2);

/// Average 0-1 error over `samples` posterior draws of the variational layer
/// and all rows; the frozen layers stay at their point values.
double empirical_risk_mc(const StfModel& stf, const Matrix& x, const Labels& y, int samples, Prng& prng);

/// r_hat + sqrt((Delta + 2 log(1/delta_conf) + 2 log m + 4) / (4m - 2)).
/// A negative radicand (possible when many variances sit near 1/2) is clamped to 0.
double pac_bayes_rhs(double delta, std::size_t m, double delta_conf, double r_hat);

struct BoundReport {
    DeltaComponents components;
    std::size_t m = 0;
    double delta_conf = 0.05;
    double bound_rhs = 0.0;
    double empirical_risk = 0.0;
    std::optional<double> test_risk;
    std::optional<double> gap; // test_risk - empirical_risk
    std::optional<bool> holds; // test_risk <= bound_rhs
    bool vacuous = false;      // bound_rhs >= 1
    std::size_t sigma2_iterates = 0;
};

BoundReport pac_bayes_bound(const DeltaComponents& components, std::size_t m, double delta_conf, double r_hat,
                            std::optional<double> test_risk = std::nullopt);

Json bound_to_json(const BoundReport& r);

} // namespace stfbnn
