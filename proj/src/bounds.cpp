#include "stfbnn/bounds.hpp"

#include <cmath>

namespace stfbnn {

Vector flatten_parameters(const Mlp& model, std::optional<std::size_t> excluded)
{
    Eigen::Index n = 0;
    for (std::size_t k = 0; k < model.depth(); ++k) {
        if (k != excluded) {
            n += model.layer(k).weight.size() + model.layer(k).bias.size();
        }
    }
    Vector out(n);
    Eigen::Index at = 0;
    for (std::size_t k = 0; k < model.depth(); ++k) {
        if (k == excluded) {
            continue;
        }
        const DenseLayer& l = model.layer(k);
        for (Eigen::Index i = 0; i < l.weight.rows(); ++i) {
            out.segment(at, l.weight.cols()) = l.weight.row(i).transpose();
            at += l.weight.cols();
        }
        out.segment(at, l.bias.size()) = l.bias;
        at += l.bias.size();
    }
    return out;
}

IterateVariance::IterateVariance(int total_epochs, int window, std::optional<std::size_t> excluded_layer, double floor)
    : total_epochs_(total_epochs), window_(window), excluded_(excluded_layer), floor_(floor)
{
    if (window < 1) {
        throw InputError("estimate_sigma2: window must be at least one epoch");
    }
    if (window > total_epochs) {
        throw InputError("estimate_sigma2: window of " + std::to_string(window) + " epochs exceeds training length " +
                         std::to_string(total_epochs));
    }
    if (!(floor > 0.0)) {
        throw InputError("estimate_sigma2: floor must be positive");
    }
}

void IterateVariance::observe(int epoch, const Mlp& model)
{
    if (epoch < total_epochs_ - window_) {
        return;
    }
    const Vector theta = flatten_parameters(model, excluded_);
    if (count_ == 0) {
        mean_ = Vector::Zero(theta.size());
        m2_ = Vector::Zero(theta.size());
    }
    require_dims(theta.size(), mean_.size(), "estimate_sigma2 parameter count");
    ++count_;
    const Vector d = theta - mean_;
    mean_ += d / static_cast<double>(count_);
    m2_ += d.cwiseProduct(theta - mean_);
}

std::function<void(int, const Mlp&)> IterateVariance::hook()
{
    return [this](int epoch, const Mlp& model) { observe(epoch, model); };
}

Sigma2Estimate IterateVariance::finish() const
{
    Sigma2Estimate s;
    s.iterates = count_;
    s.window_epochs = window_;
    s.floor = floor_;
    if (count_ == 0) {
        throw UsageError("estimate_sigma2: no iterates were observed");
    }
    s.variance = count_ > 1 ? Vector(m2_ / static_cast<double>(count_ - 1)) : Vector::Zero(m2_.size());
    s.variance = s.variance.cwiseMax(floor_);
    return s;
}

Sigma2Estimate estimate_sigma2_from_iterates(std::span<const Vector> iterates, double floor)
{
    if (iterates.empty()) {
        throw InputError("estimate_sigma2: no iterates");
    }
    Sigma2Estimate s;
    s.iterates = iterates.size();
    s.window_epochs = 0;
    s.floor = floor;
    Vector mean = Vector::Zero(iterates.front().size());
    Vector m2 = Vector::Zero(mean.size());
    std::size_t count = 0;
    for (const auto& v : iterates) {
        require_dims(v.size(), mean.size(), "estimate_sigma2 iterate length");
        ++count;
        const Vector d = v - mean;
        mean += d / static_cast<double>(count);
        m2 += d.cwiseProduct(v - mean);
    }
    s.variance = count > 1 ? Vector(m2 / static_cast<double>(count - 1)) : Vector::Zero(mean.size());
    s.variance = s.variance.cwiseMax(floor);
    return s;
}

DeltaComponents delta_from_blocks(double kl_q1_p1, std::span<const Vector> variance_blocks)
{
    DeltaComponents c;
    c.kl_q1_p1 = kl_q1_p1;
    for (const Vector& v : variance_blocks) {
        if (v.size() > 0 && !(v.minCoeff() > 0.0)) {
            throw InputError("delta_term: variances must be positive");
        }
        require_finite(v, "delta_term variances");
        c.dim += static_cast<std::size_t>(v.size());
        c.trace_term += v.sum() - 2.0 * static_cast<double>(v.size());
        c.logdet_term += v.array().log().sum();
        c.frob_terms += v.squaredNorm();
    }
    c.delta = 2.0 * c.kl_q1_p1 + c.trace_term - c.logdet_term + c.frob_terms;
    return c;
}

DeltaComponents delta_term(const VariationalLayer& q1, const Sigma2Estimate& s2)
{
    const Matrix sd_w = q1.sigma_w();
    const Vector sd_b = q1.sigma_b();
    Vector sigma1(sd_w.size() + sd_b.size());
    sigma1 << Eigen::Map<const Vector>(sd_w.data(), sd_w.size()), sd_b;
    const Vector var1 = sigma1.array().square();
    const std::array<Vector, 2> blocks{var1, s2.variance};
    return delta_from_blocks(kl_gaussian_to_std_normal(q1), blocks);
}

double empirical_risk_mc(const StfModel& stf, const Matrix& x, const Labels& y, int samples, Prng& prng)
{
    if (samples < 1) {
        throw InputError("empirical_risk_mc: need at least one sample");
    }
    require_dims(static_cast<Eigen::Index>(y.size()), x.rows(), "empirical_risk_mc labels");
    if (x.rows() == 0) {
        throw InputError("empirical_risk_mc: empty dataset");
    }
    const std::size_t k = stf.bayes_index();
    const Matrix inputs = k > 0 ? activations_through(stf.base(), x, k - 1) : x;
    std::size_t errors = 0;
    for (int s = 0; s < samples; ++s) {
        const Mlp model = stf.realize(sample_weights(stf.bayes(), prng));
        const Labels pred = argmax_rows(class_probabilities(logits(model, inputs, k)));
        for (std::size_t i = 0; i < y.size(); ++i) {
            errors += pred[i] != y[i];
        }
    }
    return static_cast<double>(errors) / (static_cast<double>(samples) * static_cast<double>(y.size()));
}

double pac_bayes_rhs(double delta, std::size_t m, double delta_conf, double r_hat)
{
    if (m < 1) {
        throw InputError("pac_bayes_bound: m must be at least 1");
    }
    if (!(delta_conf > 0.0 && delta_conf < 1.0)) {
        throw InputError("pac_bayes_bound: confidence parameter must lie in (0, 1)");
    }
    if (!std::isfinite(delta)) {
        throw InputError("pac_bayes_bound: Delta is not finite");
    }
    const double md = static_cast<double>(m);
    const double radicand = (delta + 2.0 * std::log(1.0 / delta_conf) + 2.0 * std::log(md) + 4.0) / (4.0 * md - 2.0);
    return r_hat + std::sqrt(std::max(radicand, 0.0));
}

BoundReport pac_bayes_bound(const DeltaComponents& components, std::size_t m, double delta_conf, double r_hat,
                            std::optional<double> test_risk)
{
    BoundReport r;
    r.components = components;
    r.m = m;
    r.delta_conf = delta_conf;
    r.empirical_risk = r_hat;
    r.bound_rhs = pac_bayes_rhs(components.delta, m, delta_conf, r_hat);
    r.vacuous = r.bound_rhs >= 1.0;
    if (test_risk) {
        r.test_risk = test_risk;
        r.gap = *test_risk - r_hat;
        r.holds = *test_risk <= r.bound_rhs;
    }
    return r;
}

Json bound_to_json(const BoundReport& r)
{
    const DeltaComponents& c = r.components;
    Json j{{"kl_q1_p1", c.kl_q1_p1},
           {"trace_term", c.trace_term},
           {"logdet_term", c.logdet_term},
           {"frob_terms", c.frob_terms},
           {"dim", c.dim},
           {"delta", c.delta},
           {"m", r.m},
           {"delta_conf", r.delta_conf},
           {"bound_rhs", r.bound_rhs},
           {"empirical_risk", r.empirical_risk},
           {"vacuous", r.vacuous},
           {"sigma2_iterates", r.sigma2_iterates}};
    j["test_risk"] = r.test_risk ? Json(*r.test_risk) : Json(nullptr);
    j["gap"] = r.gap ? Json(*r.gap) : Json(nullptr);
    j["holds"] = r.holds ? Json(*r.holds) : Json(nullptr);
    return j;
}

} // namespace stfbnn
