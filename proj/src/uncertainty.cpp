#include "stfbnn/uncertainty.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <sstream>

namespace stfbnn {

namespace {

constexpr double kPiOver8 = std::numbers::pi / 8.0;

std::ofstream open_csv(const std::filesystem::path& path)
{
    if (path.has_parent_path()) {
        std::filesystem::create_directories(path.parent_path());
    }
    std::ofstream out(path);
    if (!out) {
        throw IoError("cannot write " + path.string());
    }
    out.precision(17);
    return out;
}

bool same_pattern(const std::vector<std::vector<bool>>& a, const std::vector<std::vector<bool>>& b) { return a == b; }

} // namespace

PredictiveSummary PredictiveSummary::from_probs(Matrix probs, int mc_samples)
{
    PredictiveSummary s;
    s.mc_samples = mc_samples;
    s.confidence = probs.rowwise().maxCoeff();
    s.predicted = argmax_rows(probs);
    s.mean_probs = std::move(probs);
    return s;
}

Vector PredictiveSummary::true_class_confidence(const Labels& labels) const
{
    require_dims(static_cast<Eigen::Index>(labels.size()), mean_probs.rows(), "true_class_confidence labels");
    Vector p(mean_probs.rows());
    for (Eigen::Index i = 0; i < p.size(); ++i) {
        const int y = labels[static_cast<std::size_t>(i)];
        if (y < 0 || y >= mean_probs.cols()) {
            throw InputError("true_class_confidence: label out of range");
        }
        p(i) = mean_probs(i, y);
    }
    return p;
}

double PredictiveSummary::accuracy(const Labels& labels) const
{
    require_dims(static_cast<Eigen::Index>(labels.size()), static_cast<Eigen::Index>(predicted.size()),
                 "summary accuracy labels");
    if (labels.empty()) {
        return 0.0;
    }
    std::size_t hit = 0;
    for (std::size_t i = 0; i < labels.size(); ++i) {
        hit += predicted[i] == labels[i];
    }
    return static_cast<double>(hit) / static_cast<double>(labels.size());
}

PredictiveSummary mc_predict(const StfModel& stf, const Matrix& x, int samples, Prng& prng)
{
    if (samples < 1) {
        throw InputError("mc_predict: need at least one sample");
    }
    const std::size_t k = stf.bayes_index();
    const Matrix inputs = k > 0 ? activations_through(stf.base(), x, k - 1) : x;
    Matrix sum;
    for (int s = 0; s < samples; ++s) {
        const Mlp model = stf.realize(sample_weights(stf.bayes(), prng));
        const Matrix p = class_probabilities(logits(model, inputs, k));
        if (s == 0) {
            sum = p;
        } else {
            sum += p;
        }
    }
    return PredictiveSummary::from_probs(sum / static_cast<double>(samples), samples);
}

PredictiveSummary predict_deterministic(const Mlp& model, const Matrix& x)
{
    return PredictiveSummary::from_probs(class_probabilities(logits(model, x)), 1);
}

const char* to_string(EceNormalization n)
{
    return n == EceNormalization::sample_count ? "sample_count" : "bin_count";
}

EceNormalization ece_normalization_from_string(const std::string& s)
{
    if (s == "sample_count") {
        return EceNormalization::sample_count;
    }
    if (s == "bin_count") {
        return EceNormalization::bin_count;
    }
    throw InputError("unknown ECE normalization '" + s + "'");
}

EceReport ece(const Vector& confidence, const Labels& predicted, const Labels& labels, int bins,
              EceNormalization normalization)
{
    if (bins < 1) {
        throw InputError("ece: need at least one bin");
    }
    const auto n = static_cast<std::size_t>(confidence.size());
    if (predicted.size() != n || labels.size() != n) {
        throw DimensionError("ece: confidence, prediction and label counts differ");
    }
    EceReport r;
    r.bins = bins;
    r.normalization = normalization;
    r.total = n;
    r.per_bin.resize(static_cast<std::size_t>(bins));
    std::vector<double> hits(static_cast<std::size_t>(bins), 0.0);
    std::vector<double> conf(static_cast<std::size_t>(bins), 0.0);
    const double m = bins;
    for (std::size_t i = 0; i < n; ++i) {
        const double c = confidence(static_cast<Eigen::Index>(i));
        if (!(c >= 0.0 && c <= 1.0)) {
            throw InputError("ece: confidence outside [0, 1]");
        }
        // bin b covers (b/M, (b+1)/M]
        auto b = static_cast<long>(std::ceil(c * m)) - 1;
        if (b >= 0 && c <= static_cast<double>(b) / m) {
            --b;
        }
        if (b + 1 < bins && c > static_cast<double>(b + 1) / m) {
            ++b;
        }
        b = std::clamp(b, 0L, static_cast<long>(bins - 1));
        const auto slot = static_cast<std::size_t>(b);
        ++r.per_bin[slot].count;
        hits[slot] += predicted[i] == labels[i];
        conf[slot] += c;
    }
    const double denom = normalization == EceNormalization::sample_count ? static_cast<double>(n) : m;
    for (std::size_t b = 0; b < r.per_bin.size(); ++b) {
        EceBin& bin = r.per_bin[b];
        bin.lower = static_cast<double>(b) / m;
        bin.upper = static_cast<double>(b + 1) / m;
        if (bin.count == 0) {
            continue;
        }
        const double cnt = static_cast<double>(bin.count);
        bin.accuracy = hits[b] / cnt;
        bin.confidence = conf[b] / cnt;
        if (denom > 0) {
            r.ece += cnt / denom * std::abs(bin.accuracy - bin.confidence);
        }
    }
    return r;
}

EceReport ece(const PredictiveSummary& summary, const Labels& labels, int bins, EceNormalization normalization)
{
    return ece(summary.confidence, summary.predicted, labels, bins, normalization);
}

std::vector<ThresholdPoint> accuracy_at_threshold(const PredictiveSummary& summary, const Labels& labels,
                                                  const std::vector<double>& thresholds)
{
    const auto n = static_cast<std::size_t>(summary.confidence.size());
    require_dims(static_cast<Eigen::Index>(labels.size()), static_cast<Eigen::Index>(n), "threshold curve labels");
    std::vector<ThresholdPoint> curve;
    for (double t : thresholds) {
        if (!(t >= 0.0 && t <= 1.0)) {
            throw InputError("accuracy_at_threshold: threshold outside [0, 1]");
        }
        ThresholdPoint p;
        p.threshold = t;
        std::size_t hit = 0;
        for (std::size_t i = 0; i < n; ++i) {
            if (summary.confidence(static_cast<Eigen::Index>(i)) >= t) {
                ++p.retained;
                hit += summary.predicted[i] == labels[i];
            }
        }
        p.coverage = n == 0 ? 0.0 : static_cast<double>(p.retained) / static_cast<double>(n);
        if (p.retained > 0) {
            p.accuracy = static_cast<double>(hit) / static_cast<double>(p.retained);
        }
        curve.push_back(p);
    }
    return curve;
}

Matrix pre_activation_gradient(const Mlp& model, const Matrix& x, std::size_t k)
{
    if (!model.binary_logit()) {
        throw UsageError("pre_activation_gradient: model output is not a scalar logit");
    }
    if (k >= model.depth()) {
        throw InputError("pre_activation_gradient: layer out of range");
    }
    auto pass = forward(model, x);
    const Matrix& pre = pass.cache.pre[k];
    if (k + 1 == model.depth()) {
        return Matrix::Ones(x.rows(), 1);
    }
    const Matrix ones = Matrix::Ones(x.rows(), 1);
    Matrix d = backward(model, pass.cache, ones, BackwardOptions{k + 1, true}).input;
    if (model.layer(k).activation == Activation::relu) {
        d = (pre.array() > 0.0).select(d, 0.0);
    }
    return d;
}

ProbitResult probit_logit(const StfModel& stf, const Matrix& x)
{
    if (!stf.binary_logit()) {
        throw UsageError("probit_logit: model output is not a scalar logit");
    }
    const Mlp& mean = stf.mean_model();
    const std::size_t k = stf.bayes_index();
    const Matrix a = k > 0 ? activations_through(mean, x, k - 1) : x;
    const Matrix d = pre_activation_gradient(mean, x, k); // batch x r
    const VariationalLayer& v = stf.bayes();
    const Matrix var_w = v.sigma_w().array().square();
    const Vector var_b = v.sigma_b().array().square();

    // d1' Sigma1 d1 with d1 = (D_i a_j, D_i) per row
    const Matrix spread = (a.array().square().matrix() * var_w.transpose()).rowwise() + var_b.transpose();

    ProbitResult r;
    r.mean_logit = logits(mean, x).col(0);
    r.variance = (d.array().square() * spread.array()).rowwise().sum();
    r.z = r.mean_logit.array() / (1.0 + kPiOver8 * r.variance.array()).sqrt();
    r.confidence = sigmoid(r.z);
    return r;
}

double AsymptoticBound::abs_logit_at(double delta, const VariationalLayer& layer) const
{
    const double inv = 1.0 / delta;
    const Matrix var_w = layer.sigma_w().array().square();
    const Vector var_b = layer.sigma_b().array().square();
    const Vector u2 = u.array().square();
    const double num = std::abs(u.dot(w * direction) + inv * (u.dot(b) + c));
    const double quad = u2.dot(var_w * direction.array().square().matrix()) + inv * inv * u2.dot(var_b);
    return num / std::sqrt(inv * inv + kPiOver8 * quad);
}

AsymptoticBound asymptotic_bound(const StfModel& stf, const Vector& x)
{
    if (!stf.binary_logit()) {
        throw UsageError("asymptotic_bound: model output is not a scalar logit");
    }
    if (stf.bayes_index() != 0) {
        throw UsageError("asymptotic_bound: the variational layer must be the first layer");
    }
    const Mlp& mean = stf.mean_model();
    require_dims(x.size(), mean.input_dim(), "asymptotic_bound direction");
    if (x.isZero(0.0)) {
        throw InputError("asymptotic_bound: direction must be nonzero");
    }
    require_finite(x, "asymptotic_bound direction");

    AsymptoticBound r;
    r.direction = x;
    double delta = 1.0;
    auto current = activation_pattern(mean, x);
    int stable = 0;
    double start = delta;
    const double limit = std::ldexp(1.0, 64);
    while (stable < 3) {
        if (delta >= limit) {
            std::ostringstream os;
            os << "asymptotic_bound: activation pattern not stable by delta = 2^64 along direction ["
               << x.transpose().format(Eigen::IOFormat(Eigen::StreamPrecision, 0, ", ")) << "]";
            throw RegionError(os.str());
        }
        delta *= 2.0;
        auto next = activation_pattern(mean, (delta * x).eval());
        if (same_pattern(next, current)) {
            ++stable;
        } else {
            stable = 0;
            start = delta;
            current = std::move(next);
        }
    }
    r.delta_star = start;
    r.pattern = current;

    const Vector at = r.delta_star * x;
    const Matrix xin = at.transpose();
    r.u = pre_activation_gradient(mean, xin, 0).row(0).transpose();
    r.w = stf.bayes().mu_w;
    r.b = stf.bayes().mu_b;
    r.c = logits(mean, xin)(0, 0) - r.u.dot(r.w * at + r.b);
    r.lambda_min_sigma1 = stf.bayes().sigma_w().array().square().minCoeff();

    const double u_norm = r.u.norm();
    r.s_min_reduced = u_norm;
    const Eigen::Index rows = r.w.rows() * r.w.cols();
    const Eigen::Index n = r.w.cols();
    if (rows * n <= 4'000'000) {
        // gradient of u'w x w.r.t. vec(w) is x-linear: entry (i*n + j, j) = u_i
        Matrix a = Matrix::Zero(rows, n);
        for (Eigen::Index i = 0; i < r.w.rows(); ++i) {
            for (Eigen::Index j = 0; j < n; ++j) {
                a(i * n + j, j) = r.u(i);
            }
        }
        const Eigen::JacobiSVD<Matrix> svd(a);
        r.s_min_direct = svd.singularValues().minCoeff();
    } else {
        r.s_min_direct = std::numeric_limits<double>::quiet_NaN();
    }

    const double lambda_part = std::sqrt(kPiOver8 * r.lambda_min_sigma1);
    if (u_norm == 0.0) {
        // f is constant far out, so nothing limits its confidence
        r.bound_logit = std::numeric_limits<double>::infinity();
        r.bound_confidence = 1.0;
    } else {
        r.bound_logit = u_norm * r.w.norm() / (r.s_min_reduced * lambda_part);
        r.bound_confidence = sigmoid(r.bound_logit);
    }

    const Matrix var_w = stf.bayes().sigma_w().array().square();
    const double quad = r.u.array().square().matrix().dot(var_w * x.array().square().matrix());
    r.limit_abs_logit = quad > 0.0 ? std::abs(r.u.dot(r.w * x)) / std::sqrt(kPiOver8 * quad)
                                   : std::numeric_limits<double>::infinity();
    if (u_norm == 0.0) {
        r.limit_abs_logit = std::abs(r.c + r.u.dot(r.b)) > 0.0 ? std::numeric_limits<double>::infinity() : 0.0;
    }
    return r;
}

ScaleSweep scale_sweep(const StfModel& stf, const Matrix& directions, const std::vector<double>& deltas)
{
    for (std::size_t i = 0; i < deltas.size(); ++i) {
        if (!(deltas[i] > 0.0) || (i > 0 && deltas[i] <= deltas[i - 1])) {
            throw InputError("scale_sweep: deltas must be positive and increasing");
        }
    }
    ScaleSweep sweep;
    for (Eigen::Index d = 0; d < directions.rows(); ++d) {
        const Vector x = directions.row(d).transpose();
        sweep.bounds.push_back(asymptotic_bound(stf, x));
        Matrix scaled(static_cast<Eigen::Index>(deltas.size()), x.size());
        for (std::size_t i = 0; i < deltas.size(); ++i) {
            scaled.row(static_cast<Eigen::Index>(i)) = deltas[i] * x.transpose();
        }
        const ProbitResult p = probit_logit(stf, scaled);
        for (std::size_t i = 0; i < deltas.size(); ++i) {
            sweep.rows.push_back({static_cast<std::size_t>(d), deltas[i],
                                  sigmoid(std::abs(p.z(static_cast<Eigen::Index>(i)))),
                                  sweep.bounds.back().bound_confidence});
        }
    }
    return sweep;
}

void write_ece_csv(const std::filesystem::path& path, const EceReport& report)
{
    auto out = open_csv(path);
    out << "bin,lower,upper,count,acc,conf\n";
    for (std::size_t b = 0; b < report.per_bin.size(); ++b) {
        const EceBin& bin = report.per_bin[b];
        out << b + 1 << ',' << bin.lower << ',' << bin.upper << ',' << bin.count << ',' << bin.accuracy << ','
            << bin.confidence << '\n';
    }
}

void write_threshold_csv(const std::filesystem::path& path, const std::vector<ThresholdPoint>& curve)
{
    auto out = open_csv(path);
    out << "threshold,retained,coverage,accuracy\n";
    for (const auto& p : curve) {
        out << p.threshold << ',' << p.retained << ',' << p.coverage << ',';
        if (p.accuracy) {
            out << *p.accuracy;
        }
        out << '\n';
    }
}

void write_scale_sweep_csv(const std::filesystem::path& path, const ScaleSweep& sweep)
{
    auto out = open_csv(path);
    out << "direction_id,delta,confidence,bound\n";
    for (const auto& r : sweep.rows) {
        out << r.direction << ',' << r.delta << ',' << r.confidence << ',' << r.bound << '\n';
    }
}

Json ece_to_json(const EceReport& report)
{
    Json bins = Json::array();
    for (const auto& b : report.per_bin) {
        bins.push_back({{"lower", b.lower}, {"upper", b.upper}, {"count", b.count}, {"acc", b.accuracy},
                        {"conf", b.confidence}});
    }
    return Json{{"bins", report.bins},
                {"normalization", to_string(report.normalization)},
                {"total", report.total},
                {"ece", report.ece},
                {"per_bin", bins}};
}

Json threshold_curve_to_json(const std::vector<ThresholdPoint>& curve)
{
    Json out = Json::array();
    for (const auto& p : curve) {
        out.push_back({{"threshold", p.threshold},
                       {"retained", p.retained},
                       {"coverage", p.coverage},
                       {"accuracy", p.accuracy ? Json(*p.accuracy) : Json(nullptr)}});
    }
    return out;
}

} // namespace stfbnn
