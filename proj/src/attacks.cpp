#include "stfbnn/attacks.hpp"

#include "stfbnn/checkpoint.hpp"
#include "stfbnn/uncertainty.hpp"

#include <algorithm>
#include <cmath>

namespace stfbnn {

namespace {

double sign(double v)
{
    return static_cast<double>((v > 0.0) - (v < 0.0));
}

// Clamp to the radius ball around x, then to the feature range. Rounding in
// x +- radius can land one ulp outside the ball, so such entries are stepped
// back toward x first. When x itself lies in the range, clipping only moves
// entries toward x and the ball still holds; otherwise the range wins.
Matrix project(const Matrix& v, const Matrix& x, double radius, const FeatureRange& clip)
{
    Matrix out = v.cwiseMax((x.array() - radius).matrix()).cwiseMin((x.array() + radius).matrix());
    for (Eigen::Index i = 0; i < out.size(); ++i) {
        while (std::abs(out(i) - x(i)) > radius) {
            out(i) = std::nextafter(out(i), x(i));
        }
    }
    return clip.clip(out);
}

void check_batch(const Mlp& model, const Matrix& x, const Labels& y, const char* who)
{
    require_dims(x.cols(), model.input_dim(), std::string(who) + " input width");
    require_dims(static_cast<Eigen::Index>(y.size()), x.rows(), std::string(who) + " labels");
}

Json range_to_json(const FeatureRange& r)
{
    return Json{{"lo", std::isfinite(r.lo) ? Json(r.lo) : Json(nullptr)},
                {"hi", std::isfinite(r.hi) ? Json(r.hi) : Json(nullptr)}};
}

} // namespace

AttackConfig AttackConfig::fgsm(double radius, FeatureRange clip)
{
    AttackConfig c;
    c.radius = radius;
    c.steps = 1;
    c.step_size = radius;
    c.random_start = false;
    c.clip = clip;
    return c;
}

AttackConfig AttackConfig::pgd(double radius, FeatureRange clip)
{
    AttackConfig c;
    c.radius = radius;
    c.clip = clip;
    return c;
}

double AttackConfig::effective_step() const
{
    return step_size ? *step_size : 2.5 * radius / static_cast<double>(steps);
}

void AttackConfig::validate() const
{
    if (!(radius >= 0.0) || !std::isfinite(radius)) {
        throw InputError("attack: radius must be finite and nonnegative");
    }
    if (steps < 1) {
        throw InputError("attack: steps must be at least 1");
    }
    if (step_size && !(*step_size > 0.0)) {
        throw InputError("attack: step_size must be positive");
    }
    if (clip.lo > clip.hi) {
        throw InputError("attack: empty clip range");
    }
}

const char* to_string(GradientMode m)
{
    return m == GradientMode::posterior_mean ? "posterior_mean" : "sampled";
}

GradientMode gradient_mode_from_string(const std::string& s)
{
    if (s == "posterior_mean") {
        return GradientMode::posterior_mean;
    }
    if (s == "sampled") {
        return GradientMode::sampled;
    }
    throw UsageError("unknown gradient mode '" + s + "'");
}

Matrix input_gradient(const Mlp& model, const Matrix& x, const Labels& y)
{
    check_batch(model, x, y, "input_gradient");
    const ForwardPass pass = forward(model, x);
    const LossResult loss = classification_loss(pass.logits, y);
    return backward(model, pass.cache, loss.dlogits, BackwardOptions{0, true}).input;
}

Matrix fgsm(const Mlp& model, const Matrix& x, const Labels& y, double radius, const FeatureRange& clip)
{
    if (!(radius >= 0.0)) {
        throw InputError("fgsm: radius must be nonnegative");
    }
    if (radius == 0.0) {
        return x;
    }
    const Matrix g = input_gradient(model, x, y);
    return project(x + radius * g.unaryExpr(&sign), x, radius, clip);
}

Matrix pgd(const Mlp& model, const Matrix& x, const Labels& y, const AttackConfig& cfg, Prng& prng)
{
    cfg.validate();
    if (cfg.radius == 0.0) {
        return x;
    }
    const double step = cfg.effective_step();
    Matrix adv = x;
    if (cfg.random_start) {
        for (Eigen::Index i = 0; i < adv.size(); ++i) {
            adv(i) += prng.uniform(-cfg.radius, cfg.radius);
        }
        adv = project(adv, x, cfg.radius, cfg.clip);
    }
    for (int s = 0; s < cfg.steps; ++s) {
        const Matrix g = input_gradient(model, adv, y);
        adv = project(adv + step * g.unaryExpr(&sign), x, cfg.radius, cfg.clip);
    }
    return adv;
}

Mlp attack_surrogate(const StfModel& stf, GradientMode mode, Prng& prng)
{
    if (mode == GradientMode::posterior_mean) {
        return stf.mean_model();
    }
    return stf.realize(sample_weights(stf.bayes(), prng));
}

TrainResult adversarial_train(Mlp model, const Dataset& train, const TrainConfig& cfg, const AttackConfig& attack,
                              Prng& prng, const TrainHooks& hooks)
{
    attack.validate();
    TrainHooks h = hooks;
    if (attack.radius > 0.0) {
        auto stream = std::make_shared<Prng>(prng.derive("adversarial"));
        h.perturb = [attack, stream](const Mlp& m, const Matrix& xb, const Labels& yb) {
            return pgd(m, xb, yb, attack, *stream);
        };
    }
    return train_deterministic(std::move(model), train.features, train.labels, cfg, prng, h);
}

double attack_eval(const Mlp& model, const Dataset& d, const AttackConfig& cfg, Prng& prng)
{
    const Matrix adv = pgd(model, d.features, d.labels, cfg, prng);
    return accuracy(model, adv, d.labels);
}

double attack_eval(const StfModel& stf, const Dataset& d, const AttackConfig& cfg, Prng& prng, int mc_samples,
                   GradientMode mode)
{
    const Mlp target = attack_surrogate(stf, mode, prng);
    const Matrix adv = pgd(target, d.features, d.labels, cfg, prng);
    return mc_predict(stf, adv, mc_samples, prng).accuracy(d.labels);
}

AttackReport attack_sweep(const Mlp& model, const Dataset& d, const AttackConfig& base, std::span<const double> radii,
                          Prng& prng)
{
    AttackReport r;
    r.model_kind = "deterministic";
    r.checkpoint_hash = json_digest(mlp_to_json(model));
    r.attack = base;
    r.clean_accuracy = accuracy(model, d.features, d.labels);
    for (double radius : radii) {
        AttackConfig c = base;
        c.radius = radius;
        r.points.push_back({radius, attack_eval(model, d, c, prng)});
    }
    return r;
}

AttackReport attack_sweep(const StfModel& stf, const Dataset& d, const AttackConfig& base,
                          std::span<const double> radii, Prng& prng, int mc_samples, GradientMode mode)
{
    AttackReport r;
    r.model_kind = "stf";
    r.checkpoint_hash = json_digest(stf_to_json(stf));
    r.attack = base;
    r.mc_samples = mc_samples;
    r.gradient_mode = mode;
    r.clean_accuracy = mc_predict(stf, d.features, mc_samples, prng).accuracy(d.labels);
    for (double radius : radii) {
        AttackConfig c = base;
        c.radius = radius;
        r.points.push_back({radius, attack_eval(stf, d, c, prng, mc_samples, mode)});
    }
    return r;
}

Json attack_report_to_json(const AttackReport& r)
{
    Json points = Json::array();
    for (const auto& p : r.points) {
        points.push_back({{"radius", p.radius}, {"accuracy", p.accuracy}});
    }
    Json attack{{"steps", r.attack.steps},
                {"random_start", r.attack.random_start},
                {"clip", range_to_json(r.attack.clip)}};
    attack["step_size"] = r.attack.step_size ? Json(*r.attack.step_size) : Json("2.5*radius/steps");
    return Json{{"model_kind", r.model_kind},
                {"checkpoint_hash", r.checkpoint_hash},
                {"attack", attack},
                {"mc_samples", r.mc_samples},
                {"gradient_mode", to_string(r.gradient_mode)},
                {"clean_accuracy", r.clean_accuracy},
                {"points", points}};
}

const char* to_string(MiScore s)
{
    return s == MiScore::true_class ? "true_class" : "max_confidence";
}

MiScore mi_score_from_string(const std::string& s)
{
    if (s == "true_class") {
        return MiScore::true_class;
    }
    if (s == "max_confidence") {
        return MiScore::max_confidence;
    }
    throw UsageError("unknown membership score '" + s + "'");
}

MiReport mi_attack_scores(std::span<const double> train_scores, std::span<const double> test_scores)
{
    if (train_scores.empty() || test_scores.empty()) {
        throw InputError("mi_attack: both splits must be nonempty");
    }
    std::vector<double> tr(train_scores.begin(), train_scores.end());
    std::vector<double> te(test_scores.begin(), test_scores.end());
    for (double v : tr) {
        if (!std::isfinite(v)) {
            throw InputError("mi_attack: non-finite score");
        }
    }
    for (double v : te) {
        if (!std::isfinite(v)) {
            throw InputError("mi_attack: non-finite score");
        }
    }
    std::sort(tr.begin(), tr.end());
    std::sort(te.begin(), te.end());

    std::vector<double> zetas;
    zetas.reserve(tr.size() + te.size() + 2);
    zetas.push_back(0.0);
    zetas.insert(zetas.end(), tr.begin(), tr.end());
    zetas.insert(zetas.end(), te.begin(), te.end());
    zetas.push_back(1.0 + 1e-9);
    std::sort(zetas.begin(), zetas.end());
    zetas.erase(std::unique(zetas.begin(), zetas.end()), zetas.end());

    MiReport r;
    r.train_count = tr.size();
    r.test_count = te.size();
    const double ntr = static_cast<double>(tr.size());
    const double nte = static_cast<double>(te.size());
    r.acc_optim = -1.0;
    for (double z : zetas) {
        const auto below_tr = std::lower_bound(tr.begin(), tr.end(), z) - tr.begin();
        const auto below_te = std::lower_bound(te.begin(), te.end(), z) - te.begin();
        const double acc =
            0.5 * ((ntr - static_cast<double>(below_tr)) / ntr + static_cast<double>(below_te) / nte);
        r.thresholds.push_back(z);
        r.accuracy.push_back(acc);
        if (acc > r.acc_optim) {
            r.acc_optim = acc;
            r.zeta_optim = z;
        }
    }
    return r;
}

std::vector<double> membership_scores(const Matrix& probs, const Labels& labels, MiScore score)
{
    require_dims(static_cast<Eigen::Index>(labels.size()), probs.rows(), "membership_scores labels");
    std::vector<double> out(labels.size());
    for (std::size_t i = 0; i < labels.size(); ++i) {
        const auto row = static_cast<Eigen::Index>(i);
        out[i] = score == MiScore::true_class ? probs(row, labels[i]) : probs.row(row).maxCoeff();
    }
    return out;
}

MiReport mi_attack(const Mlp& model, const Dataset& train, const Dataset& test, MiScore score)
{
    const auto tr = membership_scores(class_probabilities(logits(model, train.features)), train.labels, score);
    const auto te = membership_scores(class_probabilities(logits(model, test.features)), test.labels, score);
    MiReport r = mi_attack_scores(tr, te);
    r.score = score;
    r.checkpoint_hash = json_digest(mlp_to_json(model));
    return r;
}

MiReport mi_attack(const StfModel& stf, const Dataset& train, const Dataset& test, int mc_samples, Prng& prng,
                   MiScore score)
{
    const auto tr = membership_scores(mc_predict(stf, train.features, mc_samples, prng).mean_probs, train.labels, score);
    const auto te = membership_scores(mc_predict(stf, test.features, mc_samples, prng).mean_probs, test.labels, score);
    MiReport r = mi_attack_scores(tr, te);
    r.score = score;
    r.checkpoint_hash = json_digest(stf_to_json(stf));
    return r;
}

Json mi_report_to_json(const MiReport& r)
{
    return Json{{"score", to_string(r.score)},
                {"checkpoint_hash", r.checkpoint_hash},
                {"train_count", r.train_count},
                {"test_count", r.test_count},
                {"zeta_optim", r.zeta_optim},
                {"acc_optim", r.acc_optim},
                {"thresholds", r.thresholds},
                {"accuracy", r.accuracy}};
}

} // namespace stfbnn
