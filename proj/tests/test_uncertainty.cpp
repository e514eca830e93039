#include "doctest.h"

#include "stfbnn/uncertainty.hpp"

#include <array>
#include <numbers>

using namespace stfbnn;

namespace {

struct BinaryMoons {
    Mlp pretrained;
    StfModel stf;
    Dataset train;
    Dataset test;
};

const BinaryMoons& binary_moons()
{
    static const BinaryMoons fixture = [] {
        Prng prng(2024);
        BinaryMoons f;
        f.train = make_two_moons(400, 0.1, prng);
        f.test = make_two_moons(200, 0.1, prng);
        const std::array<Eigen::Index, 4> dims{2, 32, 32, 1};
        TrainConfig cfg;
        cfg.epochs = 60;
        cfg.batch_size = 32;
        cfg.sgd.learning_rate = 0.05;
        f.pretrained = train_deterministic(Mlp::he_init(dims, prng), f.train.features, f.train.labels, cfg, prng).model;
        ElboConfig ecfg;
        ecfg.batch_size = 32;
        f.stf = stf_train(f.pretrained, 1, f.train, ecfg, prng).model;
        return f;
    }();
    return fixture;
}

StfModel with_sigma(const StfModel& stf, double sigma)
{
    VariationalLayer v = stf.bayes();
    v.rho_w.setConstant(inverse_softplus(sigma));
    v.rho_b.setConstant(inverse_softplus(sigma));
    StfModel out = stf;
    out.set_bayes(std::move(v));
    return out;
}

// d1' Sigma1 d1 with d1 from central differences of the mean logit.
double variance_oracle(const StfModel& stf, const Vector& x)
{
    const Matrix row = x.transpose();
    VariationalLayer v = stf.bayes();
    const Matrix var_w = v.sigma_w().array().square();
    const Vector var_b = v.sigma_b().array().square();
    auto f = [&](const VariationalLayer& layer) {
        StfModel probe = stf;
        probe.set_bayes(layer);
        return logits(probe.mean_model(), row)(0, 0);
    };
    const double h = 1e-6;
    double total = 0.0;
    for (Eigen::Index i = 0; i < v.mu_w.rows(); ++i) {
        for (Eigen::Index j = 0; j < v.mu_w.cols(); ++j) {
            VariationalLayer up = v;
            VariationalLayer dn = v;
            up.mu_w(i, j) += h;
            dn.mu_w(i, j) -= h;
            const double d = (f(up) - f(dn)) / (2 * h);
            total += d * d * var_w(i, j);
        }
        VariationalLayer up = v;
        VariationalLayer dn = v;
        up.mu_b(i) += h;
        dn.mu_b(i) -= h;
        const double d = (f(up) - f(dn)) / (2 * h);
        total += d * d * var_b(i);
    }
    return total;
}

} // namespace

TEST_CASE("predictive summaries")
{
    const auto& f = binary_moons();
    Prng prng(1);
    const auto s = mc_predict(f.stf, f.test.features, 20, prng);
    CHECK(s.mc_samples == 20);
    CHECK((s.mean_probs.rowwise().sum().array() - 1.0).abs().maxCoeff() < 1e-9);
    CHECK(s.confidence == s.mean_probs.rowwise().maxCoeff());
    CHECK(s.predicted == argmax_rows(s.mean_probs));
    CHECK(s.accuracy(f.test.labels) > 0.95);

    Prng a(5);
    Prng b(5);
    const auto s1 = mc_predict(f.stf, f.test.features, 1, a);
    const auto s2 = mc_predict(f.stf, f.test.features, 1, b);
    CHECK(s1.mean_probs == s2.mean_probs);

    const auto det = predict_deterministic(f.pretrained, f.test.features);
    CHECK(det.mc_samples == 1);
    const Vector truth = det.true_class_confidence(f.test.labels);
    for (Eigen::Index i = 0; i < truth.size(); ++i) {
        CHECK(truth(i) == det.mean_probs(i, f.test.labels[static_cast<std::size_t>(i)]));
    }
    CHECK_THROWS_AS(mc_predict(f.stf, f.test.features, 0, prng), InputError);
}

TEST_CASE("degenerate posterior predicts like the deterministic net")
{
    const auto& f = binary_moons();
    VariationalLayer v = f.stf.bayes();
    v.mu_w = f.pretrained.layer(0).weight;
    v.mu_b = f.pretrained.layer(0).bias;
    v.rho_w.setConstant(inverse_softplus(1e-12));
    v.rho_b.setConstant(inverse_softplus(1e-12));
    const StfModel degenerate(f.pretrained, 0, v);
    const auto det = predict_deterministic(f.pretrained, f.test.features);
    Prng prng(3);
    for (int s : {1, 7}) {
        const auto mc = mc_predict(degenerate, f.test.features, s, prng);
        CHECK((mc.mean_probs - det.mean_probs).cwiseAbs().maxCoeff() < 1e-6);
    }
}

TEST_CASE("MC predictions converge")
{
    const auto& f = binary_moons();
    Prng prng(4);
    const auto coarse = mc_predict(f.stf, f.test.features, 1000, prng);
    const auto fine = mc_predict(f.stf, f.test.features, 10000, prng);
    CHECK((coarse.mean_probs - fine.mean_probs).cwiseAbs().maxCoeff() < 0.01);
}

TEST_CASE("ECE examples")
{
    const Labels zeros(10, 0);
    CHECK(ece(Vector::Ones(10), zeros, zeros).ece == 0.0);

    Labels predicted(10, 1);
    Labels truth(10, 1);
    for (int i = 0; i < 4; ++i) {
        truth[static_cast<std::size_t>(i)] = 0;
    }
    CHECK(ece(Vector::Constant(10, 0.6), predicted, truth).ece == doctest::Approx(0.0).epsilon(1e-15));

    Vector two(2);
    two << 0.95, 0.95;
    const auto r = ece(two, Labels{1, 1}, Labels{1, 0}, 10);
    CHECK(r.ece == doctest::Approx(0.45));
    CHECK(r.per_bin[9].count == 2);
    CHECK(r.per_bin[9].accuracy == 0.5);
    CHECK(r.per_bin[9].confidence == 0.95);
    CHECK(ece(two, Labels{1, 1}, Labels{1, 0}, 10, EceNormalization::bin_count).ece == doctest::Approx(0.09));
}

TEST_CASE("ECE binning edges")
{
    // right-closed bins: 0.2 belongs to (0, 0.2], 0.6 to (0.4, 0.6]
    Vector c(5);
    c << 0.0, 0.2, 0.2000001, 0.6, 1.0;
    const Labels y(5, 0);
    const auto r = ece(c, y, y, 5);
    CHECK(r.per_bin[0].count == 2);
    CHECK(r.per_bin[1].count == 1);
    CHECK(r.per_bin[2].count == 1);
    CHECK(r.per_bin[4].count == 1);

    Prng prng(9);
    for (int m : {1, 3, 7, 10, 15, 100}) {
        for (int i = 1; i <= m; ++i) {
            Vector edge(1);
            edge << static_cast<double>(i) / m;
            const auto e = ece(edge, Labels{0}, Labels{0}, m);
            CHECK(e.per_bin[static_cast<std::size_t>(i - 1)].count == 1);
        }
    }
    Vector bad(1);
    bad << 1.5;
    CHECK_THROWS_AS(ece(bad, Labels{0}, Labels{0}), InputError);
    CHECK_THROWS_AS(ece(c, y, y, 0), InputError);
}

TEST_CASE("ECE is order invariant and bounded")
{
    Prng prng(10);
    for (int trial = 0; trial < 50; ++trial) {
        const std::size_t n = 1 + prng.uniform_index(200);
        Vector c(static_cast<Eigen::Index>(n));
        Labels p(n);
        Labels y(n);
        for (std::size_t i = 0; i < n; ++i) {
            c(static_cast<Eigen::Index>(i)) = prng.uniform();
            p[i] = static_cast<int>(prng.uniform_index(3));
            y[i] = static_cast<int>(prng.uniform_index(3));
        }
        const auto r = ece(c, p, y);
        CHECK(r.ece >= 0.0);
        CHECK(r.ece <= 1.0);
        std::size_t total = 0;
        for (const auto& b : r.per_bin) {
            total += b.count;
        }
        CHECK(total == n);

        const auto order = permutation(n, prng);
        Vector c2(c.size());
        Labels p2(n);
        Labels y2(n);
        for (std::size_t i = 0; i < n; ++i) {
            c2(static_cast<Eigen::Index>(i)) = c(static_cast<Eigen::Index>(order[i]));
            p2[i] = p[order[i]];
            y2[i] = y[order[i]];
        }
        const auto r2 = ece(c2, p2, y2);
        CHECK(r2.ece == doctest::Approx(r.ece).epsilon(1e-12));
        for (std::size_t b = 0; b < r.per_bin.size(); ++b) {
            CHECK(r2.per_bin[b].count == r.per_bin[b].count);
        }
    }
}

TEST_CASE("confidence threshold curve")
{
    const auto& f = binary_moons();
    Prng prng(11);
    const auto s = mc_predict(f.stf, f.test.features, 50, prng);
    std::vector<double> thresholds;
    for (int i = 0; i <= 20; ++i) {
        thresholds.push_back(i / 20.0);
    }
    const auto curve = accuracy_at_threshold(s, f.test.labels, thresholds);
    CHECK(curve.front().coverage == 1.0);
    CHECK(*curve.front().accuracy == s.accuracy(f.test.labels));
    for (std::size_t i = 1; i < curve.size(); ++i) {
        CHECK(curve[i].coverage <= curve[i - 1].coverage);
    }
    const double above = std::nextafter(s.confidence.maxCoeff(), 2.0);
    if (above <= 1.0) {
        const auto none = accuracy_at_threshold(s, f.test.labels, {above});
        CHECK(none[0].coverage == 0.0);
        CHECK(!none[0].accuracy.has_value());
    }
    CHECK(threshold_curve_to_json(curve).size() == curve.size());
    CHECK_THROWS_AS(accuracy_at_threshold(s, f.test.labels, {1.5}), InputError);
}

TEST_CASE("probit logit")
{
    const auto& f = binary_moons();
    const Matrix x = f.test.features.topRows(20);

    const StfModel flat = with_sigma(f.stf, std::numeric_limits<double>::min());
    const ProbitResult p0 = probit_logit(flat, x);
    CHECK(p0.z == p0.mean_logit);

    const StfModel tiny = with_sigma(f.stf, 1e-12);
    const ProbitResult pt = probit_logit(tiny, x);
    const Vector det = logits(tiny.mean_model(), x).col(0);
    CHECK((pt.confidence - sigmoid(det)).cwiseAbs().maxCoeff() < 1e-9);

    const ProbitResult p = probit_logit(f.stf, x);
    CHECK((p.mean_logit - logits(f.stf.mean_model(), x).col(0)).cwiseAbs().maxCoeff() == 0.0);
    for (Eigen::Index i = 0; i < 5; ++i) {
        const double oracle = variance_oracle(f.stf, x.row(i).transpose());
        CHECK(p.variance(i) == doctest::Approx(oracle).epsilon(1e-6));
    }
    CHECK((p.z.cwiseAbs().array() <= p.mean_logit.cwiseAbs().array()).all());

    // zero output gives confidence one half
    std::vector<DenseLayer> layers = f.stf.base().layers();
    layers.back().weight.setZero();
    layers.back().bias.setZero();
    const StfModel zero(Mlp(layers), 0, f.stf.bayes());
    CHECK((probit_logit(zero, x).confidence.array() == 0.5).all());

    // an ablation position also works
    Prng prng(12);
    ElboConfig cfg;
    cfg.epochs = 2;
    cfg.batch_size = 64;
    const StfModel second = stf_train(f.pretrained, 2, f.train, cfg, prng).model;
    const ProbitResult p2 = probit_logit(second, x);
    CHECK(p2.variance(0) == doctest::Approx(variance_oracle(second, x.row(0).transpose())).epsilon(1e-6));

    Prng q(13);
    const std::array<Eigen::Index, 3> multi{2, 4, 3};
    Mlp m = Mlp::he_init(multi, q);
    const StfModel multi_stf(m, 0, init_variational(4, 2, Activation::relu, q));
    CHECK_THROWS_AS(probit_logit(multi_stf, x), UsageError);
}

TEST_CASE("probit matches the Gaussian logit average")
{
    const auto& f = binary_moons();
    const Matrix x = f.test.features.topRows(50);
    const ProbitResult p = probit_logit(f.stf, x);
    // E[sigmoid(a)] for a ~ N(f_mu, d'Sigma d) by fine quadrature
    for (Eigen::Index i = 0; i < x.rows(); ++i) {
        const double sd = std::sqrt(p.variance(i));
        double acc = 0.0;
        double wsum = 0.0;
        for (int k = -4000; k <= 4000; ++k) {
            const double t = k / 500.0;
            const double w = std::exp(-0.5 * t * t);
            acc += w * sigmoid(p.mean_logit(i) + sd * t);
            wsum += w;
        }
        CHECK(std::abs(acc / wsum - p.confidence(i)) < 0.02);
    }
}

TEST_CASE("probit tracks the MC sigmoid average for a narrow posterior")
{
    const auto& f = binary_moons();
    const StfModel narrow = with_sigma(f.stf, 0.02);
    const Matrix x = f.test.features.topRows(20);
    const ProbitResult p = probit_logit(narrow, x);
    Prng prng(14);
    const auto mc = mc_predict(narrow, x, 20000, prng);
    CHECK((p.confidence - mc.mean_probs.col(1)).cwiseAbs().maxCoeff() < 0.02);
}

TEST_CASE("asymptotic bound")
{
    const auto& f = binary_moons();
    Prng prng(15);

    SUBCASE("reduced and direct singular values agree")
    {
        for (int i = 0; i < 10; ++i) {
            const Vector x = sample_gaussian(prng, 0.0, 1.0, 2, 1);
            const auto b = asymptotic_bound(f.stf, x);
            CHECK(std::abs(b.s_min_reduced - b.s_min_direct) <= 1e-9 * std::max(1.0, b.s_min_reduced));
            CHECK(b.bound_confidence > 0.5);
            CHECK(b.bound_confidence <= 1.0);
            CHECK(activation_pattern(f.stf.mean_model(), (1024.0 * b.delta_star * x).eval()) == b.pattern);
        }
    }

    SUBCASE("equal variances reduce to the weight norm")
    {
        const double sigma = 0.07;
        const StfModel eq = with_sigma(f.stf, sigma);
        const Vector x = sample_gaussian(prng, 0.0, 1.0, 2, 1);
        const auto b = asymptotic_bound(eq, x);
        const double expected = eq.bayes().mu_w.norm() / (sigma * std::sqrt(std::numbers::pi / 8.0));
        CHECK(b.bound_logit == doctest::Approx(expected).epsilon(1e-12));

        const auto wider = asymptotic_bound(with_sigma(f.stf, sigma * std::sqrt(2.0)), x);
        CHECK(wider.bound_logit < b.bound_logit);
    }

    SUBCASE("closed form matches the probit logit past the stable scale")
    {
        for (int i = 0; i < 10; ++i) {
            const Vector x = sample_gaussian(prng, 0.0, 1.0, 2, 1);
            const auto b = asymptotic_bound(f.stf, x);
            for (double mult : {1.0, 3.0, 1e3, 1e6}) {
                const double delta = b.delta_star * mult;
                const Matrix row = (delta * x).transpose();
                const double direct = std::abs(probit_logit(f.stf, row).z(0));
                const double closed = b.abs_logit_at(delta, f.stf.bayes());
                CHECK(std::abs(direct - closed) <= 1e-9 * std::max(1.0, direct));
            }
            CHECK(b.limit_abs_logit <= b.bound_logit);
        }
    }

    SUBCASE("errors")
    {
        CHECK_THROWS_AS(asymptotic_bound(f.stf, Vector::Zero(2)), InputError);
        CHECK_THROWS_AS(asymptotic_bound(f.stf, Vector::Ones(3)), DimensionError);

        // unit k switches on near delta = 1.5 * 4^k, so the pattern keeps changing every two doublings
        DenseLayer first{Matrix::Ones(32, 1), Vector(32), Activation::relu};
        for (int k = 0; k < 32; ++k) {
            first.bias(k) = -1.5 * std::pow(4.0, k + 1);
        }
        DenseLayer out{Matrix::Ones(1, 32), Vector::Zero(1), Activation::identity};
        VariationalLayer v;
        v.mu_w = first.weight;
        v.mu_b = first.bias;
        v.rho_w = Matrix::Constant(32, 1, -3.0);
        v.rho_b = Vector::Constant(32, -3.0);
        const StfModel far(Mlp({first, out}), 0, v);
        bool region_error = false;
        try {
            asymptotic_bound(far, Vector::Ones(1));
        } catch (const RegionError&) {
            region_error = true;
        }
        CHECK(region_error);

        ElboConfig cfg;
        cfg.epochs = 0;
        Prng q(1);
        const StfModel second = stf_train(f.pretrained, 2, f.train, cfg, q).model;
        CHECK_THROWS_AS(asymptotic_bound(second, Vector::Ones(2)), UsageError);
    }
}

TEST_CASE("scale sweep")
{
    const auto& f = binary_moons();
    Prng prng(16);
    const Matrix dirs = sample_gaussian(prng, 0.0, 1.0, 25, 2);
    std::vector<double> deltas;
    for (int e = 0; e <= 6; ++e) {
        deltas.push_back(std::pow(10.0, e));
    }
    const ScaleSweep sweep = scale_sweep(f.stf, dirs, deltas);
    CHECK(sweep.rows.size() == 25 * deltas.size());
    CHECK(sweep.bounds.size() == 25);
    for (Eigen::Index d = 0; d < dirs.rows(); ++d) {
        const auto base = static_cast<std::size_t>(d) * deltas.size();
        const ProbitResult at_one = probit_logit(f.stf, dirs.row(d));
        CHECK(sweep.rows[base].confidence == sigmoid(std::abs(at_one.z(0))));
        const double last = sweep.rows[base + 6].confidence;
        const double prev = sweep.rows[base + 5].confidence;
        if (sweep.bounds[static_cast<std::size_t>(d)].delta_star <= 1e5) {
            CHECK(std::abs(last - prev) < 1e-3);
        }
        for (std::size_t i = 0; i < deltas.size(); ++i) {
            CHECK(sweep.rows[base + i].confidence <= sweep.rows[base + i].bound + 1e-6);
        }
    }
    CHECK_THROWS_AS(scale_sweep(f.stf, dirs, {1.0, 1.0}), InputError);
    CHECK_THROWS_AS(scale_sweep(f.stf, dirs, {0.0, 1.0}), InputError);
}
