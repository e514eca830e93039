#include "doctest.h"

#include "stfbnn/bounds.hpp"

#include <array>
#include <cmath>
#include <numbers>

using namespace stfbnn;

namespace {

// Output layer over 2-D inputs, mean 0 and a common standard deviation.
StfModel linear_stf(double sigma, Prng& prng)
{
    const std::array<Eigen::Index, 2> dims{2, 1};
    Mlp base = Mlp::he_init(dims, prng);
    VariationalLayer v = init_variational(1, 2, Activation::identity, prng);
    v.mu_w.setZero();
    v.mu_b.setZero();
    v.rho_w.setConstant(inverse_softplus(sigma));
    v.rho_b.setConstant(inverse_softplus(sigma));
    return StfModel(base, 0, v);
}

// Per-scalar contribution v - 2 - log v + v^2, summed independently.
double block_oracle(const Vector& v)
{
    double s = 0.0;
    for (double x : v) {
        s += x - 2.0 - std::log(x) + x * x;
    }
    return s;
}

} // namespace

TEST_CASE("delta term examples")
{
    const std::array<Vector, 2> identity{Vector::Ones(7), Vector::Ones(5)};
    const DeltaComponents c = delta_from_blocks(0.0, identity);
    CHECK(c.dim == 12);
    CHECK(c.trace_term == doctest::Approx(-12.0));
    CHECK(c.logdet_term == 0.0);
    CHECK(c.frob_terms == doctest::Approx(12.0));
    CHECK(c.delta == doctest::Approx(0.0));

    const std::array<Vector, 2> scalar{Vector::Ones(1), Vector::Ones(1)};
    CHECK(delta_from_blocks(0.0, scalar).delta == doctest::Approx(0.0));

    // mu = 0 and sigma = 1 on the variational layer, unit frozen variances
    Prng prng(3);
    const StfModel stf = linear_stf(1.0, prng);
    Sigma2Estimate s2;
    s2.variance = Vector::Ones(4);
    const DeltaComponents d = delta_term(stf.bayes(), s2);
    CHECK(d.dim == 7);
    CHECK(std::abs(d.kl_q1_p1) < 1e-12);
    CHECK(std::abs(d.delta) < 1e-12);
    CHECK(d.kl_q1_p1 == kl_gaussian_to_std_normal(stf.bayes()));

    // inflating one variance above 1 raises trace - logdet
    double last = 0.0;
    for (double v : {1.0, 1.5, 2.0, 4.0, 10.0}) {
        Vector blk = Vector::Ones(3);
        blk(1) = v;
        const std::array<Vector, 1> one{blk};
        const DeltaComponents e = delta_from_blocks(0.0, one);
        const double part = e.trace_term - e.logdet_term;
        if (v > 1.0) {
            CHECK(part > last);
        }
        last = part;
    }
}

TEST_CASE("delta term is additive over blocks")
{
    Prng prng(11);
    for (int trial = 0; trial < 50; ++trial) {
        const Vector a = (Vector::Random(1 + trial % 9).array().abs() * 3.0 + 1e-3).matrix();
        const Vector b = (Vector::Random(1 + trial % 5).array().abs() * 0.5 + 1e-6).matrix();
        Vector ab(a.size() + b.size());
        ab << a, b;
        const double kl = 0.1 * trial;
        const std::array<Vector, 2> split{a, b};
        const std::array<Vector, 1> joined{ab};
        const double expect = 2.0 * kl + block_oracle(a) + block_oracle(b);
        CHECK(delta_from_blocks(kl, split).delta == doctest::Approx(expect).epsilon(1e-12));
        CHECK(delta_from_blocks(kl, joined).delta == doctest::Approx(expect).epsilon(1e-12));
    }
}

TEST_CASE("delta term rejects nonpositive variances")
{
    const std::array<Vector, 1> zero{Vector::Zero(2)};
    CHECK_THROWS_AS(delta_from_blocks(0.0, zero), InputError);
    Vector neg = Vector::Ones(3);
    neg(2) = -1.0;
    const std::array<Vector, 1> bad{neg};
    CHECK_THROWS_AS(delta_from_blocks(0.0, bad), InputError);
}

TEST_CASE("pac-bayes right-hand side")
{
    CHECK(pac_bayes_rhs(0.0, 1, std::exp(-1.0), 0.25) == doctest::Approx(0.25 + std::sqrt(3.0)));

    // strictly decreasing in m beyond small m
    for (double delta : {0.0, 10.0, 1e3, 1e6}) {
        double prev = pac_bayes_rhs(delta, 10, 0.05, 0.1);
        for (std::size_t m = 20; m <= 10'000'000; m *= 2) {
            const double r = pac_bayes_rhs(delta, m, 0.05, 0.1);
            CHECK(r < prev);
            prev = r;
        }
    }

    Prng prng(5);
    for (int i = 0; i < 200; ++i) {
        const double r_hat = prng.uniform();
        const double delta = 1e4 * prng.uniform();
        const auto m = static_cast<std::size_t>(1 + 10000 * prng.uniform());
        CHECK(pac_bayes_rhs(delta, m, 0.05, r_hat) >= r_hat);
    }

    CHECK_THROWS_AS(pac_bayes_rhs(0.0, 0, 0.05, 0.0), InputError);
    CHECK_THROWS_AS(pac_bayes_rhs(0.0, 10, 0.0, 0.0), InputError);
    CHECK_THROWS_AS(pac_bayes_rhs(0.0, 10, 1.0, 0.0), InputError);
    CHECK_THROWS_AS(pac_bayes_rhs(std::nan(""), 10, 0.05, 0.0), InputError);
}

TEST_CASE("bound report")
{
    const std::array<Vector, 1> blk{Vector::Constant(4, 0.5)};
    const DeltaComponents c = delta_from_blocks(1.25, blk);
    const BoundReport r = pac_bayes_bound(c, 1000, 0.05, 0.1, 0.12);
    CHECK(r.bound_rhs == doctest::Approx(pac_bayes_rhs(c.delta, 1000, 0.05, 0.1)));
    REQUIRE(r.holds.has_value());
    CHECK(*r.holds);
    CHECK(*r.gap == doctest::Approx(0.02));
    CHECK_FALSE(r.vacuous);

    const BoundReport loose = pac_bayes_bound(c, 2, 0.05, 0.4, 0.9);
    CHECK(loose.vacuous);

    const BoundReport no_test = pac_bayes_bound(c, 1000, 0.05, 0.1);
    CHECK_FALSE(no_test.holds.has_value());

    const Json j = bound_to_json(r);
    for (const char* key : {"kl_q1_p1", "trace_term", "logdet_term", "frob_terms", "delta", "m", "delta_conf",
                            "bound_rhs", "empirical_risk", "test_risk", "gap", "holds", "vacuous"}) {
        CHECK(j.contains(key));
    }
    CHECK(j["delta"].get<double>() == c.delta);
    CHECK(bound_to_json(no_test)["holds"].is_null());
}

TEST_CASE("sigma2 from synthetic iterates")
{
    Prng prng(17);
    std::vector<Vector> iterates;
    for (int t = 0; t < 20000; ++t) {
        Vector v(40);
        for (auto& x : v) {
            x = 3.0 + 0.1 * prng.normal();
        }
        iterates.push_back(v);
    }
    const Sigma2Estimate s = estimate_sigma2_from_iterates(iterates);
    CHECK(s.iterates == 20000);
    for (double v : s.variance) {
        CHECK(std::abs(v - 0.01) < 0.0005);
    }

    // stationary: the first half of the window vs the whole window
    const std::span<const Vector> half(iterates.data(), 10000);
    const Sigma2Estimate h = estimate_sigma2_from_iterates(half);
    CHECK(((h.variance - s.variance).cwiseAbs().array() / s.variance.array()).maxCoeff() < 0.2);

    const std::vector<Vector> constant(10, Vector::Constant(5, 2.0));
    const Sigma2Estimate flat = estimate_sigma2_from_iterates(constant);
    CHECK((flat.variance.array() == 1e-12).all());
}

TEST_CASE("sigma2 from a training run")
{
    Prng prng(21);
    const Dataset train = make_two_moons(400, 0.1, prng);
    const std::array<Eigen::Index, 4> dims{2, 16, 16, 1};
    const Mlp init = Mlp::he_init(dims, prng);

    TrainConfig cfg;
    cfg.epochs = 30;
    cfg.batch_size = 32;
    cfg.sgd.learning_rate = 0.05;
    cfg.sgd.schedule.clear();

    SUBCASE("window bookkeeping")
    {
        IterateVariance acc(cfg.epochs, 5, 0);
        TrainHooks hooks;
        hooks.after_step = acc.hook();
        Prng p(1);
        const Mlp trained = train_deterministic(init, train.features, train.labels, cfg, p, hooks).model;
        CHECK(acc.count() == 5 * 13); // 400 rows in batches of 32
        const Sigma2Estimate s = acc.finish();
        CHECK(s.window_epochs == 5);
        CHECK(s.variance.size() == flatten_parameters(trained, 0).size());
        CHECK(s.variance.size() == static_cast<Eigen::Index>(trained.parameter_count()) - 3 * 16);
        CHECK((s.variance.array() >= 1e-12).all());
        CHECK((s.variance.array() > 1e-12).any());
    }

    SUBCASE("learning rate 0 gives the floor")
    {
        TrainConfig frozen = cfg;
        frozen.sgd.learning_rate = 0.0;
        IterateVariance acc(frozen.epochs, 4, 0);
        TrainHooks hooks;
        hooks.after_step = acc.hook();
        Prng p(1);
        train_deterministic(init, train.features, train.labels, frozen, p, hooks);
        CHECK((acc.finish().variance.array() == 1e-12).all());
    }

    SUBCASE("doubling the window on a stationary run")
    {
        // logistic regression with weight decay has a unique minimum, so after
        // a warm-up its SGD iterates are stationary
        const std::array<Eigen::Index, 2> linear{2, 1};
        TrainConfig late = cfg;
        late.sgd.weight_decay = 1e-2;
        late.epochs = 40;
        Prng p(2);
        const Mlp warm = train_deterministic(Mlp::he_init(linear, p), train.features, train.labels, late, p).model;
        late.epochs = 800;
        IterateVariance shorter(late.epochs, 400, std::nullopt);
        IterateVariance longer(late.epochs, 800, std::nullopt);
        TrainHooks hooks;
        hooks.after_step = [&](int e, const Mlp& m) {
            shorter.observe(e, m);
            longer.observe(e, m);
        };
        Prng q(3);
        train_deterministic(warm, train.features, train.labels, late, q, hooks);
        const Vector a = shorter.finish().variance;
        const Vector b = longer.finish().variance;
        const double rel = ((b - a).cwiseAbs().array() / a.array()).maxCoeff();
        MESSAGE("window doubling relative change " << rel);
        CHECK(rel < 0.2);
    }

    CHECK_THROWS_AS(IterateVariance(10, 11, 0), InputError);
    CHECK_THROWS_AS(IterateVariance(10, 0, 0), InputError);
    CHECK_THROWS_AS(IterateVariance(10, 5, 0).finish(), UsageError);
    CHECK_THROWS_AS(estimate_sigma2_from_iterates({}), InputError);
}

TEST_CASE("flatten parameters")
{
    Prng prng(4);
    const std::array<Eigen::Index, 3> dims{3, 4, 2};
    const Mlp m = Mlp::he_init(dims, prng);
    const Vector all = flatten_parameters(m);
    CHECK(all.size() == static_cast<Eigen::Index>(m.parameter_count()));
    CHECK(all(1) == m.layer(0).weight(0, 1));
    CHECK(all(3) == m.layer(0).weight(1, 0));
    CHECK(all(12) == m.layer(0).bias(0));
    const Vector tail = flatten_parameters(m, 0);
    CHECK(tail.size() == 4 * 2 + 2);
    CHECK(tail(0) == m.layer(1).weight(0, 0));
}

TEST_CASE("empirical risk under the posterior")
{
    Prng prng(8);
    SUBCASE("separable fit with vanishing sigma")
    {
        StfModel stf = linear_stf(1e-9, prng);
        VariationalLayer v = stf.bayes();
        v.mu_w << 1.0, 0.0;
        stf.set_bayes(v);
        Matrix x(6, 2);
        x << -2, 0, -1, 3, -0.5, 1, 0.5, -1, 1, 2, 3, 0;
        const Labels y{0, 0, 0, 1, 1, 1};
        CHECK(empirical_risk_mc(stf, x, y, 20, prng) == 0.0);
    }
    SUBCASE("random-guess model")
    {
        const StfModel stf = linear_stf(1.0, prng);
        // one weight draw is shared by all rows, so use many draws
        const Dataset d = make_two_moons(10, 0.1, prng);
        const double r = empirical_risk_mc(stf, d.features, d.labels, 4000, prng);
        CHECK(std::abs(r - 0.5) < 0.02);
    }
    SUBCASE("errors")
    {
        const StfModel stf = linear_stf(1.0, prng);
        const Matrix x = Matrix::Ones(2, 2);
        CHECK_THROWS_AS(empirical_risk_mc(stf, x, {0, 1}, 0, prng), InputError);
        CHECK_THROWS_AS(empirical_risk_mc(stf, x, {0}, 1, prng), DimensionError);
    }
}

TEST_CASE("empirical risk converges on moons")
{
    Prng prng(2024);
    const Dataset train = make_two_moons(400, 0.1, prng);
    const std::array<Eigen::Index, 4> dims{2, 32, 32, 1};
    TrainConfig cfg;
    cfg.epochs = 40;
    cfg.batch_size = 32;
    cfg.sgd.learning_rate = 0.05;
    const Mlp pre = train_deterministic(Mlp::he_init(dims, prng), train.features, train.labels, cfg, prng).model;
    ElboConfig ecfg;
    ecfg.epochs = 10;
    ecfg.batch_size = 32;
    const StfModel stf = stf_train(pre, 1, train, ecfg, prng).model;

    Prng a(1);
    Prng b(2);
    const double r100 = empirical_risk_mc(stf, train.features, train.labels, 100, a);
    const double r1000 = empirical_risk_mc(stf, train.features, train.labels, 1000, b);
    MESSAGE("risk S=100 " << r100 << " S=1000 " << r1000);
    CHECK(std::abs(r100 - r1000) < 0.01);
    CHECK(r1000 >= 0.0);
    CHECK(r1000 <= 1.0);
}
