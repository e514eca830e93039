#include "doctest.h"

#include "stfbnn/checkpoint.hpp"
#include "stfbnn/stability.hpp"

#include <array>

using namespace stfbnn;

namespace {

std::string layer_bytes(const DenseLayer& l)
{
    return matrix_to_json(l.weight).dump() + vector_to_json(l.bias).dump() + to_string(l.activation);
}

Dataset blobs_train(std::uint64_t seed, std::size_t m)
{
    Prng prng(seed);
    Matrix centers = Matrix::Zero(3, 4);
    for (int i = 0; i < 3; ++i) {
        centers(i, i) = 4.0;
    }
    return make_blobs(m, centers, 0.8, prng);
}

} // namespace

TEST_CASE("layer_stability examples")
{
    Matrix w(2, 2);
    w << 1, 0, 0, 1;
    Matrix swapped(2, 2);
    swapped << 0, 1, 1, 0;
    CHECK(layer_stability(w, w) == 1.0);
    CHECK(layer_stability(w, (-3.0 * w).eval()) == 1.0);
    CHECK(layer_stability(w, swapped) == 0.0);

    Matrix sheared(2, 2);
    sheared << 1, 1, 0, 1;
    CHECK(layer_stability(w, sheared) == doctest::Approx((1.0 / std::sqrt(2.0) + 1.0) / 2.0).epsilon(1e-15));
}

TEST_CASE("layer_stability is scale invariant, symmetric and bounded")
{
    Prng prng(11);
    for (int trial = 0; trial < 200; ++trial) {
        const Eigen::Index rows = 1 + static_cast<Eigen::Index>(prng.uniform_index(20));
        const Eigen::Index cols = 1 + static_cast<Eigen::Index>(prng.uniform_index(50));
        const Matrix a = sample_gaussian(prng, 0.0, 1.0, rows, cols);
        const Matrix b = sample_gaussian(prng, 0.0, 1.0, rows, cols);
        double c = std::exp(prng.uniform(-10.0, 10.0));
        if (prng.uniform() < 0.5) {
            c = -c;
        }
        CHECK(layer_stability(a, (c * a).eval()) == 1.0);
        const double ab = layer_stability(a, b);
        CHECK(ab == layer_stability(b, a));
        CHECK(ab >= 0.0);
        CHECK(ab <= 1.0);
    }
}

TEST_CASE("layer_stability errors")
{
    Matrix w = Matrix::Ones(3, 2);
    Matrix z = w;
    z.row(2).setZero();
    try {
        layer_stability(w, z);
        FAIL("expected SingularityError");
    } catch (const SingularityError& e) {
        CHECK(e.row() == 2);
    }
    CHECK_THROWS_AS(layer_stability(w, Matrix::Ones(2, 2)), DimensionError);
}

TEST_CASE("retrain_layer contract")
{
    const Dataset train = blobs_train(5, 300);
    const std::array<Eigen::Index, 4> dims{4, 16, 16, 3};
    Prng init(1);
    Mlp base = Mlp::he_init(dims, init);
    TrainConfig cfg;
    cfg.epochs = 20;
    cfg.batch_size = 32;
    cfg.sgd.learning_rate = 0.05;
    Prng p(2);
    const Mlp pre = train_deterministic(base, train.features, train.labels, cfg, p).model;
    const double pre_acc = accuracy(pre, train.features, train.labels);

    SUBCASE("zero epochs gives a fresh init and leaves other layers alone")
    {
        TrainConfig none = cfg;
        none.epochs = 0;
        Prng a(9);
        Prng b(9);
        const Mlp re = retrain_layer(pre, 2, train, none, a);
        const Matrix fresh = sample_gaussian(b, 0.0, std::sqrt(2.0 / 16.0), 16, 16);
        CHECK(re.layer(1).weight == fresh);
        CHECK(re.layer(1).bias.isZero());
        CHECK(re.layer(0).weight == pre.layer(0).weight);
        CHECK(re.layer(2).weight == pre.layer(2).weight);
        CHECK(re.layer(2).bias == pre.layer(2).bias);
    }

    SUBCASE("frozen layers are byte identical after retraining")
    {
        Prng a(3);
        const Mlp re = retrain_layer(pre, 2, train, cfg, a);
        for (std::size_t k : {0u, 2u}) {
            CHECK(layer_bytes(pre.layer(k)) == layer_bytes(re.layer(k)));
        }
        CHECK(re.layer(1).weight != pre.layer(1).weight);
    }

    SUBCASE("retrained network recovers accuracy on blobs")
    {
        for (std::size_t k = 1; k <= pre.depth(); ++k) {
            Prng a(100 + k);
            const Mlp re = retrain_layer(pre, k, train, cfg, a);
            CHECK(accuracy(re, train.features, train.labels) >= pre_acc - 0.01);
        }
    }

    SUBCASE("layer number out of range")
    {
        Prng a(3);
        CHECK_THROWS_AS(retrain_layer(pre, 0, train, cfg, a), InputError);
        CHECK_THROWS_AS(retrain_layer(pre, 4, train, cfg, a), InputError);
    }
}

TEST_CASE("stability_profile is deterministic and bounded")
{
    const Dataset train = blobs_train(7, 200);
    const Dataset test = blobs_train(8, 100);
    const std::array<Eigen::Index, 4> dims{4, 8, 8, 3};
    StabilityConfig cfg;
    cfg.pretrain.epochs = 5;
    cfg.pretrain.batch_size = 32;
    cfg.retrain.epochs = 5;
    cfg.retrain.batch_size = 32;

    const auto r1 = stability_profile(dims, train, test, {1, 2}, cfg);
    const auto r2 = stability_profile(dims, train, test, {1, 2}, cfg);
    CHECK(r1.per_seed == r2.per_seed);
    CHECK(r1.config_hash == r2.config_hash);
    CHECK(r1.per_seed.rows() == 2);
    CHECK(r1.per_seed.cols() == 3);
    CHECK(r1.per_seed.minCoeff() >= 0.0);
    CHECK(r1.per_seed.maxCoeff() <= 1.0);
    CHECK(r1.mean.isApprox(r1.per_seed.colwise().mean().transpose()));

    CHECK_THROWS_AS(stability_profile(dims, train, test, {1}, cfg), InputError);
}
