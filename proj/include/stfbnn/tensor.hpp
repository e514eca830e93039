#pragma once

#include "stfbnn/errors.hpp"

#include <Eigen/Dense>

#include <cmath>
#include <concepts>
#include <limits>
#include <string>
#include <vector>

namespace stfbnn {

template <typename Scalar>
using MatrixT = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;
template <typename Scalar>
using VectorT = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

// Activations are stored batch-major: one example per row.
using Matrix = MatrixT<double>;
using Vector = VectorT<double>;
using Labels = std::vector<int>;

template <typename Derived>
bool all_finite(const Eigen::DenseBase<Derived>& m)
{
    return m.derived().array().isFinite().all();
}

/// Throws InputError naming `what` if any entry is NaN or infinite.
template <typename Derived>
void require_finite(const Eigen::DenseBase<Derived>& m, const std::string& what)
{
    if (!all_finite(m)) {
        throw InputError(what + ": non-finite entry");
    }
}

inline void require_dims(Eigen::Index got, Eigen::Index want, const std::string& what)
{
    if (got != want) {
        throw DimensionError(what + ": expected " + std::to_string(want) + ", got " + std::to_string(got));
    }
}

/// Numerically stable log(1 + exp(x)), floored at the smallest normal double so it stays positive.
template <std::floating_point Scalar>
Scalar softplus(Scalar x)
{
    Scalar v = x > Scalar(0) ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
    return v > std::numeric_limits<Scalar>::min() ? v : std::numeric_limits<Scalar>::min();
}

/// Inverse of softplus for y > 0.
template <std::floating_point Scalar>
Scalar inverse_softplus(Scalar y)
{
    // log(exp(y) - 1) written to avoid overflow for large y
    return y > Scalar(30) ? y + std::log1p(-std::exp(-y)) : std::log(std::expm1(y));
}

template <std::floating_point Scalar>
Scalar sigmoid(Scalar x)
{
    if (x >= Scalar(0)) {
        return Scalar(1) / (Scalar(1) + std::exp(-x));
    }
    Scalar e = std::exp(x);
    return e / (Scalar(1) + e);
}

template <typename Derived>
auto softplus(const Eigen::MatrixBase<Derived>& x)
{
    using Scalar = typename Derived::Scalar;
    return x.unaryExpr([](Scalar v) { return softplus(v); });
}

template <typename Derived>
auto sigmoid(const Eigen::MatrixBase<Derived>& x)
{
    using Scalar = typename Derived::Scalar;
    return x.unaryExpr([](Scalar v) { return sigmoid(v); });
}

/// Row-major flattening, the on-disk order for every serialized array.
std::vector<double> to_row_major(const Matrix& m);
Matrix from_row_major(const std::vector<double>& data, Eigen::Index rows, Eigen::Index cols);

} // namespace stfbnn
