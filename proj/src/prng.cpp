#include "stfbnn/prng.hpp"

#include <cmath>
#include <numbers>
#include <numeric>

namespace stfbnn {

namespace {

std::uint64_t splitmix64(std::uint64_t& x)
{
    std::uint64_t z = (x += 0x9e3779b97f4a7c15ULL);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

constexpr std::uint64_t rotl(std::uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }

} // namespace

Prng::Prng(std::uint64_t seed) : seed_(seed)
{
    std::uint64_t s = seed;
    for (auto& word : state_) {
        word = splitmix64(s);
    }
}

std::uint64_t Prng::next_u64()
{
    const std::uint64_t result = rotl(state_[1] * 5, 7) * 9;
    const std::uint64_t t = state_[1] << 17;
    state_[2] ^= state_[0];
    state_[3] ^= state_[1];
    state_[1] ^= state_[2];
    state_[0] ^= state_[3];
    state_[2] ^= t;
    state_[3] = rotl(state_[3], 45);
    return result;
}

double Prng::uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

std::uint64_t Prng::uniform_index(std::uint64_t n)
{
    const std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() - std::numeric_limits<std::uint64_t>::max() % n;
    std::uint64_t r;
    do {
        r = next_u64();
    } while (r >= limit);
    return r % n;
}

double Prng::normal()
{
    if (has_spare_) {
        has_spare_ = false;
        return spare_;
    }
    // u1 in (0, 1] keeps the log finite
    const double u1 = 1.0 - uniform();
    const double u2 = uniform();
    const double radius = std::sqrt(-2.0 * std::log(u1));
    const double angle = 2.0 * std::numbers::pi * u2;
    spare_ = radius * std::sin(angle);
    has_spare_ = true;
    return radius * std::cos(angle);
}

Prng Prng::derive(std::uint64_t key) const
{
    std::uint64_t s = state_[0] ^ rotl(state_[2], 23) ^ (key * 0xd1342543de82ef95ULL);
    return Prng(splitmix64(s) ^ seed_);
}

Prng Prng::derive(std::string_view key) const { return derive(fnv1a(key)); }

Matrix sample_gaussian(Prng& prng, double mean, double std, Eigen::Index rows, Eigen::Index cols)
{
    if (!(std >= 0.0)) {
        throw InputError("sample_gaussian: std must be nonnegative");
    }
    Matrix out(rows, cols);
    // fill in row-major order so the stream layout matches serialized tensors
    for (Eigen::Index i = 0; i < rows; ++i) {
        for (Eigen::Index j = 0; j < cols; ++j) {
            out(i, j) = prng.normal(mean, std);
        }
    }
    return out;
}

std::vector<std::size_t> permutation(std::size_t n, Prng& prng)
{
    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    for (std::size_t i = n; i > 1; --i) {
        std::swap(idx[i - 1], idx[prng.uniform_index(i)]);
    }
    return idx;
}

std::uint64_t fnv1a(std::string_view bytes)
{
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : bytes) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

std::vector<double> to_row_major(const Matrix& m)
{
    std::vector<double> out;
    out.reserve(static_cast<std::size_t>(m.size()));
    for (Eigen::Index i = 0; i < m.rows(); ++i) {
        for (Eigen::Index j = 0; j < m.cols(); ++j) {
            out.push_back(m(i, j));
        }
    }
    return out;
}

Matrix from_row_major(const std::vector<double>& data, Eigen::Index rows, Eigen::Index cols)
{
    if (static_cast<Eigen::Index>(data.size()) != rows * cols) {
        throw DimensionError("from_row_major: data length " + std::to_string(data.size()) + " does not match shape " +
                             std::to_string(rows) + "x" + std::to_string(cols));
    }
    Matrix m(rows, cols);
    std::size_t k = 0;
    for (Eigen::Index i = 0; i < rows; ++i) {
        for (Eigen::Index j = 0; j < cols; ++j) {
            m(i, j) = data[k++];
        }
    }
    return m;
}

} // namespace stfbnn
