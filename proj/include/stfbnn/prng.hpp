#pragma once

#include "stfbnn/tensor.hpp"

#include <array>
#include <cstdint>
#include <string_view>

namespace stfbnn {

/// xoshiro256** seeded through splitmix64. Identical seeds give identical
/// streams on every platform; Gaussian draws use Box-Muller on this stream.
class Prng {
public:
    explicit Prng(std::uint64_t seed = 0);

    std::uint64_t seed() const { return seed_; }

    std::uint64_t next_u64();
    /// Uniform on [0, 1) with 53 bits of resolution.
    double uniform();
    /// Uniform on [lo, hi).
    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
    /// Uniform integer in [0, n); n > 0. Unbiased (rejection on the top range).
    std::uint64_t uniform_index(std::uint64_t n);
    double normal();
    double normal(double mean, double std) { return mean + std * normal(); }

    /// Independent child stream keyed by a label; does not advance this stream.
    Prng derive(std::uint64_t key) const;
    Prng derive(std::string_view key) const;

private:
    std::uint64_t seed_;
    std::array<std::uint64_t, 4> state_{};
    bool has_spare_ = false;
    double spare_ = 0.0;
};

/// Tensor of independent N(mean, std^2) draws. Throws InputError for std < 0.
Matrix sample_gaussian(Prng& prng, double mean, double std, Eigen::Index rows, Eigen::Index cols);

/// Fisher-Yates permutation of 0..n-1.
std::vector<std::size_t> permutation(std::size_t n, Prng& prng);

/// 64-bit FNV-1a, used for config hashes and stream keys.
std::uint64_t fnv1a(std::string_view bytes);

} // namespace stfbnn
