#pragma once

#include "stfbnn/prng.hpp"

#include <filesystem>
#include <limits>
#include <optional>
#include <string>
#include <utility>

namespace stfbnn {

enum class Split { train, test };

struct FeatureRange {
    double lo = -std::numeric_limits<double>::infinity();
    double hi = std::numeric_limits<double>::infinity();

    bool bounded() const { return std::isfinite(lo) && std::isfinite(hi); }
    template <typename Derived>
    auto clip(const Eigen::MatrixBase<Derived>& x) const
    {
        return x.cwiseMax(lo).cwiseMin(hi);
    }
};

struct Normalization {
    Vector mean;
    Vector std;
};

struct ImageShape {
    int rows = 0;
    int cols = 0;
};

/// Labeled examples, one per row of `features`.
struct Dataset {
    Matrix features;
    Labels labels;
    int num_classes = 2;
    Split split = Split::train;
    std::optional<Normalization> normalization;
    FeatureRange range;
    std::optional<ImageShape> image_shape;
    std::string provenance;
    /// Row provenance in the pool the dataset was cut from (split bookkeeping).
    std::vector<std::size_t> source_index;

    std::size_t size() const { return labels.size(); }
    Eigen::Index dim() const { return features.cols(); }
    void validate() const;
};

/// Two interleaved half circles; class 0 on the upper arc, class 1 on the lower
/// shifted arc, angles drawn uniformly, isotropic Gaussian noise added.
Dataset make_two_moons(std::size_t m, double noise_std, Prng& prng);

/// m points split evenly over the rows of `centers` (remainder to the first
/// classes); each point's label is the index of the center that generated it.
Dataset make_blobs(std::size_t m, const Matrix& centers, double std, Prng& prng);

/// Moves `test_count` shuffled rows into a test split; both parts keep
/// source_index so disjointness can be checked.
std::pair<Dataset, Dataset> train_test_split(const Dataset& pool, std::size_t test_count, Prng& prng);

/// First `per_class` examples of every class, in original order.
Dataset balanced_subset(const Dataset& pool, std::size_t per_class);

/// Per-feature mean/std of a train split (std floored to 1 where a feature is constant).
Normalization fit_normalization(const Dataset& train);
Dataset apply_normalization(const Dataset& d, const Normalization& stats);

/// Shuffled index batches for one epoch over the dataset.
std::vector<std::vector<std::size_t>> batch_iter(const Dataset& d, std::size_t batch_size, Prng& prng);

// IDX files (big-endian; magic 0x00000803 images, 0x00000801 labels). Pixels map to [0, 1].
Dataset load_idx(const std::filesystem::path& images, const std::filesystem::path& labels);
void write_idx(const Dataset& d, const std::filesystem::path& images, const std::filesystem::path& labels);

// CSV with header f0..f{n-1},label.
void write_csv(const Dataset& d, const std::filesystem::path& path);
Dataset read_csv(const std::filesystem::path& path);

enum class CorruptionKind { gaussian_noise, impulse_noise, box_blur, contrast };

struct CorruptionSpec {
    CorruptionKind kind = CorruptionKind::gaussian_noise;
    int severity = 1;

    std::string name() const;
};

const char* to_string(CorruptionKind kind);
CorruptionKind corruption_from_string(const std::string& s);
std::vector<CorruptionSpec> corruption_grid();

// Severity tables, index = severity - 1.
inline constexpr double kGaussianNoiseStd[5] = {0.04, 0.08, 0.12, 0.16, 0.20};
inline constexpr double kImpulseFraction[5] = {0.01, 0.02, 0.05, 0.08, 0.12};
inline constexpr int kBlurKernel[5] = {1, 3, 5, 7, 9};
inline constexpr double kContrastFactor[5] = {0.75, 0.5, 0.4, 0.3, 0.2};

/// Box filter of odd width over each image (window truncated at the borders).
Matrix apply_box_blur(const Matrix& x, ImageShape shape, int kernel);
/// x <- mean + gamma (x - mean); the mean is per row when `per_example`, else per column.
Matrix apply_contrast(const Matrix& x, double gamma, bool per_example);

/// Corrupted copy, clipped to the feature range. Image data is blurred in 2-D;
/// other data is treated as a single-row image. Contrast pulls each image toward
/// its own mean, or non-image rows toward the per-feature dataset mean.
Dataset corrupt(const Dataset& d, const CorruptionSpec& spec, Prng& prng);

} // namespace stfbnn
