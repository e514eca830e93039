#include "stfbnn/dataset.hpp"
#include "stfbnn/train.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <numeric>
#include <set>
#include <sstream>

namespace stfbnn {

void Dataset::validate() const
{
    require_dims(static_cast<Eigen::Index>(labels.size()), features.rows(), "dataset labels");
    for (int y : labels) {
        if (y < 0 || y >= num_classes) {
            throw InputError("dataset: label " + std::to_string(y) + " outside [0, " + std::to_string(num_classes) + ")");
        }
    }
    if (image_shape && static_cast<Eigen::Index>(image_shape->rows) * image_shape->cols != features.cols()) {
        throw DimensionError("dataset: image shape does not match feature width");
    }
}

Dataset make_two_moons(std::size_t m, double noise_std, Prng& prng)
{
    if (m < 2) {
        throw InputError("make_two_moons: need at least two points");
    }
    if (!(noise_std >= 0.0)) {
        throw InputError("make_two_moons: noise_std must be nonnegative");
    }
    Dataset d;
    d.features.resize(static_cast<Eigen::Index>(m), 2);
    d.labels.resize(m);
    const std::size_t upper = m / 2;
    for (std::size_t i = 0; i < m; ++i) {
        const int label = i < upper ? 0 : 1;
        const double t = std::numbers::pi * prng.uniform();
        double x0 = label == 0 ? std::cos(t) : 1.0 - std::cos(t);
        double x1 = label == 0 ? std::sin(t) : 0.5 - std::sin(t);
        x0 += noise_std * prng.normal();
        x1 += noise_std * prng.normal();
        d.features(static_cast<Eigen::Index>(i), 0) = x0;
        d.features(static_cast<Eigen::Index>(i), 1) = x1;
        d.labels[i] = label;
    }
    // interleave the two classes in a random order
    const auto order = permutation(m, prng);
    d.features = gather_rows(d.features, order);
    d.labels = gather(d.labels, order);
    d.num_classes = 2;
    d.source_index.resize(m);
    std::iota(d.source_index.begin(), d.source_index.end(), std::size_t{0});
    std::ostringstream prov;
    prov << "two_moons(m=" << m << ",noise=" << noise_std << ",seed=" << prng.seed() << ")";
    d.provenance = prov.str();
    return d;
}

Dataset make_blobs(std::size_t m, const Matrix& centers, double std, Prng& prng)
{
    const auto k = static_cast<std::size_t>(centers.rows());
    if (k < 2) {
        throw InputError("make_blobs: need at least two centers");
    }
    if (!(std >= 0.0)) {
        throw InputError("make_blobs: std must be nonnegative");
    }
    require_finite(centers, "make_blobs centers");
    for (std::size_t a = 0; a < k; ++a) {
        for (std::size_t b = a + 1; b < k; ++b) {
            if (centers.row(static_cast<Eigen::Index>(a)) == centers.row(static_cast<Eigen::Index>(b))) {
                throw InputError("make_blobs: duplicate centers " + std::to_string(a) + " and " + std::to_string(b));
            }
        }
    }
    Dataset d;
    d.features.resize(static_cast<Eigen::Index>(m), centers.cols());
    d.labels.resize(m);
    std::size_t row = 0;
    for (std::size_t c = 0; c < k; ++c) {
        const std::size_t count = m / k + (c < m % k ? 1 : 0);
        for (std::size_t i = 0; i < count; ++i, ++row) {
            for (Eigen::Index j = 0; j < centers.cols(); ++j) {
                d.features(static_cast<Eigen::Index>(row), j) = centers(static_cast<Eigen::Index>(c), j) + std * prng.normal();
            }
            d.labels[row] = static_cast<int>(c);
        }
    }
    const auto order = permutation(m, prng);
    d.features = gather_rows(d.features, order);
    d.labels = gather(d.labels, order);
    d.num_classes = static_cast<int>(k);
    d.source_index.resize(m);
    std::iota(d.source_index.begin(), d.source_index.end(), std::size_t{0});
    std::ostringstream prov;
    prov << "blobs(m=" << m << ",k=" << k << ",std=" << std << ",seed=" << prng.seed() << ")";
    d.provenance = prov.str();
    return d;
}

namespace {

Dataset take_rows(const Dataset& pool, const std::vector<std::size_t>& rows, Split split)
{
    Dataset out = pool;
    out.features = gather_rows(pool.features, rows);
    out.labels = gather(pool.labels, rows);
    out.source_index.clear();
    for (auto r : rows) {
        out.source_index.push_back(pool.source_index.empty() ? r : pool.source_index[r]);
    }
    out.split = split;
    return out;
}

} // namespace

std::pair<Dataset, Dataset> train_test_split(const Dataset& pool, std::size_t test_count, Prng& prng)
{
    if (test_count >= pool.size()) {
        throw InputError("train_test_split: test split would leave no training data");
    }
    const auto order = permutation(pool.size(), prng);
    std::vector<std::size_t> test(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(test_count));
    std::vector<std::size_t> train(order.begin() + static_cast<std::ptrdiff_t>(test_count), order.end());
    return {take_rows(pool, train, Split::train), take_rows(pool, test, Split::test)};
}

Dataset balanced_subset(const Dataset& pool, std::size_t per_class)
{
    std::vector<std::size_t> taken(static_cast<std::size_t>(pool.num_classes), 0);
    std::vector<std::size_t> rows;
    for (std::size_t i = 0; i < pool.size(); ++i) {
        auto& t = taken[static_cast<std::size_t>(pool.labels[i])];
        if (t < per_class) {
            ++t;
            rows.push_back(i);
        }
    }
    Dataset out = take_rows(pool, rows, pool.split);
    out.provenance = pool.provenance + "|balanced(" + std::to_string(per_class) + ")";
    return out;
}

Normalization fit_normalization(const Dataset& train)
{
    if (train.split != Split::train) {
        throw UsageError("fit_normalization: statistics must come from the train split");
    }
    if (train.size() == 0) {
        throw InputError("fit_normalization: empty dataset");
    }
    Normalization n;
    n.mean = train.features.colwise().mean().transpose();
    const Matrix centered = train.features.rowwise() - n.mean.transpose();
    n.std = (centered.array().square().colwise().sum() / static_cast<double>(train.size())).sqrt().transpose();
    for (Eigen::Index j = 0; j < n.std.size(); ++j) {
        if (n.std(j) == 0.0) {
            n.std(j) = 1.0;
        }
    }
    return n;
}

Dataset apply_normalization(const Dataset& d, const Normalization& stats)
{
    require_dims(stats.mean.size(), d.dim(), "apply_normalization mean");
    Dataset out = d;
    out.features = ((d.features.rowwise() - stats.mean.transpose()).array().rowwise() / stats.std.transpose().array());
    out.normalization = stats;
    // per-feature affine maps do not preserve a shared scalar range
    out.range = FeatureRange{};
    return out;
}

std::vector<std::vector<std::size_t>> batch_iter(const Dataset& d, std::size_t batch_size, Prng& prng)
{
    return epoch_batches(d.size(), batch_size, prng);
}

// ---------------------------------------------------------------- IDX

namespace {

constexpr std::uint32_t kIdxImages = 0x00000803;
constexpr std::uint32_t kIdxLabels = 0x00000801;

std::vector<unsigned char> slurp(const std::filesystem::path& path)
{
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw IoError("cannot open " + path.string());
    }
    return std::vector<unsigned char>(std::istreambuf_iterator<char>(in), {});
}

std::uint32_t be32(const std::vector<unsigned char>& b, std::size_t at, const std::filesystem::path& path)
{
    if (at + 4 > b.size()) {
        throw FormatError(path.string() + ": truncated header");
    }
    return (std::uint32_t{b[at]} << 24) | (std::uint32_t{b[at + 1]} << 16) | (std::uint32_t{b[at + 2]} << 8) |
           std::uint32_t{b[at + 3]};
}

void put_be32(std::ostream& out, std::uint32_t v)
{
    const char bytes[4] = {static_cast<char>(v >> 24), static_cast<char>(v >> 16), static_cast<char>(v >> 8),
                           static_cast<char>(v)};
    out.write(bytes, 4);
}

} // namespace

Dataset load_idx(const std::filesystem::path& images, const std::filesystem::path& labels)
{
    const auto img = slurp(images);
    const auto lab = slurp(labels);
    if (be32(img, 0, images) != kIdxImages) {
        throw FormatError(images.string() + ": bad magic (expected 0x00000803)");
    }
    if (be32(lab, 0, labels) != kIdxLabels) {
        throw FormatError(labels.string() + ": bad magic (expected 0x00000801)");
    }
    const std::size_t count = be32(img, 4, images);
    const std::size_t rows = be32(img, 8, images);
    const std::size_t cols = be32(img, 12, images);
    const std::size_t label_count = be32(lab, 4, labels);
    if (count != label_count) {
        throw FormatError("idx: image count " + std::to_string(count) + " differs from label count " +
                          std::to_string(label_count));
    }
    const std::size_t pixels = rows * cols;
    if (img.size() != 16 + count * pixels) {
        throw FormatError(images.string() + ": payload size does not match header");
    }
    if (lab.size() != 8 + count) {
        throw FormatError(labels.string() + ": payload size does not match header");
    }
    Dataset d;
    d.features.resize(static_cast<Eigen::Index>(count), static_cast<Eigen::Index>(pixels));
    d.labels.resize(count);
    int max_label = 0;
    for (std::size_t i = 0; i < count; ++i) {
        for (std::size_t p = 0; p < pixels; ++p) {
            d.features(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(p)) = img[16 + i * pixels + p] / 255.0;
        }
        d.labels[i] = lab[8 + i];
        max_label = std::max(max_label, d.labels[i]);
    }
    d.num_classes = std::max(2, max_label + 1);
    d.range = FeatureRange{0.0, 1.0};
    d.image_shape = ImageShape{static_cast<int>(rows), static_cast<int>(cols)};
    d.source_index.resize(count);
    std::iota(d.source_index.begin(), d.source_index.end(), std::size_t{0});
    d.provenance = "idx(" + images.string() + ")";
    return d;
}

void write_idx(const Dataset& d, const std::filesystem::path& images, const std::filesystem::path& labels)
{
    const ImageShape shape = d.image_shape.value_or(ImageShape{1, static_cast<int>(d.dim())});
    std::ofstream img(images, std::ios::binary);
    std::ofstream lab(labels, std::ios::binary);
    if (!img || !lab) {
        throw IoError("write_idx: cannot open output files");
    }
    put_be32(img, kIdxImages);
    put_be32(img, static_cast<std::uint32_t>(d.size()));
    put_be32(img, static_cast<std::uint32_t>(shape.rows));
    put_be32(img, static_cast<std::uint32_t>(shape.cols));
    for (Eigen::Index i = 0; i < d.features.rows(); ++i) {
        for (Eigen::Index j = 0; j < d.features.cols(); ++j) {
            const double v = std::clamp(d.features(i, j), 0.0, 1.0);
            img.put(static_cast<char>(static_cast<unsigned char>(std::lround(v * 255.0))));
        }
    }
    put_be32(lab, kIdxLabels);
    put_be32(lab, static_cast<std::uint32_t>(d.size()));
    for (int y : d.labels) {
        if (y < 0 || y > 255) {
            throw InputError("write_idx: label does not fit in a byte");
        }
        lab.put(static_cast<char>(static_cast<unsigned char>(y)));
    }
}

// ---------------------------------------------------------------- CSV

void write_csv(const Dataset& d, const std::filesystem::path& path)
{
    std::ofstream out(path);
    if (!out) {
        throw IoError("cannot open " + path.string() + " for writing");
    }
    for (Eigen::Index j = 0; j < d.dim(); ++j) {
        out << 'f' << j << ',';
    }
    out << "label\n";
    out.precision(17);
    for (Eigen::Index i = 0; i < d.features.rows(); ++i) {
        for (Eigen::Index j = 0; j < d.dim(); ++j) {
            out << d.features(i, j) << ',';
        }
        out << d.labels[static_cast<std::size_t>(i)] << '\n';
    }
}

Dataset read_csv(const std::filesystem::path& path)
{
    std::ifstream in(path);
    if (!in) {
        throw IoError("cannot open " + path.string());
    }
    std::string line;
    if (!std::getline(in, line)) {
        throw FormatError(path.string() + ": empty file");
    }
    const auto columns = static_cast<std::size_t>(std::count(line.begin(), line.end(), ',') + 1);
    if (columns < 2 || line.substr(line.rfind(',') + 1) != "label") {
        throw FormatError(path.string() + ": header must be f0..f{n-1},label");
    }
    std::vector<double> values;
    Labels labels;
    int max_label = 0;
    while (std::getline(in, line)) {
        if (line.empty()) {
            continue;
        }
        std::stringstream ss(line);
        std::string cell;
        std::size_t c = 0;
        while (std::getline(ss, cell, ',')) {
            try {
                if (c + 1 < columns) {
                    values.push_back(std::stod(cell));
                } else {
                    labels.push_back(std::stoi(cell));
                    max_label = std::max(max_label, labels.back());
                }
            } catch (const std::exception&) {
                throw FormatError(path.string() + ": bad cell '" + cell + "'");
            }
            ++c;
        }
        if (c != columns) {
            throw FormatError(path.string() + ": row with " + std::to_string(c) + " cells");
        }
    }
    Dataset d;
    d.features = from_row_major(values, static_cast<Eigen::Index>(labels.size()), static_cast<Eigen::Index>(columns - 1));
    d.labels = std::move(labels);
    d.num_classes = std::max(2, max_label + 1);
    d.source_index.resize(d.labels.size());
    std::iota(d.source_index.begin(), d.source_index.end(), std::size_t{0});
    d.provenance = "csv(" + path.string() + ")";
    d.validate();
    return d;
}

// ---------------------------------------------------------------- corruptions

const char* to_string(CorruptionKind kind)
{
    switch (kind) {
    case CorruptionKind::gaussian_noise:
        return "gaussian_noise";
    case CorruptionKind::impulse_noise:
        return "impulse_noise";
    case CorruptionKind::box_blur:
        return "box_blur";
    case CorruptionKind::contrast:
        return "contrast";
    }
    return "?";
}

CorruptionKind corruption_from_string(const std::string& s)
{
    for (auto k : {CorruptionKind::gaussian_noise, CorruptionKind::impulse_noise, CorruptionKind::box_blur,
                   CorruptionKind::contrast}) {
        if (s == to_string(k)) {
            return k;
        }
    }
    throw InputError("unknown corruption kind '" + s + "'");
}

std::string CorruptionSpec::name() const { return std::string(to_string(kind)) + "_" + std::to_string(severity); }

std::vector<CorruptionSpec> corruption_grid()
{
    std::vector<CorruptionSpec> grid;
    for (auto k : {CorruptionKind::gaussian_noise, CorruptionKind::impulse_noise, CorruptionKind::box_blur,
                   CorruptionKind::contrast}) {
        for (int s = 1; s <= 5; ++s) {
            grid.push_back({k, s});
        }
    }
    return grid;
}

Matrix apply_box_blur(const Matrix& x, ImageShape shape, int kernel)
{
    if (kernel <= 1) {
        return x;
    }
    const int r = kernel / 2;
    Matrix out(x.rows(), x.cols());
    for (Eigen::Index n = 0; n < x.rows(); ++n) {
        for (int i = 0; i < shape.rows; ++i) {
            for (int j = 0; j < shape.cols; ++j) {
                double sum = 0.0;
                int count = 0;
                for (int di = -r; di <= r; ++di) {
                    for (int dj = -r; dj <= r; ++dj) {
                        const int ii = i + di, jj = j + dj;
                        if (ii >= 0 && ii < shape.rows && jj >= 0 && jj < shape.cols) {
                            sum += x(n, ii * shape.cols + jj);
                            ++count;
                        }
                    }
                }
                out(n, i * shape.cols + j) = sum / count;
            }
        }
    }
    return out;
}

Matrix apply_contrast(const Matrix& x, double gamma, bool per_example)
{
    if (gamma == 1.0) {
        return x;
    }
    if (per_example) {
        const Vector mean = x.rowwise().mean();
        return ((x.colwise() - mean) * gamma).colwise() + mean;
    }
    const Vector mean = x.colwise().mean().transpose();
    return ((x.rowwise() - mean.transpose()) * gamma).rowwise() + mean.transpose();
}

Dataset corrupt(const Dataset& d, const CorruptionSpec& spec, Prng& prng)
{
    if (spec.severity < 1 || spec.severity > 5) {
        throw InputError("corrupt: severity must be in 1..5");
    }
    const auto s = static_cast<std::size_t>(spec.severity - 1);
    Dataset out = d;
    Matrix& x = out.features;
    switch (spec.kind) {
    case CorruptionKind::gaussian_noise:
        x += kGaussianNoiseStd[s] * sample_gaussian(prng, 0.0, 1.0, x.rows(), x.cols());
        break;
    case CorruptionKind::impulse_noise: {
        Vector lo(x.cols()), hi(x.cols());
        if (d.range.bounded()) {
            lo.setConstant(d.range.lo);
            hi.setConstant(d.range.hi);
        } else {
            lo = d.features.colwise().minCoeff().transpose();
            hi = d.features.colwise().maxCoeff().transpose();
        }
        for (Eigen::Index i = 0; i < x.rows(); ++i) {
            for (Eigen::Index j = 0; j < x.cols(); ++j) {
                if (prng.uniform() < kImpulseFraction[s]) {
                    x(i, j) = prng.uniform() < 0.5 ? lo(j) : hi(j);
                }
            }
        }
        break;
    }
    case CorruptionKind::box_blur:
        x = apply_box_blur(x, d.image_shape.value_or(ImageShape{1, static_cast<int>(d.dim())}), kBlurKernel[s]);
        break;
    case CorruptionKind::contrast:
        x = apply_contrast(x, kContrastFactor[s], d.image_shape.has_value());
        break;
    }
    x = d.range.clip(x);
    out.provenance = d.provenance + "|corrupt(" + spec.name() + ",seed=" + std::to_string(prng.seed()) + ")";
    return out;
}

} // namespace stfbnn
