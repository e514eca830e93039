#pragma once

#include "stfbnn/prng.hpp"
#include "stfbnn/tensor.hpp"

#include <cstdint>
#include <span>
#include <vector>

namespace stfbnn {

enum class Activation { relu, identity };

const char* to_string(Activation a);
Activation activation_from_string(const std::string& s);

struct DenseLayer {
    Matrix weight; // out x in
    Vector bias;   // out
    Activation activation = Activation::relu;

    Eigen::Index in_dim() const { return weight.cols(); }
    Eigen::Index out_dim() const { return weight.rows(); }
};

/// Feed-forward ReLU network. Layer indices are 0-based internally; the
/// reports and the CLI use 1-based layer numbers.
///
/// Every mutation stamps the model with a fresh revision drawn from a global
/// counter, so a forward cache can tell whether the weights it saw are still
/// the ones being differentiated.
class Mlp {
public:
    Mlp() = default;
    explicit Mlp(std::vector<DenseLayer> layers);

    /// He initialization, W ~ N(0, 2/fan_in), zero bias. `dims` = {in, hidden..., out}.
    static Mlp he_init(std::span<const Eigen::Index> dims, Prng& prng);

    std::size_t depth() const { return layers_.size(); }
    Eigen::Index input_dim() const { return layers_.empty() ? 0 : layers_.front().in_dim(); }
    Eigen::Index output_dim() const { return layers_.empty() ? 0 : layers_.back().out_dim(); }
    bool binary_logit() const { return output_dim() == 1; }
    /// Number of classes predicted (2 for a scalar-logit model).
    Eigen::Index num_classes() const { return binary_logit() ? 2 : output_dim(); }

    const std::vector<DenseLayer>& layers() const { return layers_; }
    const DenseLayer& layer(std::size_t k) const { return layers_.at(k); }

    /// Replace layer k; shape must match the existing layer.
    void set_layer(std::size_t k, DenseLayer layer);

    /// In-place edit of layer k (shape must be preserved).
    template <typename F>
    void update_layer(std::size_t k, F&& edit)
    {
        DenseLayer& l = layers_.at(k);
        const auto rows = l.weight.rows();
        const auto cols = l.weight.cols();
        edit(l);
        if (l.weight.rows() != rows || l.weight.cols() != cols || l.bias.size() != rows) {
            throw DimensionError("update_layer: layer shape changed");
        }
        touch();
    }

    std::uint64_t revision() const { return revision_; }
    std::size_t parameter_count() const;

private:
    void validate() const;
    void touch();

    std::vector<DenseLayer> layers_;
    std::uint64_t revision_ = 0;
};

/// Per-layer values recorded by forward for use in backward.
struct ForwardCache {
    std::size_t first_layer = 0;
    std::vector<Matrix> inputs; // inputs[i]: input to layer first_layer + i
    std::vector<Matrix> pre;    // pre[i]: pre-activation of layer first_layer + i
    std::uint64_t revision = 0;
};

struct ForwardPass {
    Matrix logits;
    ForwardCache cache;
};

/// Runs layers first_layer..d-1 on x (batch x in_dim of layer first_layer).
ForwardPass forward(const Mlp& model, const Matrix& x, std::size_t first_layer = 0);

/// Logits without recording a cache.
Matrix logits(const Mlp& model, const Matrix& x, std::size_t first_layer = 0);

/// Output of layer `last` (post-activation), i.e. the input seen by layer last+1.
Matrix activations_through(const Mlp& model, const Matrix& x, std::size_t last);

/// ReLU on/off pattern of every hidden layer at a single input.
std::vector<std::vector<bool>> activation_pattern(const Mlp& model, const Vector& x);

struct BackwardOptions {
    std::size_t lowest_layer = 0; // gradients are produced for layers >= lowest_layer
    bool input_gradient = true;   // also produce dloss/d(input of lowest_layer)
};

struct Gradients {
    std::vector<Matrix> weight; // indexed by absolute layer; empty below lowest_layer
    std::vector<Vector> bias;
    Matrix input;
};

Gradients backward(const Mlp& model, const ForwardCache& cache, const Matrix& dlogits,
                   const BackwardOptions& options = {});

struct LossResult {
    double loss = 0.0; // mean over the batch
    Matrix probs;      // batch x num_classes
    Matrix dlogits;    // gradient of the mean loss
};

/// Row-wise softmax with max subtraction.
template <typename Derived>
Matrix softmax_rows(const Eigen::MatrixBase<Derived>& logits)
{
    Matrix shifted = logits.colwise() - logits.rowwise().maxCoeff();
    Matrix e = shifted.array().exp();
    return e.array().colwise() / e.rowwise().sum().array();
}

LossResult softmax_cross_entropy(const Matrix& logits, const Labels& labels);

/// Logistic loss for a single logit column; labels in {0, 1}.
LossResult sigmoid_cross_entropy(const Matrix& logits, const Labels& labels);

/// Dispatches on the logit width: one column uses the logistic loss, otherwise softmax.
LossResult classification_loss(const Matrix& logits, const Labels& labels);

/// Class probabilities; a scalar logit z maps to [1 - sigmoid(z), sigmoid(z)].
Matrix class_probabilities(const Matrix& logits);

std::vector<int> argmax_rows(const Matrix& probs);

double accuracy(const Mlp& model, const Matrix& x, const Labels& labels);

} // namespace stfbnn
