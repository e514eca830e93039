#include "stfbnn/mlp.hpp"

#include <atomic>
#include <cmath>

namespace stfbnn {

namespace {

std::atomic<std::uint64_t> g_revision{0};

void apply_activation(Matrix& z, Activation a)
{
    if (a == Activation::relu) {
        z = z.cwiseMax(0.0);
    }
}

} // namespace

const char* to_string(Activation a) { return a == Activation::relu ? "relu" : "identity"; }

Activation activation_from_string(const std::string& s)
{
    if (s == "relu") {
        return Activation::relu;
    }
    if (s == "identity") {
        return Activation::identity;
    }
    throw InputError("unknown activation '" + s + "'");
}

Mlp::Mlp(std::vector<DenseLayer> layers) : layers_(std::move(layers))
{
    validate();
    touch();
}

Mlp Mlp::he_init(std::span<const Eigen::Index> dims, Prng& prng)
{
    if (dims.size() < 2) {
        throw InputError("he_init: need at least input and output dimensions");
    }
    std::vector<DenseLayer> layers;
    for (std::size_t i = 0; i + 1 < dims.size(); ++i) {
        if (dims[i] < 1 || dims[i + 1] < 1) {
            throw InputError("he_init: dimensions must be positive");
        }
        DenseLayer l;
        l.weight = sample_gaussian(prng, 0.0, std::sqrt(2.0 / static_cast<double>(dims[i])), dims[i + 1], dims[i]);
        l.bias = Vector::Zero(dims[i + 1]);
        l.activation = i + 2 == dims.size() ? Activation::identity : Activation::relu;
        layers.push_back(std::move(l));
    }
    return Mlp(std::move(layers));
}

void Mlp::validate() const
{
    if (layers_.empty()) {
        throw InputError("Mlp: no layers");
    }
    for (std::size_t k = 0; k < layers_.size(); ++k) {
        const DenseLayer& l = layers_[k];
        const std::string where = "layer " + std::to_string(k + 1);
        require_dims(l.bias.size(), l.weight.rows(), where + " bias length");
        if (k > 0) {
            require_dims(l.in_dim(), layers_[k - 1].out_dim(), where + " input dimension");
        }
        require_finite(l.weight, where + " weight");
        require_finite(l.bias, where + " bias");
    }
    if (layers_.back().activation != Activation::identity) {
        throw InputError("Mlp: final layer must use the identity activation");
    }
}

void Mlp::touch() { revision_ = ++g_revision; }

void Mlp::set_layer(std::size_t k, DenseLayer layer)
{
    DenseLayer& slot = layers_.at(k);
    require_dims(layer.weight.rows(), slot.weight.rows(), "set_layer rows");
    require_dims(layer.weight.cols(), slot.weight.cols(), "set_layer cols");
    require_dims(layer.bias.size(), slot.bias.size(), "set_layer bias");
    if (k + 1 == layers_.size() && layer.activation != Activation::identity) {
        throw InputError("set_layer: final layer must use the identity activation");
    }
    slot = std::move(layer);
    touch();
}

std::size_t Mlp::parameter_count() const
{
    std::size_t n = 0;
    for (const auto& l : layers_) {
        n += static_cast<std::size_t>(l.weight.size() + l.bias.size());
    }
    return n;
}

ForwardPass forward(const Mlp& model, const Matrix& x, std::size_t first_layer)
{
    if (first_layer >= model.depth()) {
        throw InputError("forward: first layer out of range");
    }
    require_dims(x.cols(), model.layer(first_layer).in_dim(), "forward input width");
    ForwardPass out;
    out.cache.first_layer = first_layer;
    out.cache.revision = model.revision();
    Matrix a = x;
    for (std::size_t k = first_layer; k < model.depth(); ++k) {
        const DenseLayer& l = model.layer(k);
        Matrix z = a * l.weight.transpose();
        z.rowwise() += l.bias.transpose();
        out.cache.inputs.push_back(std::move(a));
        out.cache.pre.push_back(z);
        apply_activation(z, l.activation);
        a = std::move(z);
    }
    out.logits = std::move(a);
    return out;
}

Matrix logits(const Mlp& model, const Matrix& x, std::size_t first_layer)
{
    if (first_layer >= model.depth()) {
        throw InputError("logits: first layer out of range");
    }
    require_dims(x.cols(), model.layer(first_layer).in_dim(), "logits input width");
    Matrix a = x;
    for (std::size_t k = first_layer; k < model.depth(); ++k) {
        const DenseLayer& l = model.layer(k);
        Matrix z = a * l.weight.transpose();
        z.rowwise() += l.bias.transpose();
        apply_activation(z, l.activation);
        a = std::move(z);
    }
    return a;
}

Matrix activations_through(const Mlp& model, const Matrix& x, std::size_t last)
{
    require_dims(x.cols(), model.input_dim(), "activations_through input width");
    Matrix a = x;
    for (std::size_t k = 0; k <= last && k < model.depth(); ++k) {
        const DenseLayer& l = model.layer(k);
        Matrix z = a * l.weight.transpose();
        z.rowwise() += l.bias.transpose();
        apply_activation(z, l.activation);
        a = std::move(z);
    }
    return a;
}

std::vector<std::vector<bool>> activation_pattern(const Mlp& model, const Vector& x)
{
    require_dims(x.size(), model.input_dim(), "activation_pattern input width");
    std::vector<std::vector<bool>> pattern;
    Vector a = x;
    for (std::size_t k = 0; k + 1 < model.depth(); ++k) {
        const DenseLayer& l = model.layer(k);
        Vector z = l.weight * a + l.bias;
        std::vector<bool> on(static_cast<std::size_t>(z.size()));
        for (Eigen::Index i = 0; i < z.size(); ++i) {
            on[static_cast<std::size_t>(i)] = z(i) > 0.0;
        }
        pattern.push_back(std::move(on));
        a = z.cwiseMax(0.0);
    }
    return pattern;
}

Gradients backward(const Mlp& model, const ForwardCache& cache, const Matrix& dlogits, const BackwardOptions& options)
{
    if (cache.revision != model.revision() || cache.pre.size() + cache.first_layer != model.depth()) {
        throw UsageError("backward: cache does not belong to the current model state");
    }
    if (options.lowest_layer < cache.first_layer) {
        throw UsageError("backward: cache does not reach the requested lowest layer");
    }
    const Matrix& top = cache.pre.back();
    require_dims(dlogits.rows(), top.rows(), "backward dlogits rows");
    require_dims(dlogits.cols(), top.cols(), "backward dlogits cols");

    Gradients g;
    g.weight.resize(model.depth());
    g.bias.resize(model.depth());
    Matrix delta = dlogits; // gradient w.r.t. the output of the current layer
    for (std::size_t k = model.depth(); k-- > options.lowest_layer;) {
        const std::size_t slot = k - cache.first_layer;
        const DenseLayer& l = model.layer(k);
        if (l.activation == Activation::relu) {
            // subgradient at 0 is 0
            delta = (cache.pre[slot].array() > 0.0).select(delta, 0.0);
        }
        g.weight[k] = delta.transpose() * cache.inputs[slot];
        g.bias[k] = delta.colwise().sum().transpose();
        if (k > options.lowest_layer || options.input_gradient) {
            delta = delta * l.weight;
        }
    }
    if (options.input_gradient) {
        g.input = std::move(delta);
    }
    return g;
}

LossResult softmax_cross_entropy(const Matrix& logits, const Labels& labels)
{
    const Eigen::Index k = logits.cols();
    if (k < 2) {
        throw InputError("softmax_cross_entropy: need at least two classes");
    }
    require_dims(static_cast<Eigen::Index>(labels.size()), logits.rows(), "softmax_cross_entropy labels");
    LossResult r;
    Matrix shifted = logits.colwise() - logits.rowwise().maxCoeff();
    Vector log_norm = shifted.array().exp().rowwise().sum().log();
    r.probs = (shifted.colwise() - log_norm).array().exp();
    const double n = static_cast<double>(logits.rows());
    double total = 0.0;
    r.dlogits = r.probs / n;
    for (Eigen::Index i = 0; i < logits.rows(); ++i) {
        const int y = labels[static_cast<std::size_t>(i)];
        if (y < 0 || y >= k) {
            throw InputError("softmax_cross_entropy: label " + std::to_string(y) + " out of range");
        }
        total += log_norm(i) - shifted(i, y);
        r.dlogits(i, y) -= 1.0 / n;
    }
    r.loss = total / n;
    return r;
}

LossResult sigmoid_cross_entropy(const Matrix& logits, const Labels& labels)
{
    require_dims(logits.cols(), 1, "sigmoid_cross_entropy logit width");
    require_dims(static_cast<Eigen::Index>(labels.size()), logits.rows(), "sigmoid_cross_entropy labels");
    const double n = static_cast<double>(logits.rows());
    LossResult r;
    r.probs.resize(logits.rows(), 2);
    r.dlogits.resize(logits.rows(), 1);
    double total = 0.0;
    for (Eigen::Index i = 0; i < logits.rows(); ++i) {
        const int y = labels[static_cast<std::size_t>(i)];
        if (y != 0 && y != 1) {
            throw InputError("sigmoid_cross_entropy: label " + std::to_string(y) + " out of range");
        }
        const double z = logits(i, 0);
        const double p = sigmoid(z);
        // -log p(y) = softplus(-z) for y=1, softplus(z) for y=0
        total += y == 1 ? softplus(-z) : softplus(z);
        r.probs(i, 0) = sigmoid(-z);
        r.probs(i, 1) = p;
        r.dlogits(i, 0) = (p - y) / n;
    }
    r.loss = total / n;
    return r;
}

LossResult classification_loss(const Matrix& logits, const Labels& labels)
{
    return logits.cols() == 1 ? sigmoid_cross_entropy(logits, labels) : softmax_cross_entropy(logits, labels);
}

Matrix class_probabilities(const Matrix& logits)
{
    if (logits.cols() == 1) {
        Matrix p(logits.rows(), 2);
        for (Eigen::Index i = 0; i < logits.rows(); ++i) {
            p(i, 0) = sigmoid(-logits(i, 0));
            p(i, 1) = sigmoid(logits(i, 0));
        }
        return p;
    }
    return softmax_rows(logits);
}

std::vector<int> argmax_rows(const Matrix& probs)
{
    std::vector<int> out(static_cast<std::size_t>(probs.rows()));
    for (Eigen::Index i = 0; i < probs.rows(); ++i) {
        Eigen::Index j = 0;
        probs.row(i).maxCoeff(&j);
        out[static_cast<std::size_t>(i)] = static_cast<int>(j);
    }
    return out;
}

double accuracy(const Mlp& model, const Matrix& x, const Labels& labels)
{
    require_dims(static_cast<Eigen::Index>(labels.size()), x.rows(), "accuracy labels");
    if (labels.empty()) {
        return 0.0;
    }
    const auto pred = argmax_rows(class_probabilities(logits(model, x)));
    std::size_t correct = 0;
    for (std::size_t i = 0; i < labels.size(); ++i) {
        correct += pred[i] == labels[i];
    }
    return static_cast<double>(correct) / static_cast<double>(labels.size());
}

} // namespace stfbnn
