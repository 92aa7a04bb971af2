#pragma once
// A small sequential network engine: 3x3 convolutions, dense layers,
// pointwise activations, dropout and global average pooling, with
// hand-written backward passes, SGD with momentum and a finite-difference
// gradient checker. Samples are processed one at a time; gradients
// accumulate across calls to backward() until the optimizer consumes them.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <random>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "cada/tensor.hpp"

namespace cada::net {

using Rng = std::mt19937_64;

enum class Mode { Train, Eval };

struct Param {
    std::string name;
    Tensor value;
    Tensor grad;

    Param() = default;
    Param(std::string name_, std::vector<std::size_t> shape)
        : name(std::move(name_)), value(shape), grad(std::move(shape)) {}
};

enum class LayerKind { Conv3x3, Linear, Gelu, Relu, Dropout, GlobalAvgPool };

std::string to_string(LayerKind k);
LayerKind parse_layer_kind(const std::string& s);

struct LayerSpec {
    LayerKind kind = LayerKind::Linear;
    std::size_t in_dim = 0;   // channels for conv, features for linear
    std::size_t out_dim = 0;
    double rate = 0.0;        // dropout only

    bool operator==(const LayerSpec&) const = default;
};

class Layer {
public:
    virtual ~Layer() = default;
    virtual LayerSpec spec() const = 0;
    // Caches whatever backward() needs from the most recent call.
    virtual Tensor forward(const Tensor& x, Mode mode) = 0;
    // Adds parameter gradients into Param::grad and returns dLoss/dx.
    virtual Tensor backward(const Tensor& grad_out) = 0;
    virtual std::vector<Param*> params() { return {}; }
};

class Conv3x3 final : public Layer {
public:
    Conv3x3(std::size_t in_ch, std::size_t out_ch);
    LayerSpec spec() const override { return {LayerKind::Conv3x3, in_ch_, out_ch_, 0.0}; }
    Tensor forward(const Tensor& x, Mode mode) override;
    Tensor backward(const Tensor& grad_out) override;
    std::vector<Param*> params() override { return {&weight_, &bias_}; }

    Param& weight() { return weight_; }
    Param& bias() { return bias_; }

private:
    std::size_t in_ch_, out_ch_;
    Param weight_;  // [out, in, 3, 3]
    Param bias_;    // [out]
    std::vector<std::size_t> in_shape_;
    std::vector<double> cols_;  // [in*9, H*W]
};

class Linear final : public Layer {
public:
    Linear(std::size_t in, std::size_t out);
    LayerSpec spec() const override { return {LayerKind::Linear, in_, out_, 0.0}; }
    Tensor forward(const Tensor& x, Mode mode) override;
    Tensor backward(const Tensor& grad_out) override;
    std::vector<Param*> params() override { return {&weight_, &bias_}; }

    Param& weight() { return weight_; }
    Param& bias() { return bias_; }

private:
    std::size_t in_, out_;
    Param weight_;  // [out, in]
    Param bias_;    // [out]
    Tensor input_;
};

// Exact GELU, x * Phi(x), with Phi the standard normal CDF.
class Gelu final : public Layer {
public:
    LayerSpec spec() const override { return {LayerKind::Gelu, 0, 0, 0.0}; }
    Tensor forward(const Tensor& x, Mode mode) override;
    Tensor backward(const Tensor& grad_out) override;

private:
    Tensor input_;
};

class Relu final : public Layer {
public:
    LayerSpec spec() const override { return {LayerKind::Relu, 0, 0, 0.0}; }
    Tensor forward(const Tensor& x, Mode mode) override;
    Tensor backward(const Tensor& grad_out) override;

private:
    Tensor input_;
};

// Inverted dropout: survivors are scaled by 1/(1-rate) in training, eval is
// the identity. A frozen layer reuses its last mask for train-mode passes.
class Dropout final : public Layer {
public:
    Dropout(double rate, Rng* rng);
    LayerSpec spec() const override { return {LayerKind::Dropout, 0, 0, rate_}; }
    Tensor forward(const Tensor& x, Mode mode) override;
    Tensor backward(const Tensor& grad_out) override;

    void freeze(bool on) { frozen_ = on; }
    double rate() const { return rate_; }
    const std::vector<double>& mask() const { return mask_; }

private:
    double rate_;
    Rng* rng_;
    bool frozen_ = false;
    std::vector<double> mask_;  // per element: 0 or 1/(1-rate); empty means identity
};

class GlobalAvgPool final : public Layer {
public:
    LayerSpec spec() const override { return {LayerKind::GlobalAvgPool, 0, 0, 0.0}; }
    Tensor forward(const Tensor& x, Mode mode) override;
    Tensor backward(const Tensor& grad_out) override;

private:
    std::vector<std::size_t> in_shape_;
};

class Network {
public:
    explicit Network(std::uint64_t seed = 0);
    Network(Network&&) noexcept = default;
    Network& operator=(Network&&) noexcept = default;

    // Builds the layers for specs, checks consecutive dims and initializes
    // weights Kaiming-uniform (fan-in) with zero biases.
    static Network build(std::span<const LayerSpec> specs, std::uint64_t seed);

    void add(std::unique_ptr<Layer> layer) { layers_.push_back(std::move(layer)); }
    Tensor forward(const Tensor& x, Mode mode);
    Tensor backward(const Tensor& grad_out);

    std::vector<Param*> params();
    void zero_grad();
    void freeze_dropout(bool on);
    std::vector<LayerSpec> specs() const;
    std::size_t size() const { return layers_.size(); }
    Layer& layer(std::size_t i) { return *layers_.at(i); }
    Rng& rng() { return *rng_; }

private:
    std::vector<std::unique_ptr<Layer>> layers_;
    std::unique_ptr<Rng> rng_;  // shared by dropout layers; heap-held so moves keep it stable
};

void kaiming_uniform_init(Network& net, std::uint64_t seed);

struct Loss {
    double value = 0.0;
    std::vector<double> grad;  // dLoss/dOutput
};

// (1/(2 alpha)) d^2 if |d| < alpha else |d| - alpha/2, with d = y - y_hat.
// Returns the loss; writes dLoss/dy_hat into *grad when given.
double smooth_l1(double y_hat, double y, double alpha, double* grad = nullptr);

// -log softmax(logits)[true_class], max-shifted. Gradient softmax - onehot.
Loss cross_entropy(std::span<const double> logits, std::size_t true_class);

std::vector<double> softmax(std::span<const double> logits);

struct OptimState {
    double lr = 5e-2;
    double momentum = 0.9;
    double weight_decay = 1e-4;
    std::vector<Tensor> velocity;  // lazily sized to the parameter list
};

// g' = g + wd * w; v = momentum * v + g'; w -= lr * v; grads are zeroed.
void sgd_step(std::span<Param* const> params, OptimState& state);

using LossFn = std::function<Loss(const Tensor& output)>;

struct GradCheckOptions {
    double step = 1e-5;
    bool check_input = true;
};

struct GradCheckResult {
    double max_rel_error = 0.0;
    std::string worst;  // parameter name (or "input") holding the worst entry
    std::size_t checked = 0;
};

// Central differences over every parameter entry (and the input). Dropout
// masks are sampled once and frozen so the function being differentiated
// is fixed.
GradCheckResult grad_check(Network& net, const Tensor& input, const LossFn& loss, GradCheckOptions opts = {});

// Checkpoint directory: header.json (layer specs + caller metadata) and one
// ADT1 f64 tensor per parameter, named param_<index>.adt.
void save_checkpoint(const std::filesystem::path& dir, Network& net, const nlohmann::json& meta);
struct LoadedCheckpoint {
    Network net;
    nlohmann::json meta;
};
LoadedCheckpoint load_checkpoint(const std::filesystem::path& dir);

}  // namespace cada::net
