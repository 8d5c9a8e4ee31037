#pragma once

#include "cgc/types.hpp"

#include "json.hpp"

#include <cstdint>
#include <span>
#include <string>
#include <vector>

namespace cgc::nn {

enum class Activation { relu, linear, sigmoid };

std::string to_string(Activation a);
Activation activation_from_string(const std::string& s);

/// Fully connected layer y = act(x Wᵀ + b); rows of x are samples.
struct DenseLayer {
    Matrix weights; // out × in
    Vector bias;    // out
    Activation activation = Activation::linear;
    Real l2 = 0;    // optional weight decay coefficient

    Index in() const { return weights.cols(); }
    Index out() const { return weights.rows(); }
    Index parameter_count() const { return weights.size() + bias.size(); }
};

/// Activations recorded by forward(); inputs[i] feeds layer i.
struct ForwardCache {
    std::vector<Matrix> inputs;
    std::vector<Matrix> outputs;

    const Matrix& output() const { return outputs.back(); }
};

struct LayerGrad {
    Matrix weights;
    Vector bias;
};

struct Gradients {
    std::vector<LayerGrad> layers;
    Matrix input; // empty when the input gradient was not requested
};

ForwardCache forward(std::span<const DenseLayer> layers, const Matrix& x);

/// Analytic gradients of the stack given dL/d(output). Throws ShapeError when
/// the cache does not come from a matching forward() call.
Gradients backward(std::span<const DenseLayer> layers, const ForwardCache& cache, const Matrix& upstream,
                   bool want_input_grad = true);

/// Glorot-uniform weights, zero bias, deterministic per seed.
DenseLayer init_layer(Index in, Index out, Activation activation, std::uint64_t seed);

/// Heavy-ball momentum: v ← μv − ηg, p ← p + v.
struct OptimizerState {
    Real learning_rate = 1e-5;
    Real momentum = 0.9;
    std::vector<LayerGrad> velocity; // lazily sized on the first step
};

void sgd_step(OptimizerState& state, std::span<DenseLayer* const> params, std::span<const LayerGrad> grads);

/// Adds the gradient of ½·l2·‖W‖² for every layer with a non-zero coefficient
/// and returns the penalty value.
Real apply_weight_decay(std::span<const DenseLayer* const> params, std::span<LayerGrad> grads);

Index parameter_count(std::span<const DenseLayer> layers);

// Snapshot layout: one line of JSON manifest (layer shapes plus the caller's
// `extra` object), a newline, then every weight matrix row-major followed by
// its bias, as 64-bit little-endian reals.
std::string encode_snapshot(std::span<const DenseLayer* const> layers, const nlohmann::json& extra = {});

struct Snapshot {
    std::vector<DenseLayer> layers;
    nlohmann::json extra;
};

Snapshot decode_snapshot(const std::string& bytes);

} // namespace cgc::nn
