#include "cgc/nn.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <random>

namespace cgc::nn {

std::string to_string(Activation a) {
    switch (a) {
    case Activation::relu:
        return "relu";
    case Activation::linear:
        return "linear";
    case Activation::sigmoid:
        return "sigmoid";
    }
    return "linear";
}

Activation activation_from_string(const std::string& s) {
    if (s == "relu") {
        return Activation::relu;
    }
    if (s == "linear") {
        return Activation::linear;
    }
    if (s == "sigmoid") {
        return Activation::sigmoid;
    }
    throw ShapeError("unknown activation '" + s + "'");
}

namespace {

Matrix activate(const Matrix& pre, Activation a) {
    switch (a) {
    case Activation::relu:
        return pre.cwiseMax(0.0);
    case Activation::sigmoid:
        return (1.0 / (1.0 + (-pre.array()).exp())).matrix();
    case Activation::linear:
        break;
    }
    return pre;
}

// dL/d(pre-activation) from dL/d(output), using the cached output.
Matrix activation_backward(const Matrix& out, const Matrix& upstream, Activation a) {
    switch (a) {
    case Activation::relu:
        return (out.array() > 0.0).select(upstream, 0.0);
    case Activation::sigmoid:
        return (upstream.array() * out.array() * (1.0 - out.array())).matrix();
    case Activation::linear:
        break;
    }
    return upstream;
}

} // namespace

ForwardCache forward(std::span<const DenseLayer> layers, const Matrix& x) {
    ForwardCache cache;
    cache.inputs.reserve(layers.size());
    cache.outputs.reserve(layers.size());
    const Matrix* cur = &x;
    for (std::size_t i = 0; i < layers.size(); ++i) {
        const auto& layer = layers[i];
        if (cur->cols() != layer.in()) {
            throw ShapeError("layer " + std::to_string(i) + " expects " + std::to_string(layer.in()) +
                             " inputs, got " + std::to_string(cur->cols()));
        }
        cache.inputs.push_back(*cur);
        Matrix pre = *cur * layer.weights.transpose();
        pre.rowwise() += layer.bias.transpose();
        cache.outputs.push_back(activate(pre, layer.activation));
        cur = &cache.outputs.back();
    }
    return cache;
}

Gradients backward(std::span<const DenseLayer> layers, const ForwardCache& cache, const Matrix& upstream,
                   bool want_input_grad) {
    if (cache.inputs.size() != layers.size() || cache.outputs.size() != layers.size()) {
        throw ShapeError("forward cache holds " + std::to_string(cache.inputs.size()) + " layers, network has " +
                         std::to_string(layers.size()));
    }
    Gradients grads;
    grads.layers.resize(layers.size());
    if (layers.empty()) {
        if (want_input_grad) {
            grads.input = upstream;
        }
        return grads;
    }
    Matrix delta = upstream;
    for (std::size_t step = 0; step < layers.size(); ++step) {
        const std::size_t i = layers.size() - 1 - step;
        const auto& layer = layers[i];
        const auto& out = cache.outputs[i];
        const auto& in = cache.inputs[i];
        if (out.cols() != layer.out() || in.cols() != layer.in() || delta.rows() != out.rows() ||
            delta.cols() != out.cols()) {
            throw ShapeError("stale forward cache at layer " + std::to_string(i));
        }
        Matrix dpre = activation_backward(out, delta, layer.activation);
        grads.layers[i].weights = dpre.transpose() * in;
        grads.layers[i].bias = dpre.colwise().sum().transpose();
        if (i > 0 || want_input_grad) {
            delta = dpre * layer.weights;
        }
    }
    if (want_input_grad) {
        grads.input = std::move(delta);
    }
    return grads;
}

DenseLayer init_layer(Index in, Index out, Activation activation, std::uint64_t seed) {
    if (in < 1 || out < 1) {
        throw ShapeError("layer dimensions must be >= 1");
    }
    std::mt19937_64 rng(seed);
    const Real limit = std::sqrt(6.0 / static_cast<Real>(in + out));
    std::uniform_real_distribution<Real> uni(-limit, limit);
    DenseLayer layer;
    layer.weights.resize(out, in);
    for (Index r = 0; r < out; ++r) {
        for (Index c = 0; c < in; ++c) {
            layer.weights(r, c) = uni(rng);
        }
    }
    layer.bias = Vector::Zero(out);
    layer.activation = activation;
    return layer;
}

void sgd_step(OptimizerState& state, std::span<DenseLayer* const> params, std::span<const LayerGrad> grads) {
    if (params.size() != grads.size()) {
        throw ShapeError("sgd_step: " + std::to_string(params.size()) + " parameter blocks, " +
                         std::to_string(grads.size()) + " gradient blocks");
    }
    if (state.velocity.empty()) {
        state.velocity.resize(params.size());
        for (std::size_t i = 0; i < params.size(); ++i) {
            state.velocity[i].weights = Matrix::Zero(params[i]->out(), params[i]->in());
            state.velocity[i].bias = Vector::Zero(params[i]->out());
        }
    }
    if (state.velocity.size() != params.size()) {
        throw ShapeError("optimizer velocity does not mirror the parameter list");
    }
    for (std::size_t i = 0; i < params.size(); ++i) {
        auto& v = state.velocity[i];
        auto& p = *params[i];
        const auto& g = grads[i];
        if (g.weights.rows() != p.out() || g.weights.cols() != p.in() || g.bias.size() != p.out() ||
            v.weights.rows() != p.out() || v.weights.cols() != p.in()) {
            throw ShapeError("sgd_step: shape mismatch in block " + std::to_string(i));
        }
        v.weights = state.momentum * v.weights - state.learning_rate * g.weights;
        v.bias = state.momentum * v.bias - state.learning_rate * g.bias;
        p.weights += v.weights;
        p.bias += v.bias;
    }
}

Real apply_weight_decay(std::span<const DenseLayer* const> params, std::span<LayerGrad> grads) {
    Real penalty = 0;
    for (std::size_t i = 0; i < params.size(); ++i) {
        const auto& p = *params[i];
        if (p.l2 != 0) {
            penalty += 0.5 * p.l2 * p.weights.squaredNorm();
            grads[i].weights += p.l2 * p.weights;
        }
    }
    return penalty;
}

Index parameter_count(std::span<const DenseLayer> layers) {
    Index n = 0;
    for (const auto& l : layers) {
        n += l.parameter_count();
    }
    return n;
}

namespace {

void append_le(std::string& out, Real value) {
    auto bits = std::bit_cast<std::uint64_t>(value);
    for (int b = 0; b < 8; ++b) {
        out.push_back(static_cast<char>((bits >> (8 * b)) & 0xffu));
    }
}

Real read_le(const std::string& in, std::size_t offset) {
    std::uint64_t bits = 0;
    for (int b = 0; b < 8; ++b) {
        bits |= static_cast<std::uint64_t>(static_cast<unsigned char>(in[offset + b])) << (8 * b);
    }
    return std::bit_cast<Real>(bits);
}

} // namespace

std::string encode_snapshot(std::span<const DenseLayer* const> layers, const nlohmann::json& extra) {
    nlohmann::json manifest;
    manifest["format"] = "cgc-params-v1";
    manifest["layers"] = nlohmann::json::array();
    Index count = 0;
    for (const auto* l : layers) {
        manifest["layers"].push_back(
            {{"in", l->in()}, {"out", l->out()}, {"activation", to_string(l->activation)}, {"l2", l->l2}});
        count += l->parameter_count();
    }
    manifest["count"] = count;
    manifest["extra"] = extra.is_null() ? nlohmann::json::object() : extra;
    std::string out = manifest.dump() + "\n";
    out.reserve(out.size() + static_cast<std::size_t>(count) * 8);
    for (const auto* l : layers) {
        for (Index r = 0; r < l->out(); ++r) {
            for (Index c = 0; c < l->in(); ++c) {
                append_le(out, l->weights(r, c));
            }
        }
        for (Index r = 0; r < l->out(); ++r) {
            append_le(out, l->bias(r));
        }
    }
    return out;
}

Snapshot decode_snapshot(const std::string& bytes) {
    auto nl = bytes.find('\n');
    if (nl == std::string::npos) {
        throw ShapeError("snapshot has no manifest line");
    }
    nlohmann::json manifest;
    try {
        manifest = nlohmann::json::parse(bytes.substr(0, nl));
    } catch (const nlohmann::json::exception& e) {
        throw ShapeError(std::string("snapshot manifest is not valid JSON: ") + e.what());
    }
    if (manifest.value("format", "") != "cgc-params-v1") {
        throw ShapeError("unsupported snapshot format");
    }
    Snapshot snap;
    snap.extra = manifest.value("extra", nlohmann::json::object());
    std::size_t offset = nl + 1;
    const auto count = manifest.at("count").get<Index>();
    if (bytes.size() - offset != static_cast<std::size_t>(count) * 8) {
        throw ShapeError("snapshot payload holds " + std::to_string(bytes.size() - offset) + " bytes, manifest says " +
                         std::to_string(count * 8));
    }
    for (const auto& spec : manifest.at("layers")) {
        DenseLayer l;
        const auto in = spec.at("in").get<Index>();
        const auto out = spec.at("out").get<Index>();
        l.activation = activation_from_string(spec.at("activation").get<std::string>());
        l.l2 = spec.value("l2", 0.0);
        l.weights.resize(out, in);
        l.bias.resize(out);
        for (Index r = 0; r < out; ++r) {
            for (Index c = 0; c < in; ++c, offset += 8) {
                l.weights(r, c) = read_le(bytes, offset);
            }
        }
        for (Index r = 0; r < out; ++r, offset += 8) {
            l.bias(r) = read_le(bytes, offset);
        }
        snap.layers.push_back(std::move(l));
    }
    return snap;
}

} // namespace cgc::nn
