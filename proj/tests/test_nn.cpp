#include "cgc/nn.hpp"

#include "doctest.h"
#include "testlib.hpp"

#include <array>
#include <limits>
#include <random>

using namespace cgc;
using namespace cgc::nn;

namespace {

// Loss used for gradient checks: ½‖out ⊙ c‖² with a fixed random c, so the
// upstream gradient is out ⊙ c ⊙ c.
Real probe_loss(std::span<const DenseLayer> layers, const Matrix& x, const Matrix& c) {
    return 0.5 * (forward(layers, x).output().array() * c.array()).square().sum();
}

Real max_abs(const Matrix& m) {
    return m.size() == 0 ? 0.0 : m.cwiseAbs().maxCoeff();
}

} // namespace

TEST_CASE("forward examples") {
    DenseLayer id;
    id.weights = Matrix::Identity(3, 3);
    id.bias = Vector::Zero(3);
    Matrix x(2, 3);
    x << 1, -2, 3, 0.5, 0, -1;
    CHECK(forward(std::span(&id, 1), x).output() == x);

    DenseLayer r = id;
    r.activation = Activation::relu;
    CHECK(forward(std::span(&r, 1), -x.cwiseAbs()).output().isZero());

    std::vector<DenseLayer> two(2);
    two[0].weights.resize(2, 3);
    two[0].weights << 1, 0, -1, 2, 1, 0;
    two[0].bias = Vector::Constant(2, 0.5);
    two[0].activation = Activation::relu;
    two[1].weights.resize(1, 2);
    two[1].weights << 1, -1;
    two[1].bias = Vector::Constant(1, 0.25);
    // Row 1: h = relu([1-3+.5, 2-2+.5]) = [0, .5]; out = 0 - .5 + .25 = -.25
    // Row 2: h = relu([.5+1+.5, 1+.5]) = [2, 1.5]; out = 2 - 1.5 + .25 = .75
    const Matrix out = forward(two, x).output();
    CHECK(out(0, 0) == doctest::Approx(-0.25));
    CHECK(out(1, 0) == doctest::Approx(0.75));

    try {
        forward(two, Matrix::Zero(2, 4));
        FAIL("expected an error");
    } catch (const ShapeError& e) {
        CHECK(std::string(e.what()).find("layer 0") != std::string::npos);
    }
}

TEST_CASE("backward matches the closed form for a linear layer") {
    std::mt19937_64 rng(1);
    auto layer = init_layer(4, 1, Activation::linear, 3);
    const Matrix x = testlib::random_matrix(10, 4, rng);
    const Matrix y = testlib::random_matrix(10, 1, rng);
    const auto cache = forward(std::span(&layer, 1), x);
    const Matrix upstream = 2.0 * (cache.output() - y) / 10.0;
    const auto g = backward(std::span(&layer, 1), cache, upstream);
    const Matrix expected = 2.0 * x.transpose() * (cache.output() - y) / 10.0;
    CHECK((g.layers[0].weights.transpose() - expected).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("backward with zero upstream gives zero gradients") {
    std::mt19937_64 rng(2);
    std::vector<DenseLayer> layers{init_layer(3, 5, Activation::relu, 1), init_layer(5, 2, Activation::sigmoid, 2)};
    const Matrix x = testlib::random_matrix(6, 3, rng);
    const auto cache = forward(layers, x);
    const auto g = backward(layers, cache, Matrix::Zero(6, 2));
    for (const auto& lg : g.layers) {
        CHECK(lg.weights.isZero());
        CHECK(lg.bias.isZero());
    }
    CHECK(g.input.isZero());
}

TEST_CASE("backward rejects a stale cache") {
    std::vector<DenseLayer> layers{init_layer(3, 5, Activation::relu, 1)};
    const auto cache = forward(layers, Matrix::Ones(2, 3));
    std::vector<DenseLayer> other{init_layer(3, 4, Activation::relu, 1)};
    CHECK_THROWS_AS(backward(other, cache, Matrix::Ones(2, 4)), ShapeError);
}

TEST_CASE("gradients agree with central finite differences") {
    std::mt19937_64 rng(7);
    const std::array acts{Activation::relu, Activation::linear, Activation::sigmoid};
    const Real h = 1e-5;
    Real worst = 0;
    for (int trial = 0; trial < 30; ++trial) {
        const int depth = 1 + static_cast<int>(rng() % 3);
        std::vector<DenseLayer> layers;
        Index in = 1 + static_cast<Index>(rng() % 16);
        const Index d0 = in;
        for (int l = 0; l < depth; ++l) {
            const Index out = 1 + static_cast<Index>(rng() % 16);
            layers.push_back(init_layer(in, out, acts[static_cast<std::size_t>(rng() % 3)], rng()));
            layers.back().bias = testlib::random_matrix(out, 1, rng, 0.1);
            in = out;
        }
        const Matrix x = testlib::random_matrix(5, d0, rng);
        const Matrix c = testlib::random_matrix(5, in, rng);
        const auto cache = forward(layers, x);
        const Matrix upstream = cache.output().array() * c.array().square();
        const auto g = backward(layers, cache, upstream);

        for (std::size_t l = 0; l < layers.size(); ++l) {
            Matrix num(layers[l].weights.rows(), layers[l].weights.cols());
            for (Index i = 0; i < num.size(); ++i) {
                const Real keep = layers[l].weights.data()[i];
                layers[l].weights.data()[i] = keep + h;
                const Real up = probe_loss(layers, x, c);
                layers[l].weights.data()[i] = keep - h;
                const Real down = probe_loss(layers, x, c);
                layers[l].weights.data()[i] = keep;
                num.data()[i] = (up - down) / (2 * h);
            }
            const Real scale = std::max(max_abs(num), max_abs(g.layers[l].weights));
            if (scale > 0) {
                worst = std::max(worst, max_abs(num - g.layers[l].weights) / scale);
            }
        }
    }
    CHECK(worst <= 1e-5);
}

TEST_CASE("sgd_step") {
    auto layer = init_layer(2, 2, Activation::linear, 1);
    const DenseLayer start = layer;
    std::vector<DenseLayer*> params{&layer};
    LayerGrad g{Matrix::Constant(2, 2, 1.0), Vector::Constant(2, 1.0)};
    std::vector<LayerGrad> grads{g};

    SUBCASE("no momentum is plain gradient descent") {
        OptimizerState s{0.1, 0.0, {}};
        sgd_step(s, params, grads);
        CHECK((layer.weights - (start.weights.array() - 0.1).matrix()).cwiseAbs().maxCoeff() < 1e-15);
    }
    SUBCASE("two momentum steps move by eta*g*(1 + 1.9)") {
        OptimizerState s{0.1, 0.9, {}};
        sgd_step(s, params, grads);
        sgd_step(s, params, grads);
        CHECK((start.weights - layer.weights).cwiseAbs().maxCoeff() == doctest::Approx(0.1 * 2.9));
        CHECK((start.bias - layer.bias).cwiseAbs().maxCoeff() == doctest::Approx(0.1 * 2.9));
    }
    SUBCASE("zero gradient and velocity is a fixed point") {
        OptimizerState s{0.1, 0.9, {}};
        std::vector<LayerGrad> zero{{Matrix::Zero(2, 2), Vector::Zero(2)}};
        sgd_step(s, params, zero);
        CHECK(layer.weights == start.weights);
        CHECK(layer.bias == start.bias);
    }
}

TEST_CASE("init_layer") {
    const auto a = init_layer(200, 200, Activation::relu, 11);
    const auto b = init_layer(200, 200, Activation::relu, 11);
    CHECK(a.weights == b.weights);
    CHECK(a.bias.isZero());
    const Real limit = std::sqrt(6.0 / 400.0);
    CHECK(a.weights.cwiseAbs().maxCoeff() <= limit);
    const Real mean = a.weights.mean();
    const Real var = (a.weights.array() - mean).square().mean();
    CHECK(var == doctest::Approx(2.0 / 400.0).epsilon(0.2));
}

TEST_CASE("weight decay adds l2 * W to the gradient") {
    auto layer = init_layer(3, 2, Activation::linear, 4);
    layer.l2 = 0.5;
    std::vector<const DenseLayer*> params{&layer};
    std::vector<LayerGrad> grads{{Matrix::Zero(2, 3), Vector::Zero(2)}};
    const Real penalty = apply_weight_decay(params, grads);
    CHECK(penalty == doctest::Approx(0.25 * layer.weights.squaredNorm()));
    CHECK((grads[0].weights - 0.5 * layer.weights).cwiseAbs().maxCoeff() < 1e-15);
}

TEST_CASE("snapshot round trip is exact") {
    std::vector<DenseLayer> layers{init_layer(3, 4, Activation::relu, 1), init_layer(4, 1, Activation::sigmoid, 2)};
    layers[0].bias(2) = 1.0 / 3.0;
    layers[1].l2 = 0.125;
    std::vector<const DenseLayer*> ptrs{&layers[0], &layers[1]};
    const auto bytes = encode_snapshot(ptrs, {{"note", "x"}});
    const auto snap = decode_snapshot(bytes);
    REQUIRE(snap.layers.size() == 2);
    for (std::size_t i = 0; i < 2; ++i) {
        CHECK(snap.layers[i].weights == layers[i].weights);
        CHECK(snap.layers[i].bias == layers[i].bias);
        CHECK(snap.layers[i].activation == layers[i].activation);
        CHECK(snap.layers[i].l2 == layers[i].l2);
    }
    CHECK(snap.extra["note"] == "x");
    CHECK(encode_snapshot(ptrs, {{"note", "x"}}) == bytes);
    CHECK_THROWS_AS(decode_snapshot(bytes.substr(0, bytes.size() - 3)), Error);
    CHECK_THROWS_AS(decode_snapshot("garbage"), Error);
}

TEST_CASE("a small net memorizes ten samples") {
    std::mt19937_64 rng(3);
    const Matrix x = testlib::random_matrix(10, 3, rng);
    const Matrix y = testlib::random_matrix(10, 1, rng);
    std::vector<DenseLayer> layers{init_layer(3, 16, Activation::relu, 5), init_layer(16, 1, Activation::linear, 6)};
    OptimizerState opt{0.05, 0.9, {}};
    Real first = 0, best = std::numeric_limits<Real>::infinity();
    for (int epoch = 0; epoch < 2000; ++epoch) {
        const auto cache = forward(layers, x);
        const Matrix diff = cache.output() - y;
        const Real mse = diff.squaredNorm() / 10.0;
        if (epoch == 0) {
            first = mse;
        }
        best = std::min(best, mse);
        const auto g = backward(layers, cache, 2.0 * diff / 10.0, false);
        std::vector<DenseLayer*> ptrs{&layers[0], &layers[1]};
        sgd_step(opt, ptrs, g.layers);
    }
    CHECK(best < 0.01 * first);
}
