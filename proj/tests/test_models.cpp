#include "cgc/models.hpp"

#include "doctest.h"
#include "testlib.hpp"

#include <cmath>
#include <algorithm>
#include <numeric>
#include <random>

using namespace cgc;

namespace {

std::vector<std::string> names(Index d) {
    std::vector<std::string> out;
    for (Index j = 0; j < d; ++j) {
        out.push_back("x" + std::to_string(j + 1));
    }
    return out;
}

ModelSpec small_spec(ModelKind kind, ConstraintMode mode, std::optional<VariableGrouping> grouping = {}) {
    auto s = ModelSpec::defaults(kind, mode);
    s.trunk_width = 6;
    s.trunk_depth = 2;
    s.head_width = 5;
    s.head_depth = 1;
    s.grouping = std::move(grouping);
    s.seed = 99;
    return s;
}

VariableGrouping three_groups() {
    VariableGrouping g;
    g.covariates = names(5);
    g.groups = {{"x1", "x2"}, {"x3"}, {"x4", "x5"}};
    return g;
}

Dataset make_dataset(Index n, Index d, std::mt19937_64& rng) {
    Dataset ds;
    ds.x = testlib::random_matrix(n, d, rng);
    ds.t.resize(n);
    for (Index i = 0; i < n; ++i) {
        ds.t(i) = static_cast<Real>(i % 2);
    }
    ds.y = ds.x.col(0) + 0.5 * ds.t + 0.1 * testlib::random_matrix(n, 1, rng).col(0);
    ds.columns = names(d);
    return ds;
}

std::vector<std::pair<ModelKind, ConstraintMode>> all_variants() {
    std::vector<std::pair<ModelKind, ConstraintMode>> v;
    for (auto k : {ModelKind::tarnet, ModelKind::dragonnet, ModelKind::bcauss}) {
        for (auto m : {ConstraintMode::unconstrained, ConstraintMode::cgc}) {
            v.emplace_back(k, m);
        }
    }
    return v;
}

} // namespace

TEST_CASE("architecture") {
    SUBCASE("default widths") {
        auto spec = ModelSpec::defaults(ModelKind::dragonnet);
        const auto net = build_model(spec, names(25));
        REQUIRE(net.trunks.size() == 1);
        CHECK(net.trunks[0].front().in() == 25);
        CHECK(net.trunks[0].front().out() == 200);
        CHECK(net.trunks[0].size() == 3);
        CHECK(net.representation.out() == 200);
        CHECK(net.head0.front().out() == 100);
        CHECK(net.head0.size() == 3); // two hidden layers plus the output unit
        CHECK(net.head0.back().out() == 1);
        REQUIRE(net.has_propensity());
        CHECK(net.propensity->out() == 1);
    }
    SUBCASE("a single group of every covariate mirrors the unconstrained net") {
        const auto cols = names(4);
        const auto u = build_model(small_spec(ModelKind::bcauss, ConstraintMode::unconstrained), cols);
        const auto c = build_model(small_spec(ModelKind::bcauss, ConstraintMode::cgc, fully_connected(cols)), cols);
        CHECK(u.parameter_count() == c.parameter_count());
        CHECK(u.representation.activation == nn::Activation::relu);
        CHECK(c.representation.activation == nn::Activation::linear);
        const auto pu = u.parameters();
        const auto pc = c.parameters();
        REQUIRE(pu.size() == pc.size());
        for (std::size_t i = 0; i < pu.size(); ++i) {
            CHECK(pu[i]->weights.rows() == pc[i]->weights.rows());
            CHECK(pu[i]->weights.cols() == pc[i]->weights.cols());
        }
    }
    SUBCASE("three groups concatenate into the representation") {
        auto spec = ModelSpec::defaults(ModelKind::tarnet, ConstraintMode::cgc);
        spec.grouping = three_groups();
        const auto net = build_model(spec, names(5));
        CHECK(net.representation.in() == 3 * 200);
        // Trunk inputs 2, 1, 2; then two 200×200 layers per trunk.
        Index expected = 0;
        for (Index in : {2, 1, 2}) {
            expected += (in * 200 + 200) + 2 * (200 * 200 + 200);
        }
        expected += 600 * 200 + 200;                                  // representation
        expected += 2 * ((200 * 100 + 100) + (100 * 100 + 100) + 101); // heads
        CHECK(net.parameter_count() == expected);
        CHECK(net.trunk_columns == std::vector<std::vector<Index>>{{0, 1}, {2}, {3, 4}});
    }
    SUBCASE("errors") {
        auto g = three_groups();
        g.groups.push_back({"nope"});
        CHECK_THROWS_AS(build_model(small_spec(ModelKind::tarnet, ConstraintMode::cgc, g), names(5)), Error);
        CHECK_THROWS_AS(build_model(small_spec(ModelKind::tarnet, ConstraintMode::cgc), names(5)), ConfigError);
        auto bad = small_spec(ModelKind::tarnet, ConstraintMode::unconstrained);
        bad.trunk_width = 0;
        CHECK_THROWS_AS(bad.validate(), ConfigError);
    }
}

TEST_CASE("loss closed forms") {
    std::mt19937_64 rng(1);
    const auto cols = names(3);
    const Matrix x = testlib::random_matrix(8, 3, rng);
    Vector t(8);
    t << 0, 1, 0, 1, 0, 1, 1, 0;

    SUBCASE("perfect predictions give zero tarnet loss") {
        auto net = build_model(small_spec(ModelKind::tarnet, ConstraintMode::unconstrained), cols);
        for (auto* head : {&net.head0, &net.head1}) {
            head->back().weights.setZero();
        }
        net.head0.back().bias(0) = -0.5;
        net.head1.back().bias(0) = 0.75;
        Vector y(8);
        for (Index i = 0; i < 8; ++i) {
            y(i) = t(i) == 1 ? 0.75 : -0.5;
        }
        CHECK(loss(net, x, t, y, false).total == 0.0);
    }
    SUBCASE("dragonnet with g = 0.5 pays ln 2 per sample") {
        auto net = build_model(small_spec(ModelKind::dragonnet, ConstraintMode::unconstrained), cols);
        net.propensity->weights.setZero();
        net.propensity->bias.setZero();
        const auto lv = loss(net, x, t, Vector::Zero(8), false);
        CHECK(lv.propensity == doctest::Approx(std::log(2.0)).epsilon(1e-14));
        CHECK(lv.total == doctest::Approx(lv.factual + std::log(2.0)).epsilon(1e-14));
    }
    SUBCASE("bcauss toy batch with constant propensity") {
        auto net = build_model(small_spec(ModelKind::bcauss, ConstraintMode::unconstrained), names(2));
        net.propensity->weights.setZero();
        net.propensity->bias(0) = std::log(0.3 / 0.7);
        Matrix xb(4, 2);
        xb << 1, 2, 3, 0, 0, 1, 2, 2;
        Vector tb(4);
        tb << 1, 1, 0, 0;
        // Equal weights within an arm: treated mean (2, 1), control mean (1, 1.5).
        const auto lv = loss(net, xb, tb, Vector::Zero(4), false);
        CHECK(lv.balance == doctest::Approx(1.25).epsilon(1e-12));
    }
    SUBCASE("bcauss rejects a single-arm batch") {
        auto net = build_model(small_spec(ModelKind::bcauss, ConstraintMode::unconstrained), cols);
        try {
            loss(net, x, Vector::Ones(8), Vector::Zero(8));
            FAIL("expected an error");
        } catch (const DataError& e) {
            CHECK(std::string(e.what()).find("full training set") != std::string::npos);
        }
    }
}

TEST_CASE("bcauss balance term matches a direct evaluation") {
    std::mt19937_64 rng(2);
    for (int trial = 0; trial < 20; ++trial) {
        const Index n = 6 + static_cast<Index>(rng() % 10), d = 3;
        auto net = build_model(small_spec(ModelKind::bcauss, ConstraintMode::unconstrained), names(d));
        net.propensity->weights *= 4.0; // spread g, including values beyond the clip
        const Matrix x = testlib::random_matrix(n, d, rng);
        Vector t(n);
        for (Index i = 0; i < n; ++i) {
            t(i) = static_cast<Real>(i % 2);
        }
        const auto g = *predict(net, x).g;
        Real expected = 0;
        for (Index j = 0; j < d; ++j) {
            Real a = 0, b = 0, c = 0, e = 0;
            for (Index i = 0; i < n; ++i) {
                const Real gi = std::min(std::max(g(i), 0.01), 0.99);
                a += t(i) * x(i, j) / gi;
                b += t(i) / gi;
                c += (1 - t(i)) * x(i, j) / (1 - gi);
                e += (1 - t(i)) / (1 - gi);
            }
            expected += (a / b - c / e) * (a / b - c / e);
        }
        CHECK(loss(net, x, t, Vector::Zero(n), false).balance == doctest::Approx(expected).epsilon(1e-12));
    }
}

TEST_CASE("loss gradients agree with finite differences") {
    std::mt19937_64 rng(3);
    const auto cols = names(5);
    const Matrix x = testlib::random_matrix(12, 5, rng);
    Vector t(12);
    for (Index i = 0; i < 12; ++i) {
        t(i) = static_cast<Real>((i * 7) % 3 == 0);
    }
    const Vector y = testlib::random_matrix(12, 1, rng).col(0);
    const Real h = 1e-6;
    for (auto [kind, mode] : all_variants()) {
        CAPTURE(to_string(kind));
        CAPTURE(to_string(mode));
        auto spec = small_spec(kind, mode, mode == ConstraintMode::cgc ? std::optional(three_groups()) : std::nullopt);
        spec.l2 = 0.01;
        auto net = build_model(spec, cols);
        const auto lv = loss(net, x, t, y);
        auto params = net.parameters();
        REQUIRE(lv.grads.size() == params.size());
        Real worst = 0;
        for (std::size_t l = 0; l < params.size(); ++l) {
            Matrix num(params[l]->weights.rows(), params[l]->weights.cols());
            for (Index i = 0; i < num.size(); ++i) {
                Real& w = params[l]->weights.data()[i];
                const Real keep = w;
                w = keep + h;
                const Real up = loss(net, x, t, y, false).total;
                w = keep - h;
                const Real down = loss(net, x, t, y, false).total;
                w = keep;
                num.data()[i] = (up - down) / (2 * h);
            }
            const Real scale = std::max(num.cwiseAbs().maxCoeff(), lv.grads[l].weights.cwiseAbs().maxCoeff());
            if (scale > 1e-8) {
                worst = std::max(worst, (num - lv.grads[l].weights).cwiseAbs().maxCoeff() / scale);
            }
        }
        CHECK(worst < 1e-5);
    }
}

TEST_CASE("cgc representation has no cross-group interactions") {
    std::mt19937_64 rng(4);
    const auto cols = names(5);
    auto spec = small_spec(ModelKind::tarnet, ConstraintMode::cgc, three_groups());
    const Real delta = 0.1;
    for (int trial = 0; trial < 5; ++trial) {
        spec.seed = rng();
        const auto net = build_model(spec, cols);
        const Matrix x = testlib::random_matrix(1, 5, rng);
        // x1 (group 0) and x4 (group 2) share no group.
        Matrix xi = x, xj = x, xij = x;
        xi(0, 0) += delta;
        xj(0, 3) += delta;
        xij(0, 0) += delta;
        xij(0, 3) += delta;
        const Matrix z = representation(net, x);
        const Matrix mixed = representation(net, xij) - representation(net, xi) - representation(net, xj) + z;
        for (Index k = 0; k < mixed.cols(); ++k) {
            CHECK(std::abs(mixed(0, k)) <= 1e-8 * (1 + std::abs(z(0, k))));
        }
    }
}

TEST_CASE("training") {
    std::mt19937_64 rng(5);

    SUBCASE("memorizes a noiseless linear dataset") {
        Dataset ds;
        ds.x = testlib::random_matrix(10, 2, rng);
        ds.t = Vector::Zero(10);
        for (Index i = 0; i < 10; i += 2) {
            ds.t(i) = 1;
        }
        ds.y = 2.0 * ds.x.col(0) - ds.x.col(1) + ds.t;
        ds.columns = names(2);
        auto spec = small_spec(ModelKind::tarnet, ConstraintMode::unconstrained);
        spec.trunk_width = 16;
        spec.learning_rate = 0.01;
        spec.batch_size.reset();
        spec.max_epochs = 2000;
        spec.patience = 2000;
        auto net = build_model(spec, ds.columns);
        train(net, ds, ds);
        const auto p = predict(net, ds.x);
        Real mse = 0;
        for (Index i = 0; i < 10; ++i) {
            const Real r = (ds.t(i) == 1 ? p.y1(i) : p.y0(i)) - ds.y(i);
            mse += r * r / 10.0;
        }
        CHECK(mse < 1e-2);
    }
    SUBCASE("patience 0 stops at the first non-improving epoch") {
        const auto tr = make_dataset(64, 3, rng);
        const auto va = make_dataset(32, 3, rng);
        auto spec = small_spec(ModelKind::dragonnet, ConstraintMode::unconstrained);
        spec.learning_rate = 0.5; // large steps make an early non-improvement near certain
        spec.patience = 0;
        spec.max_epochs = 200;
        auto net = build_model(spec, tr.columns);
        const auto r = train(net, tr, va);
        REQUIRE(r.early_stopped);
        CHECK(r.epochs_run == r.best_epoch + 1);
    }
    SUBCASE("same seed and data give the same report and weights") {
        const auto tr = make_dataset(50, 3, rng);
        const auto va = make_dataset(20, 3, rng);
        auto spec = small_spec(ModelKind::dragonnet, ConstraintMode::unconstrained);
        spec.learning_rate = 1e-2;
        spec.max_epochs = 20;
        auto a = build_model(spec, tr.columns);
        auto b = build_model(spec, tr.columns);
        CHECK(train(a, tr, va) == train(b, tr, va));
        CHECK(save_model(a) == save_model(b));
    }
    SUBCASE("best validation loss is never beaten by a later epoch") {
        const auto tr = make_dataset(60, 3, rng);
        const auto va = make_dataset(30, 3, rng);
        auto spec = small_spec(ModelKind::tarnet, ConstraintMode::unconstrained);
        spec.learning_rate = 1e-2;
        spec.max_epochs = 30;
        auto net = build_model(spec, tr.columns);
        const auto r = train(net, tr, va);
        const Vector yv = (va.y.array() - net.y_scaler.mean) / net.y_scaler.scale;
        CHECK(loss(net, va.x, va.t, yv, false).total == doctest::Approx(r.best_val_loss).epsilon(1e-12));
    }
    SUBCASE("divergence is reported with diagnostics") {
        const auto tr = make_dataset(40, 3, rng);
        auto spec = small_spec(ModelKind::tarnet, ConstraintMode::unconstrained);
        spec.learning_rate = 1e6;
        spec.max_epochs = 50;
        auto net = build_model(spec, tr.columns);
        try {
            train(net, tr, tr);
            FAIL("expected divergence");
        } catch (const TrainingDivergedError& e) {
            const std::string msg = e.what();
            CHECK(msg.find("epoch") != std::string::npos);
            CHECK(msg.find("learning rate") != std::string::npos);
        }
    }
    SUBCASE("schema mismatch") {
        const auto tr = make_dataset(40, 3, rng);
        auto net = build_model(small_spec(ModelKind::tarnet, ConstraintMode::unconstrained), names(4));
        CHECK_THROWS_AS(train(net, tr, tr), DataError);
    }
}

TEST_CASE("full-batch bcauss loss ignores row order") {
    std::mt19937_64 rng(6);
    const auto ds = make_dataset(30, 4, rng);
    auto net = build_model(small_spec(ModelKind::bcauss, ConstraintMode::unconstrained), ds.columns);
    std::vector<Index> perm(30);
    std::iota(perm.begin(), perm.end(), Index{0});
    std::shuffle(perm.begin(), perm.end(), rng);
    const auto a = loss(net, ds.x, ds.t, ds.y, false).total;
    const auto b = loss(net, ds.x(perm, Eigen::all), ds.t(perm), ds.y(perm), false).total;
    CHECK(a == doctest::Approx(b).epsilon(1e-13));
}

TEST_CASE("prediction") {
    std::mt19937_64 rng(7);
    const auto ds = make_dataset(40, 3, rng);
    for (auto [kind, mode] : all_variants()) {
        auto g = fully_connected(ds.columns);
        auto net = build_model(small_spec(kind, mode, g), ds.columns);
        const auto big = predict(net, ds.x * 100.0);
        CHECK(big.y0.allFinite());
        CHECK(big.y1.allFinite());
        const auto p = predict(net, ds.x);
        CHECK(p.g.has_value() == (kind != ModelKind::tarnet));
        if (p.g) {
            CHECK((p.g->array() > 0).all());
            CHECK((p.g->array() < 1).all());
        }
    }

    SUBCASE("de-standardization after zero epochs") {
        auto spec = small_spec(ModelKind::tarnet, ConstraintMode::unconstrained);
        spec.max_epochs = 0;
        auto net = build_model(spec, ds.columns);
        train(net, ds, ds);
        CHECK(net.y_scaler.mean == ds.y.mean());
        const Matrix z = representation(net, ds.x);
        const Vector raw0 = nn::forward(net.head0, z).output().col(0);
        const Vector raw1 = nn::forward(net.head1, z).output().col(0);
        const auto p = predict(net, ds.x);
        CHECK(p.y0 == (raw0.array() * net.y_scaler.scale + net.y_scaler.mean).matrix());
        CHECK(p.y1 == (raw1.array() * net.y_scaler.scale + net.y_scaler.mean).matrix());
        CHECK(p.ate() == doctest::Approx(p.ite().mean()));
    }
    SUBCASE("predict rejects non-finite input") {
        auto net = build_model(small_spec(ModelKind::tarnet, ConstraintMode::unconstrained), ds.columns);
        Matrix bad = ds.x;
        bad(0, 0) = std::nan("");
        CHECK_THROWS_AS(predict(net, bad), DataError);
        CHECK_THROWS_AS(predict(net, Matrix::Zero(3, 5)), ShapeError);
    }
}

TEST_CASE("persistence round trips") {
    std::mt19937_64 rng(8);
    const auto ds = make_dataset(30, 5, rng);
    auto spec = small_spec(ModelKind::dragonnet, ConstraintMode::cgc, three_groups());
    spec.max_epochs = 5;
    spec.learning_rate = 1e-2;
    auto net = build_model(spec, ds.columns);
    train(net, ds, ds);

    const auto bytes = save_model(net);
    const auto back = load_model(bytes);
    const auto p1 = predict(net, ds.x);
    const auto p2 = predict(back, ds.x);
    CHECK(p1.y0 == p2.y0);
    CHECK(p1.y1 == p2.y1);
    CHECK(*p1.g == *p2.g);
    CHECK(save_model(back) == bytes);
    CHECK(back.spec.grouping == spec.grouping);

    const auto csv = predictions_csv(p1);
    CHECK(csv.substr(0, csv.find('\n')) == "y0_hat,y1_hat,g_hat,ite_hat");
    const auto parsed = parse_predictions_csv(csv);
    CHECK(parsed.y0 == p1.y0);
    CHECK(parsed.y1 == p1.y1);
    CHECK(*parsed.g == *p1.g);
    CHECK_THROWS_AS(parse_predictions_csv("a,b\n1,2\n"), DataError);

    const auto j = to_json(spec);
    const auto s2 = spec_from_json(j, ModelSpec{});
    CHECK(to_json(s2) == j);
    auto full = ModelSpec::defaults(ModelKind::bcauss);
    CHECK_FALSE(full.batch_size.has_value());
    CHECK(to_json(full)["batch_size"] == "full");
    CHECK_THROWS_AS(spec_from_json({{"learning_rate", "fast"}}, ModelSpec{}), ConfigError);
}
