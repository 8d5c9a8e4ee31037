#include "cgc/models.hpp"

#include "cgc/io.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <random>

namespace cgc {

std::string to_string(ModelKind k) {
    switch (k) {
    case ModelKind::tarnet:
        return "tarnet";
    case ModelKind::dragonnet:
        return "dragonnet";
    case ModelKind::bcauss:
        return "bcauss";
    }
    return "tarnet";
}

std::string to_string(ConstraintMode m) {
    return m == ConstraintMode::cgc ? "cgc" : "unconstrained";
}

ModelKind model_kind_from_string(const std::string& s) {
    if (s == "tarnet") {
        return ModelKind::tarnet;
    }
    if (s == "dragonnet") {
        return ModelKind::dragonnet;
    }
    if (s == "bcauss") {
        return ModelKind::bcauss;
    }
    throw ConfigError("unknown model kind '" + s + "' (expected tarnet, dragonnet or bcauss)");
}

ConstraintMode constraint_mode_from_string(const std::string& s) {
    if (s == "cgc") {
        return ConstraintMode::cgc;
    }
    if (s == "unconstrained") {
        return ConstraintMode::unconstrained;
    }
    throw ConfigError("unknown constraint mode '" + s + "' (expected cgc or unconstrained)");
}

ModelSpec ModelSpec::defaults(ModelKind kind, ConstraintMode mode) {
    ModelSpec s;
    s.kind = kind;
    s.mode = mode;
    if (kind == ModelKind::bcauss) {
        s.batch_size.reset();
        s.max_epochs = 500;
        s.patience = 40;
    }
    return s;
}

void ModelSpec::validate() const {
    if (trunk_width < 1 || trunk_depth < 1 || head_width < 1 || head_depth < 1) {
        throw ConfigError("layer widths and depths must be >= 1");
    }
    if (batch_size && *batch_size < 1) {
        throw ConfigError("batch_size must be >= 1");
    }
    if (max_epochs < 0 || patience < 0) {
        throw ConfigError("max_epochs and patience must be non-negative");
    }
    if (!(learning_rate > 0) || momentum < 0 || momentum >= 1) {
        throw ConfigError("need learning_rate > 0 and momentum in [0, 1)");
    }
    if (!(propensity_clip > 0 && propensity_clip < 0.5)) {
        throw ConfigError("propensity_clip must lie in (0, 0.5)");
    }
    if (mode == ConstraintMode::cgc) {
        if (!grouping || grouping->groups.empty()) {
            throw ConfigError("cgc mode needs a non-empty variable grouping");
        }
        for (const auto& g : grouping->groups) {
            if (g.empty()) {
                throw ConfigError("cgc grouping contains an empty group");
            }
        }
    }
}

nlohmann::json to_json(const VariableGrouping& g) {
    return {{"groups", g.groups}, {"covariates", g.covariates}};
}

VariableGrouping grouping_from_json(const nlohmann::json& j) {
    VariableGrouping g;
    g.groups = j.at("groups").get<std::vector<std::vector<std::string>>>();
    g.covariates = j.value("covariates", std::vector<std::string>{});
    return g;
}

nlohmann::json to_json(const ModelSpec& s) {
    nlohmann::json j = {{"kind", to_string(s.kind)},
                        {"mode", to_string(s.mode)},
                        {"trunk_width", s.trunk_width},
                        {"trunk_depth", s.trunk_depth},
                        {"head_width", s.head_width},
                        {"head_depth", s.head_depth},
                        {"learning_rate", s.learning_rate},
                        {"momentum", s.momentum},
                        {"max_epochs", s.max_epochs},
                        {"patience", s.patience},
                        {"seed", s.seed},
                        {"propensity_weight", s.propensity_weight},
                        {"balance_weight", s.balance_weight},
                        {"propensity_clip", s.propensity_clip},
                        {"l2", s.l2}};
    if (s.batch_size) {
        j["batch_size"] = *s.batch_size;
    } else {
        j["batch_size"] = "full";
    }
    if (s.grouping) {
        j["grouping"] = to_json(*s.grouping);
    }
    return j;
}

ModelSpec spec_from_json(const nlohmann::json& j, ModelSpec s) {
    try {
        if (j.contains("kind")) {
            s.kind = model_kind_from_string(j["kind"].get<std::string>());
        }
        if (j.contains("mode")) {
            s.mode = constraint_mode_from_string(j["mode"].get<std::string>());
        }
        auto take = [&](const char* key, auto& field) {
            if (j.contains(key)) {
                field = j[key].get<std::decay_t<decltype(field)>>();
            }
        };
        take("trunk_width", s.trunk_width);
        take("trunk_depth", s.trunk_depth);
        take("head_width", s.head_width);
        take("head_depth", s.head_depth);
        take("learning_rate", s.learning_rate);
        take("momentum", s.momentum);
        take("max_epochs", s.max_epochs);
        take("patience", s.patience);
        take("seed", s.seed);
        take("propensity_weight", s.propensity_weight);
        take("balance_weight", s.balance_weight);
        take("propensity_clip", s.propensity_clip);
        take("l2", s.l2);
        if (j.contains("batch_size")) {
            const auto& b = j["batch_size"];
            if (b.is_string() && b.get<std::string>() == "full") {
                s.batch_size.reset();
            } else {
                s.batch_size = b.get<Index>();
            }
        }
        if (j.contains("grouping")) {
            s.grouping = grouping_from_json(j["grouping"]);
        }
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("model hyperparameters: ") + e.what());
    }
    return s;
}

std::vector<nn::DenseLayer*> CausalNet::parameters() {
    std::vector<nn::DenseLayer*> out;
    for (auto& trunk : trunks) {
        for (auto& l : trunk) {
            out.push_back(&l);
        }
    }
    out.push_back(&representation);
    for (auto& l : head0) {
        out.push_back(&l);
    }
    for (auto& l : head1) {
        out.push_back(&l);
    }
    if (propensity) {
        out.push_back(&*propensity);
    }
    return out;
}

std::vector<const nn::DenseLayer*> CausalNet::parameters() const {
    auto mut = const_cast<CausalNet*>(this)->parameters();
    return {mut.begin(), mut.end()};
}

Index CausalNet::parameter_count() const {
    Index n = 0;
    for (const auto* l : parameters()) {
        n += l->parameter_count();
    }
    return n;
}

CausalNet build_model(const ModelSpec& spec, const std::vector<std::string>& columns) {
    spec.validate();
    if (columns.empty()) {
        throw ShapeError("build_model needs at least one covariate column");
    }
    CausalNet net;
    net.spec = spec;
    net.columns = columns;
    if (spec.mode == ConstraintMode::cgc) {
        net.trunk_columns = spec.grouping->column_indices(columns);
    } else {
        std::vector<Index> all(columns.size());
        std::iota(all.begin(), all.end(), Index{0});
        net.trunk_columns.push_back(std::move(all));
    }

    std::uint64_t layer_no = 0;
    auto next_seed = [&] { return derive_seed(spec.seed, 1000 + layer_no++); };
    auto make_stack = [&](Index in, Index width, Index depth, nn::Activation act) {
        std::vector<nn::DenseLayer> stack;
        for (Index i = 0; i < depth; ++i) {
            stack.push_back(nn::init_layer(i == 0 ? in : width, width, act, next_seed()));
            stack.back().l2 = spec.l2;
        }
        return stack;
    };

    for (const auto& cols : net.trunk_columns) {
        net.trunks.push_back(make_stack(static_cast<Index>(cols.size()), spec.trunk_width, spec.trunk_depth,
                                        nn::Activation::relu));
    }
    const Index concat = spec.trunk_width * static_cast<Index>(net.trunks.size());
    const auto rep_act = spec.mode == ConstraintMode::cgc ? nn::Activation::linear : nn::Activation::relu;
    net.representation = nn::init_layer(concat, spec.trunk_width, rep_act, next_seed());
    net.representation.l2 = spec.l2;
    for (auto* head : {&net.head0, &net.head1}) {
        *head = make_stack(spec.trunk_width, spec.head_width, spec.head_depth, nn::Activation::relu);
        head->push_back(nn::init_layer(spec.head_width, 1, nn::Activation::linear, next_seed()));
        head->back().l2 = spec.l2;
    }
    if (spec.kind != ModelKind::tarnet) {
        net.propensity = nn::init_layer(spec.trunk_width, 1, nn::Activation::linear, next_seed());
        net.propensity->l2 = spec.l2;
    }
    return net;
}

namespace {

struct NetForward {
    std::vector<Matrix> trunk_inputs;
    std::vector<nn::ForwardCache> trunks;
    nn::ForwardCache rep;
    nn::ForwardCache h0;
    nn::ForwardCache h1;
    std::optional<nn::ForwardCache> prop;

    const Matrix& z() const { return rep.output(); }
};

void check_input(const CausalNet& net, const Matrix& x) {
    if (x.cols() != static_cast<Index>(net.columns.size())) {
        throw ShapeError("input has " + std::to_string(x.cols()) + " covariates, model expects " +
                         std::to_string(net.columns.size()));
    }
}

Matrix concat_trunks(const CausalNet& net, const std::vector<nn::ForwardCache>& trunks, Index rows) {
    Matrix concat(rows, net.spec.trunk_width * static_cast<Index>(trunks.size()));
    for (std::size_t k = 0; k < trunks.size(); ++k) {
        concat.middleCols(static_cast<Index>(k) * net.spec.trunk_width, net.spec.trunk_width) = trunks[k].output();
    }
    return concat;
}

NetForward run_forward(const CausalNet& net, const Matrix& x, bool heads = true) {
    check_input(net, x);
    NetForward f;
    const bool unconstrained = net.spec.mode == ConstraintMode::unconstrained;
    for (std::size_t k = 0; k < net.trunks.size(); ++k) {
        if (unconstrained) {
            f.trunks.push_back(nn::forward(net.trunks[k], x));
        } else {
            f.trunk_inputs.push_back(x(Eigen::all, net.trunk_columns[k]));
            f.trunks.push_back(nn::forward(net.trunks[k], f.trunk_inputs.back()));
        }
    }
    f.rep = nn::forward(std::span(&net.representation, 1), concat_trunks(net, f.trunks, x.rows()));
    if (heads) {
        f.h0 = nn::forward(net.head0, f.z());
        f.h1 = nn::forward(net.head1, f.z());
        if (net.propensity) {
            f.prop = nn::forward(std::span(&*net.propensity, 1), f.z());
        }
    }
    return f;
}

Real sigmoid(Real s) {
    return s >= 0 ? 1.0 / (1.0 + std::exp(-s)) : std::exp(s) / (1.0 + std::exp(s));
}

Real softplus(Real v) {
    return v > 0 ? v + std::log1p(std::exp(-v)) : std::log1p(std::exp(v));
}

} // namespace

LossValue loss(const CausalNet& net, const Matrix& x, const Vector& t, const Vector& y_scaled, bool want_grads) {
    const Index n = x.rows();
    if (n == 0) {
        throw DataError("loss on an empty batch");
    }
    if (t.size() != n || y_scaled.size() != n) {
        throw ShapeError("loss: batch vectors do not match the covariate rows");
    }
    const Real inv_n = 1.0 / static_cast<Real>(n);
    const auto f = run_forward(net, x);
    const auto y0 = f.h0.output().col(0);
    const auto y1 = f.h1.output().col(0);

    LossValue out;
    Matrix d0(n, 1), d1(n, 1);
    for (Index i = 0; i < n; ++i) {
        const bool treated = t(i) == 1.0;
        const Real r = (treated ? y1(i) : y0(i)) - y_scaled(i);
        out.factual += r * r;
        d0(i, 0) = treated ? 0.0 : 2.0 * r * inv_n;
        d1(i, 0) = treated ? 2.0 * r * inv_n : 0.0;
    }
    out.factual *= inv_n;

    Matrix ds;
    if (net.propensity) {
        const auto logits = f.prop->output().col(0);
        ds = Matrix::Zero(n, 1);
        if (net.spec.kind == ModelKind::dragonnet) {
            const Real alpha = net.spec.propensity_weight;
            Real bce = 0;
            for (Index i = 0; i < n; ++i) {
                bce += softplus(logits(i)) - t(i) * logits(i);
                ds(i, 0) = alpha * (sigmoid(logits(i)) - t(i)) * inv_n;
            }
            out.propensity = bce * inv_n;
        } else {
            const Real lo = net.spec.propensity_clip;
            const Real hi = 1.0 - lo;
            Vector g(n), gc(n);
            Real sum_w1 = 0, sum_w0 = 0;
            RowVector acc1 = RowVector::Zero(x.cols()), acc0 = RowVector::Zero(x.cols());
            Index n1 = 0;
            for (Index i = 0; i < n; ++i) {
                g(i) = sigmoid(logits(i));
                gc(i) = std::clamp(g(i), lo, hi);
                if (t(i) == 1.0) {
                    ++n1;
                    sum_w1 += 1.0 / gc(i);
                    acc1 += x.row(i) / gc(i);
                } else {
                    sum_w0 += 1.0 / (1.0 - gc(i));
                    acc0 += x.row(i) / (1.0 - gc(i));
                }
            }
            if (n1 == 0 || n1 == n) {
                throw DataError("bcauss balance term is undefined on a batch with a single treatment arm; "
                                "train bcauss with the full training set as one batch");
            }
            const RowVector m1 = acc1 / sum_w1;
            const RowVector m0 = acc0 / sum_w0;
            const RowVector diff = m1 - m0;
            out.balance = diff.squaredNorm();
            const Real lambda = net.spec.balance_weight;
            for (Index i = 0; i < n; ++i) {
                if (!(g(i) > lo && g(i) < hi)) {
                    continue; // clipped: no gradient through g
                }
                Real dg;
                if (t(i) == 1.0) {
                    dg = -2.0 * (x.row(i) - m1).dot(diff) / (sum_w1 * gc(i) * gc(i));
                } else {
                    dg = -2.0 * (x.row(i) - m0).dot(diff) / (sum_w0 * (1.0 - gc(i)) * (1.0 - gc(i)));
                }
                ds(i, 0) = lambda * dg * g(i) * (1.0 - g(i));
            }
        }
    }
    out.total = out.factual + net.spec.propensity_weight * out.propensity * (net.spec.kind == ModelKind::dragonnet) +
                net.spec.balance_weight * out.balance * (net.spec.kind == ModelKind::bcauss);

    const auto params = net.parameters();
    if (!want_grads) {
        for (const auto* p : params) {
            if (p->l2 != 0) {
                out.total += 0.5 * p->l2 * p->weights.squaredNorm();
            }
        }
        return out;
    }

    auto g0 = nn::backward(net.head0, f.h0, d0);
    auto g1 = nn::backward(net.head1, f.h1, d1);
    Matrix dz = g0.input + g1.input;
    std::optional<nn::Gradients> gp;
    if (net.propensity) {
        gp = nn::backward(std::span(&*net.propensity, 1), *f.prop, ds);
        dz += gp->input;
    }
    auto grep = nn::backward(std::span(&net.representation, 1), f.rep, dz);

    for (std::size_t k = 0; k < net.trunks.size(); ++k) {
        const Matrix dk = grep.input.middleCols(static_cast<Index>(k) * net.spec.trunk_width, net.spec.trunk_width);
        auto gt = nn::backward(net.trunks[k], f.trunks[k], dk, false);
        for (auto& lg : gt.layers) {
            out.grads.push_back(std::move(lg));
        }
    }
    out.grads.push_back(std::move(grep.layers[0]));
    for (auto* gs : {&g0, &g1}) {
        for (auto& lg : gs->layers) {
            out.grads.push_back(std::move(lg));
        }
    }
    if (gp) {
        out.grads.push_back(std::move(gp->layers[0]));
    }
    out.total += nn::apply_weight_decay(params, out.grads);
    return out;
}

namespace {

std::vector<nn::DenseLayer> copy_parameters(const CausalNet& net) {
    std::vector<nn::DenseLayer> out;
    for (const auto* p : net.parameters()) {
        out.push_back(*p);
    }
    return out;
}

void restore_parameters(CausalNet& net, const std::vector<nn::DenseLayer>& saved) {
    auto params = net.parameters();
    for (std::size_t i = 0; i < params.size(); ++i) {
        *params[i] = saved[i];
    }
}

bool grads_finite(const std::vector<nn::LayerGrad>& grads) {
    return std::all_of(grads.begin(), grads.end(),
                       [](const nn::LayerGrad& g) { return g.weights.allFinite() && g.bias.allFinite(); });
}

} // namespace

TrainReport train(CausalNet& net, const Dataset& train_set, const Dataset& val_set) {
    train_set.validate();
    val_set.validate();
    if (train_set.columns != net.columns || val_set.columns != net.columns) {
        throw DataError("training data covariates do not match the model's column schema");
    }
    if (train_set.size() < 1 || val_set.size() < 1) {
        throw DataError("training and validation sets must be non-empty");
    }
    const auto& spec = net.spec;
    const Real mean = train_set.y.mean();
    Real scale = std::sqrt((train_set.y.array() - mean).square().sum() / static_cast<Real>(train_set.size()));
    if (!(scale > 0)) {
        scale = 1.0;
    }
    net.y_scaler = {mean, scale};
    const Vector y_train = (train_set.y.array() - mean) / scale;
    const Vector y_val = (val_set.y.array() - mean) / scale;

    const Index n = train_set.size();
    const Index batch = spec.batch_size ? std::min(*spec.batch_size, n) : n;
    std::vector<Index> order(static_cast<std::size_t>(n));
    std::iota(order.begin(), order.end(), Index{0});
    std::mt19937_64 rng(derive_seed(spec.seed, 7));

    nn::OptimizerState opt;
    opt.learning_rate = spec.learning_rate;
    opt.momentum = spec.momentum;

    TrainReport report;
    report.best_val_loss = std::numeric_limits<Real>::infinity();
    auto best = copy_parameters(net);
    int since_best = 0;
    for (int epoch = 1; epoch <= spec.max_epochs; ++epoch) {
        if (batch < n) {
            std::shuffle(order.begin(), order.end(), rng);
        }
        Real epoch_loss = 0;
        int batches = 0;
        for (Index start = 0; start < n; start += batch) {
            const Index len = std::min(batch, n - start);
            LossValue lv;
            if (len == n && batch == n) {
                lv = loss(net, train_set.x, train_set.t, y_train);
            } else {
                std::vector<Index> rows(order.begin() + start, order.begin() + start + len);
                lv = loss(net, train_set.x(rows, Eigen::all), train_set.t(rows), y_train(rows));
            }
            if (!std::isfinite(lv.total) || !grads_finite(lv.grads)) {
                throw TrainingDivergedError("non-finite loss at epoch " + std::to_string(epoch) + ", batch " +
                                            std::to_string(batches + 1) + " (learning rate " +
                                            io::format_real(spec.learning_rate) + ")");
            }
            auto params = net.parameters();
            nn::sgd_step(opt, params, lv.grads);
            epoch_loss += lv.total;
            ++batches;
        }
        report.epochs_run = epoch;
        report.final_train_loss = epoch_loss / batches;

        const Real val = loss(net, val_set.x, val_set.t, y_val, false).total;
        if (!std::isfinite(val)) {
            throw TrainingDivergedError("non-finite validation loss at epoch " + std::to_string(epoch) +
                                        " (learning rate " + io::format_real(spec.learning_rate) + ")");
        }
        if (val < report.best_val_loss) {
            report.best_val_loss = val;
            report.best_epoch = epoch;
            best = copy_parameters(net);
            since_best = 0;
        } else if (++since_best > spec.patience) {
            report.early_stopped = true;
            break;
        }
    }
    restore_parameters(net, best);
    if (report.epochs_run == 0) {
        report.best_val_loss = loss(net, val_set.x, val_set.t, y_val, false).total;
    }
    return report;
}

Prediction predict(const CausalNet& net, const Matrix& x) {
    if (!x.allFinite()) {
        throw DataError("predict: input contains non-finite values");
    }
    const auto f = run_forward(net, x);
    Prediction p;
    p.y0 = (f.h0.output().col(0).array() * net.y_scaler.scale + net.y_scaler.mean).matrix();
    p.y1 = (f.h1.output().col(0).array() * net.y_scaler.scale + net.y_scaler.mean).matrix();
    if (f.prop) {
        p.g = f.prop->output().col(0).unaryExpr([](Real s) { return sigmoid(s); });
    }
    return p;
}

Matrix representation(const CausalNet& net, const Matrix& x) {
    return run_forward(net, x, false).z();
}

std::string predictions_csv(const Prediction& p) {
    std::string out = "y0_hat,y1_hat,g_hat,ite_hat\n";
    for (Index i = 0; i < p.y0.size(); ++i) {
        out += io::format_real(p.y0(i)) + "," + io::format_real(p.y1(i)) + "," +
               (p.g ? io::format_real((*p.g)(i)) : std::string()) + "," + io::format_real(p.y1(i) - p.y0(i)) + "\n";
    }
    return out;
}

Prediction parse_predictions_csv(const std::string& text, const std::string& source) {
    auto lines = io::split(text, '\n');
    while (!lines.empty() && io::trim(lines.back()).empty()) {
        lines.pop_back();
    }
    if (lines.empty() || io::trim(lines.front()) != "y0_hat,y1_hat,g_hat,ite_hat") {
        throw DataError(source + ": expected header y0_hat,y1_hat,g_hat,ite_hat");
    }
    const Index n = static_cast<Index>(lines.size() - 1);
    Prediction p;
    p.y0.resize(n);
    p.y1.resize(n);
    bool has_g = n > 0 && !io::trim(io::split(lines[1], ',').at(2)).empty();
    if (has_g) {
        p.g = Vector(n);
    }
    for (Index i = 0; i < n; ++i) {
        const auto where = source + ": line " + std::to_string(i + 2);
        auto cells = io::split(lines[static_cast<std::size_t>(i) + 1], ',');
        if (cells.size() != 4) {
            throw DataError(where + ": expected 4 cells");
        }
        p.y0(i) = io::parse_real(cells[0], where);
        p.y1(i) = io::parse_real(cells[1], where);
        if (has_g) {
            (*p.g)(i) = io::parse_real(cells[2], where);
        }
    }
    return p;
}

std::string save_model(const CausalNet& net) {
    nlohmann::json extra = {{"model", to_json(net.spec)},
                            {"columns", net.columns},
                            {"trunk_columns", net.trunk_columns},
                            {"y_scaler", {{"mean", net.y_scaler.mean}, {"scale", net.y_scaler.scale}}}};
    const auto params = net.parameters();
    return nn::encode_snapshot(params, extra);
}

CausalNet load_model(const std::string& bytes) {
    auto snap = nn::decode_snapshot(bytes);
    const auto& extra = snap.extra;
    CausalNet net;
    try {
        net.spec = spec_from_json(extra.at("model"), ModelSpec{});
        net.columns = extra.at("columns").get<std::vector<std::string>>();
        net.trunk_columns = extra.at("trunk_columns").get<std::vector<std::vector<Index>>>();
        net.y_scaler.mean = extra.at("y_scaler").at("mean").get<Real>();
        net.y_scaler.scale = extra.at("y_scaler").at("scale").get<Real>();
    } catch (const nlohmann::json::exception& e) {
        throw ShapeError(std::string("model snapshot manifest: ") + e.what());
    }
    const auto& s = net.spec;
    const std::size_t expected = net.trunk_columns.size() * static_cast<std::size_t>(s.trunk_depth) + 1 +
                                 2 * static_cast<std::size_t>(s.head_depth + 1) + (s.kind != ModelKind::tarnet ? 1 : 0);
    if (snap.layers.size() != expected) {
        throw ShapeError("model snapshot holds " + std::to_string(snap.layers.size()) + " layers, spec implies " +
                         std::to_string(expected));
    }
    auto it = snap.layers.begin();
    for (std::size_t k = 0; k < net.trunk_columns.size(); ++k) {
        net.trunks.emplace_back(it, it + s.trunk_depth);
        it += s.trunk_depth;
    }
    net.representation = *it++;
    net.head0.assign(it, it + s.head_depth + 1);
    it += s.head_depth + 1;
    net.head1.assign(it, it + s.head_depth + 1);
    it += s.head_depth + 1;
    if (s.kind != ModelKind::tarnet) {
        net.propensity = *it++;
    }
    return net;
}

} // namespace cgc
