#pragma once

#include "cgc/bench.hpp"
#include "cgc/graph.hpp"
#include "cgc/nn.hpp"
#include "cgc/types.hpp"

#include "json.hpp"

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

namespace cgc {

enum class ModelKind { tarnet, dragonnet, bcauss };
enum class ConstraintMode { unconstrained, cgc };

std::string to_string(ModelKind k);
std::string to_string(ConstraintMode m);
ModelKind model_kind_from_string(const std::string& s);
ConstraintMode constraint_mode_from_string(const std::string& s);

/// Architecture and training hyperparameters of one estimator.
struct ModelSpec {
    ModelKind kind = ModelKind::tarnet;
    ConstraintMode mode = ConstraintMode::unconstrained;
    std::optional<VariableGrouping> grouping; // required in cgc mode

    Index trunk_width = 200;
    Index trunk_depth = 3;
    Index head_width = 100;
    Index head_depth = 2;

    Real learning_rate = 1e-5;
    Real momentum = 0.9;
    std::optional<Index> batch_size = 64; // nullopt trains on the full set
    int max_epochs = 300;
    int patience = 30;
    std::uint64_t seed = 0;

    Real propensity_weight = 1.0; // dragonnet cross-entropy weight
    Real balance_weight = 1.0;    // bcauss covariate-balance weight
    Real propensity_clip = 0.01;  // bcauss weights use g clipped to [clip, 1 − clip]
    Real l2 = 0.0;

    /// Per-kind defaults: minibatches of 64 for tarnet/dragonnet with 300
    /// epochs and patience 30; full-batch bcauss with 500 epochs, patience 40.
    static ModelSpec defaults(ModelKind kind, ConstraintMode mode = ConstraintMode::unconstrained);

    void validate() const;
};

nlohmann::json to_json(const ModelSpec& spec);
/// Overlays the keys present in `j` onto `base`.
ModelSpec spec_from_json(const nlohmann::json& j, ModelSpec base);

nlohmann::json to_json(const VariableGrouping& g);
VariableGrouping grouping_from_json(const nlohmann::json& j);

struct OutcomeScaler {
    Real mean = 0;
    Real scale = 1;
};

/// Pre-representation trunk(s), representation layer Z, two outcome heads
/// and, for dragonnet/bcauss, a propensity logit unit on Z.
struct CausalNet {
    ModelSpec spec;
    std::vector<std::string> columns;
    std::vector<std::vector<Index>> trunk_columns; // input columns of each trunk
    std::vector<std::vector<nn::DenseLayer>> trunks;
    nn::DenseLayer representation;
    std::vector<nn::DenseLayer> head0;
    std::vector<nn::DenseLayer> head1;
    std::optional<nn::DenseLayer> propensity; // linear; sigmoid applied on output
    OutcomeScaler y_scaler;

    bool has_propensity() const { return propensity.has_value(); }

    /// Every trainable layer in a fixed order: trunks, representation, head0,
    /// head1, propensity.
    std::vector<nn::DenseLayer*> parameters();
    std::vector<const nn::DenseLayer*> parameters() const;
    Index parameter_count() const;
};

/// Unconstrained: one relu trunk over all covariates and a relu
/// representation. CGC: one relu trunk per group over that group's columns,
/// concatenated into a linear representation.
CausalNet build_model(const ModelSpec& spec, const std::vector<std::string>& columns);

struct LossValue {
    Real total = 0;
    Real factual = 0;
    Real propensity = 0;
    Real balance = 0;
    std::vector<nn::LayerGrad> grads; // matches parameters(); empty if not requested
};

/// Training objective on standardized outcomes `y_scaled`.
LossValue loss(const CausalNet& net, const Matrix& x, const Vector& t, const Vector& y_scaled,
               bool want_grads = true);

class TrainingDivergedError : public Error {
public:
    using Error::Error;
};

struct TrainReport {
    int epochs_run = 0;
    int best_epoch = 0;
    Real best_val_loss = 0;
    Real final_train_loss = 0;
    bool early_stopped = false;

    friend bool operator==(const TrainReport&, const TrainReport&) = default;
};

/// Minibatch SGD with momentum on standardized outcomes, early stopping on
/// the validation loss, best-validation parameters restored at the end.
TrainReport train(CausalNet& net, const Dataset& train_set, const Dataset& val_set);

struct Prediction {
    Vector y0;
    Vector y1;
    std::optional<Vector> g;

    Vector ite() const { return y1 - y0; }
    Real ate() const { return ite().mean(); }
};

/// De-standardized potential outcomes for every row of `x`.
Prediction predict(const CausalNet& net, const Matrix& x);

/// Representation Z for every row of `x`.
Matrix representation(const CausalNet& net, const Matrix& x);

/// `y0_hat,y1_hat,g_hat,ite_hat`; g_hat is empty for tarnet.
std::string predictions_csv(const Prediction& p);
Prediction parse_predictions_csv(const std::string& text, const std::string& source = "predictions");

std::string save_model(const CausalNet& net);
CausalNet load_model(const std::string& bytes);

} // namespace cgc
