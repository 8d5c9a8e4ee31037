#pragma once

#include "cgc/bench.hpp"
#include "cgc/discovery.hpp"
#include "cgc/graph.hpp"
#include "cgc/metrics.hpp"
#include "cgc/models.hpp"

#include "json.hpp"

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <utility>
#include <vector>

namespace cgc {

enum class GraphSource { discover, file, forbidden, fully_connected };

std::string to_string(GraphSource s);

struct ModelEntry {
    ModelKind kind = ModelKind::tarnet;
    ConstraintMode mode = ConstraintMode::unconstrained;

    std::string label() const { return to_string(kind) + "_" + to_string(mode); }
};

/// Everything a run needs; loaded from a JSON file.
struct ExperimentConfig {
    std::string dataset_label = "dataset";
    std::optional<SyntheticConfig> synthetic;
    std::vector<std::string> csv_files; // replication k reads file k mod size
    CsvSchema schema;
    std::array<Real, 3> split_ratios{0.7, 0.2, 0.1};
    Real validation_fraction = 0.2; // synthetic only: share of the generated train set

    GraphSource graph_source = GraphSource::discover;
    std::string graph_path;
    std::set<std::pair<std::string, std::string>> forbidden_pairs;
    Real prune_threshold = 0.1;
    std::optional<std::string> fallback_graph;

    std::vector<ModelEntry> models;
    int replications = 1;
    int repeats = 1; // model re-fits per data split
    std::uint64_t seed = 0;
    std::filesystem::path output_dir = "out";
    int jobs = 1;
    bool resume = false;

    // Hyperparameter overrides: "all" first, then the model kind's own entry.
    std::map<std::string, nlohmann::json> hyperparameters;

    int total_replications() const { return replications * repeats; }
    ModelSpec spec_for(const ModelEntry& entry, int replication) const;
    void validate() const;
};

/// Relative paths inside the JSON are resolved against `base_dir`.
ExperimentConfig parse_config(const nlohmann::json& j, const std::filesystem::path& base_dir = ".");
ExperimentConfig load_config(const std::filesystem::path& path);

/// One row of the raw report.
struct ResultRow {
    std::string model;
    std::string mode;
    std::string dataset;
    int replication = 0;
    SplitLabel split = SplitLabel::test;
    EvalReport metrics;
    int epochs = 0;
    Real best_val_loss = 0;
    std::string graph;
    Index n_groups = 0;
};

std::string raw_report_header();
std::string to_csv_line(const ResultRow& row);
std::vector<ResultRow> parse_raw_report(const std::string& text, const std::string& source = "raw report");

struct ExperimentResult {
    std::vector<ResultRow> rows;
    std::vector<std::string> failures; // one message per failed replication or model
};

class Experiment {
public:
    explicit Experiment(ExperimentConfig cfg);

    const ExperimentConfig& config() const { return cfg_; }

    // Pipeline stages; each reads the previous stage's files from the output
    // directory and writes its own.
    void generate();
    void discover();
    void train();
    ExperimentResult evaluate();
    void report() const;

    /// All stages in order.
    ExperimentResult run();

    std::filesystem::path data_dir(int rep) const;
    std::filesystem::path graph_file(int rep) const;
    std::filesystem::path grouping_file(int rep) const;
    std::filesystem::path prediction_file(int rep, const ModelEntry& m, SplitLabel split) const;
    std::filesystem::path model_file(int rep, const ModelEntry& m) const;
    std::filesystem::path raw_report_file() const { return cfg_.output_dir / "raw_report.csv"; }
    std::filesystem::path log_file() const { return cfg_.output_dir / "run.log"; }

private:
    struct RepData {
        Dataset train, val, test;
    };

    RepData make_split(int rep) const;
    RepData read_split(int rep) const;
    void train_replication(int rep, std::vector<std::string>& failures);
    void log(const std::string& line) const;

    ExperimentConfig cfg_;
};

struct DiscoverySummary {
    std::vector<DiscoveryResult> runs;
    std::optional<CausalGraph> mode;
};

/// Repeats discovery on `runs` random training splits of one dataset.
DiscoverySummary discover_repeated(const Dataset& ds, const std::array<Real, 3>& ratios, int runs,
                                   std::uint64_t seed, Real prune_threshold);

/// Covariates followed by `t` and `y`, as fed to discovery.
std::pair<Matrix, std::vector<std::string>> discovery_matrix(const Dataset& ds);

/// Aggregates raw rows into value±SEM and constrained/unconstrained ratio
/// tables (Markdown) plus a CSV carrying mean, SD and SEM.
struct ReportTables {
    std::string markdown;
    std::string aggregate_csv;
};

ReportTables build_report(const std::vector<ResultRow>& rows);

/// Reads every raw_report.csv under `dir` and writes summary.md and
/// aggregate.csv there. Throws DataError when no rows are found.
ReportTables report_directory(const std::filesystem::path& dir);

} // namespace cgc
