#include "cgc/experiment.hpp"

#include "cgc/io.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <mutex>
#include <numeric>
#include <random>
#include <thread>

namespace cgc {

namespace fs = std::filesystem;

namespace {

constexpr std::uint64_t kSyntheticStream = 11;
constexpr std::uint64_t kSplitStream = 12;
constexpr std::uint64_t kValidationStream = 13;
constexpr std::uint64_t kDiscoveryStream = 14;
constexpr std::uint64_t kModelStream = 15;

std::mutex log_mutex;

std::string rep_name(int rep) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "rep_%04d", rep);
    return buf;
}

std::string fixed(Real v, int digits = 3) {
    if (std::isnan(v)) {
        return "nan";
    }
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.*f", digits, v);
    return buf;
}

// Adds uncovered data columns as one trailing group.
VariableGrouping complete_grouping(VariableGrouping g, const std::vector<std::string>& columns) {
    std::set<std::string> covered;
    for (const auto& grp : g.groups) {
        covered.insert(grp.begin(), grp.end());
    }
    std::vector<std::string> missing;
    for (const auto& c : columns) {
        if (!covered.count(c)) {
            missing.push_back(c);
        }
    }
    if (!missing.empty()) {
        g.groups.push_back(missing);
    }
    g.covariates = columns;
    return g;
}

} // namespace

std::string to_string(GraphSource s) {
    switch (s) {
    case GraphSource::discover:
        return "discover";
    case GraphSource::file:
        return "file";
    case GraphSource::forbidden:
        return "forbidden";
    case GraphSource::fully_connected:
        return "fully_connected";
    }
    return "discover";
}

ModelSpec ExperimentConfig::spec_for(const ModelEntry& entry, int replication) const {
    auto spec = ModelSpec::defaults(entry.kind, entry.mode);
    if (auto it = hyperparameters.find("all"); it != hyperparameters.end()) {
        spec = spec_from_json(it->second, spec);
    }
    if (auto it = hyperparameters.find(to_string(entry.kind)); it != hyperparameters.end()) {
        spec = spec_from_json(it->second, spec);
    }
    spec.kind = entry.kind;
    spec.mode = entry.mode;
    spec.seed = derive_seed(seed, static_cast<std::uint64_t>(replication), kModelStream);
    return spec;
}

void ExperimentConfig::validate() const {
    if (models.empty()) {
        throw ConfigError("config: 'models' must list at least one model");
    }
    if (replications < 1 || repeats < 1) {
        throw ConfigError("config: 'replications' and 'repeats' must be >= 1");
    }
    if (jobs < 1) {
        throw ConfigError("config: 'jobs' must be >= 1");
    }
    if (!synthetic && csv_files.empty()) {
        throw ConfigError("config: 'dataset' needs either 'synthetic' or 'csv'");
    }
    if (!(validation_fraction > 0 && validation_fraction < 1)) {
        throw ConfigError("config: 'dataset.validation_fraction' must lie in (0, 1)");
    }
    split_sizes(1000, split_ratios);
    if (graph_source == GraphSource::file && graph_path.empty()) {
        throw ConfigError("config: 'graph.path' is required when graph.source is 'file'");
    }
}

namespace {

template <typename T>
T get_key(const nlohmann::json& j, const std::string& path) {
    try {
        return j.get<T>();
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError("config key '" + path + "': " + e.what());
    }
}

void reject_unknown(const nlohmann::json& j, const std::string& path, std::initializer_list<const char*> known) {
    if (!j.is_object()) {
        throw ConfigError("config key '" + path + "' must be an object");
    }
    for (const auto& [key, _] : j.items()) {
        if (std::none_of(known.begin(), known.end(), [&](const char* k) { return key == k; })) {
            throw ConfigError("config: unknown key '" + (path.empty() ? key : path + "." + key) + "'");
        }
    }
}

std::string resolve(const fs::path& base, const std::string& p) {
    fs::path path(p);
    return path.is_absolute() ? path.string() : (base / path).lexically_normal().string();
}

} // namespace

ExperimentConfig parse_config(const nlohmann::json& j, const fs::path& base_dir) {
    reject_unknown(j, "", {"dataset", "graph", "models", "replications", "repeats", "seed", "output", "jobs",
                           "resume", "hyperparameters"});
    ExperimentConfig cfg;
    if (!j.contains("dataset")) {
        throw ConfigError("config: missing key 'dataset'");
    }
    const auto& ds = j["dataset"];
    reject_unknown(ds, "dataset", {"label", "synthetic", "csv", "split", "validation_fraction"});
    cfg.dataset_label = ds.contains("label") ? get_key<std::string>(ds["label"], "dataset.label") : "dataset";
    if (ds.contains("synthetic")) {
        const auto& s = ds["synthetic"];
        reject_unknown(s, "dataset.synthetic", {"scenario", "n", "d", "sigma", "allow_off_grid"});
        SyntheticConfig sc;
        if (s.contains("scenario")) {
            sc.scenario = scenario_from_string(get_key<std::string>(s["scenario"], "dataset.synthetic.scenario"));
        }
        if (s.contains("n")) {
            sc.n = get_key<Index>(s["n"], "dataset.synthetic.n");
        }
        if (s.contains("d")) {
            sc.d = get_key<Index>(s["d"], "dataset.synthetic.d");
        }
        if (s.contains("sigma")) {
            sc.sigma = get_key<Real>(s["sigma"], "dataset.synthetic.sigma");
        }
        if (s.contains("allow_off_grid")) {
            sc.allow_off_grid = get_key<bool>(s["allow_off_grid"], "dataset.synthetic.allow_off_grid");
        }
        cfg.synthetic = sc;
        if (!ds.contains("label")) {
            cfg.dataset_label = "scenario_" + to_string(sc.scenario);
        }
    }
    if (ds.contains("csv")) {
        if (cfg.synthetic) {
            throw ConfigError("config: 'dataset' takes either 'synthetic' or 'csv', not both");
        }
        const auto& c = ds["csv"];
        reject_unknown(c, "dataset.csv", {"files", "directory", "schema"});
        if (c.contains("files")) {
            for (const auto& f : get_key<std::vector<std::string>>(c["files"], "dataset.csv.files")) {
                cfg.csv_files.push_back(resolve(base_dir, f));
            }
        }
        if (c.contains("directory")) {
            const auto dir = resolve(base_dir, get_key<std::string>(c["directory"], "dataset.csv.directory"));
            if (!fs::is_directory(dir)) {
                throw ConfigError("config key 'dataset.csv.directory': '" + dir + "' is not a directory");
            }
            std::vector<std::string> found;
            for (const auto& e : fs::directory_iterator(dir)) {
                if (e.path().extension() == ".csv") {
                    found.push_back(e.path().string());
                }
            }
            std::sort(found.begin(), found.end());
            cfg.csv_files.insert(cfg.csv_files.end(), found.begin(), found.end());
        }
        if (c.contains("schema")) {
            const auto& sc = c["schema"];
            reject_unknown(sc, "dataset.csv.schema", {"covariates", "t", "y", "mu0", "mu1", "e_true", "exp"});
            if (sc.contains("covariates")) {
                cfg.schema.covariates = get_key<std::vector<std::string>>(sc["covariates"], "dataset.csv.schema.covariates");
            }
            if (sc.contains("t")) {
                cfg.schema.t = get_key<std::string>(sc["t"], "dataset.csv.schema.t");
            }
            if (sc.contains("y")) {
                cfg.schema.y = get_key<std::string>(sc["y"], "dataset.csv.schema.y");
            }
            if (sc.contains("mu0")) {
                cfg.schema.mu0 = get_key<std::string>(sc["mu0"], "dataset.csv.schema.mu0");
            }
            if (sc.contains("mu1")) {
                cfg.schema.mu1 = get_key<std::string>(sc["mu1"], "dataset.csv.schema.mu1");
            }
            if (sc.contains("e_true")) {
                cfg.schema.e_true = get_key<std::string>(sc["e_true"], "dataset.csv.schema.e_true");
            }
            if (sc.contains("exp")) {
                cfg.schema.exp_flag = get_key<std::string>(sc["exp"], "dataset.csv.schema.exp");
            }
        }
        if (cfg.csv_files.empty()) {
            throw ConfigError("config key 'dataset.csv': no input files");
        }
    }
    if (ds.contains("split")) {
        auto r = get_key<std::vector<Real>>(ds["split"], "dataset.split");
        if (r.size() != 3) {
            throw ConfigError("config key 'dataset.split': expected three ratios");
        }
        cfg.split_ratios = {r[0], r[1], r[2]};
    }
    if (ds.contains("validation_fraction")) {
        cfg.validation_fraction = get_key<Real>(ds["validation_fraction"], "dataset.validation_fraction");
    }

    if (j.contains("graph")) {
        const auto& g = j["graph"];
        reject_unknown(g, "graph", {"source", "path", "forbidden", "prune_threshold", "fallback"});
        const auto src = g.contains("source") ? get_key<std::string>(g["source"], "graph.source") : "discover";
        if (src == "discover") {
            cfg.graph_source = GraphSource::discover;
        } else if (src == "file") {
            cfg.graph_source = GraphSource::file;
        } else if (src == "forbidden") {
            cfg.graph_source = GraphSource::forbidden;
        } else if (src == "fully_connected") {
            cfg.graph_source = GraphSource::fully_connected;
        } else {
            throw ConfigError("config key 'graph.source': unknown value '" + src + "'");
        }
        if (g.contains("path")) {
            cfg.graph_path = resolve(base_dir, get_key<std::string>(g["path"], "graph.path"));
        }
        if (g.contains("forbidden")) {
            for (const auto& p : get_key<std::vector<std::vector<std::string>>>(g["forbidden"], "graph.forbidden")) {
                if (p.size() != 2) {
                    throw ConfigError("config key 'graph.forbidden': every entry must be a pair");
                }
                cfg.forbidden_pairs.emplace(p[0], p[1]);
            }
        }
        if (g.contains("prune_threshold")) {
            cfg.prune_threshold = get_key<Real>(g["prune_threshold"], "graph.prune_threshold");
        }
        if (g.contains("fallback")) {
            cfg.fallback_graph = resolve(base_dir, get_key<std::string>(g["fallback"], "graph.fallback"));
        }
    }

    if (!j.contains("models") || !j["models"].is_array()) {
        throw ConfigError("config: 'models' must be an array");
    }
    for (std::size_t i = 0; i < j["models"].size(); ++i) {
        const auto& m = j["models"][i];
        const auto path = "models[" + std::to_string(i) + "]";
        reject_unknown(m, path, {"kind", "mode"});
        ModelEntry e;
        e.kind = model_kind_from_string(get_key<std::string>(m.at("kind"), path + ".kind"));
        e.mode = m.contains("mode") ? constraint_mode_from_string(get_key<std::string>(m["mode"], path + ".mode"))
                                    : ConstraintMode::unconstrained;
        cfg.models.push_back(e);
    }
    if (j.contains("replications")) {
        cfg.replications = get_key<int>(j["replications"], "replications");
    }
    if (j.contains("repeats")) {
        cfg.repeats = get_key<int>(j["repeats"], "repeats");
    }
    if (j.contains("seed")) {
        cfg.seed = get_key<std::uint64_t>(j["seed"], "seed");
    }
    if (j.contains("output")) {
        cfg.output_dir = resolve(base_dir, get_key<std::string>(j["output"], "output"));
    }
    if (j.contains("jobs")) {
        cfg.jobs = get_key<int>(j["jobs"], "jobs");
    }
    if (j.contains("resume")) {
        cfg.resume = get_key<bool>(j["resume"], "resume");
    }
    if (j.contains("hyperparameters")) {
        const auto& h = j["hyperparameters"];
        reject_unknown(h, "hyperparameters", {"all", "tarnet", "dragonnet", "bcauss"});
        for (const auto& [key, value] : h.items()) {
            spec_from_json(value, ModelSpec{}); // surfaces type errors early
            cfg.hyperparameters[key] = value;
        }
    }
    cfg.validate();
    return cfg;
}

ExperimentConfig load_config(const fs::path& path) {
    std::string text;
    try {
        text = io::read_file(path);
    } catch (const DataError& e) {
        throw ConfigError(e.what());
    }
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(text);
    } catch (const nlohmann::json::parse_error& e) {
        // Translate the byte offset into a line number.
        const auto upto = std::min<std::size_t>(e.byte, text.size());
        const auto line = 1 + std::count(text.begin(), text.begin() + static_cast<std::ptrdiff_t>(upto), '\n');
        throw ConfigError(path.string() + ": line " + std::to_string(line) + ": " + e.what());
    }
    return parse_config(j, path.parent_path().empty() ? fs::path(".") : path.parent_path());
}

std::string raw_report_header() {
    return "model,mode,dataset,replication,split,n_eval,sqrt_pehe,ate_error,att_error,epochs,best_val_loss,graph,"
           "n_groups";
}

std::string to_csv_line(const ResultRow& r) {
    return r.model + "," + r.mode + "," + r.dataset + "," + std::to_string(r.replication) + "," +
           to_string(r.split) + "," + std::to_string(r.metrics.n_eval) + "," + io::format_real(r.metrics.sqrt_pehe) +
           "," + io::format_real(r.metrics.ate_error) + "," +
           (r.metrics.att_error ? io::format_real(*r.metrics.att_error) : std::string()) + "," +
           std::to_string(r.epochs) + "," + io::format_real(r.best_val_loss) + "," + r.graph + "," +
           std::to_string(r.n_groups);
}

std::vector<ResultRow> parse_raw_report(const std::string& text, const std::string& source) {
    auto lines = io::split(text, '\n');
    while (!lines.empty() && io::trim(lines.back()).empty()) {
        lines.pop_back();
    }
    if (lines.empty() || io::trim(lines.front()) != raw_report_header()) {
        throw DataError(source + ": not a raw report (unexpected header)");
    }
    std::vector<ResultRow> rows;
    for (std::size_t i = 1; i < lines.size(); ++i) {
        const auto where = source + ": line " + std::to_string(i + 1);
        auto c = io::split(lines[i], ',');
        if (c.size() != 13) {
            throw DataError(where + ": expected 13 cells");
        }
        ResultRow r;
        r.model = c[0];
        r.mode = c[1];
        r.dataset = c[2];
        r.replication = static_cast<int>(io::parse_real(c[3], where));
        r.split = c[4] == "train" ? SplitLabel::train : SplitLabel::test;
        r.metrics.split = r.split;
        r.metrics.n_eval = static_cast<Index>(io::parse_real(c[5], where));
        r.metrics.sqrt_pehe = io::parse_real(c[6], where);
        r.metrics.ate_error = io::parse_real(c[7], where);
        if (!io::trim(c[8]).empty()) {
            r.metrics.att_error = io::parse_real(c[8], where);
        }
        r.epochs = static_cast<int>(io::parse_real(c[9], where));
        r.best_val_loss = io::parse_real(c[10], where);
        r.graph = c[11];
        r.n_groups = static_cast<Index>(io::parse_real(c[12], where));
        rows.push_back(std::move(r));
    }
    return rows;
}

std::pair<Matrix, std::vector<std::string>> discovery_matrix(const Dataset& ds) {
    Matrix m(ds.size(), ds.dims() + 2);
    m.leftCols(ds.dims()) = ds.x;
    m.col(ds.dims()) = ds.t;
    m.col(ds.dims() + 1) = ds.y;
    auto names = ds.columns;
    names.push_back("t");
    names.push_back("y");
    return {std::move(m), std::move(names)};
}

DiscoverySummary discover_repeated(const Dataset& ds, const std::array<Real, 3>& ratios, int runs,
                                   std::uint64_t seed, Real prune_threshold) {
    if (runs < 1) {
        throw ConfigError("discovery needs at least one run");
    }
    DiscoverySummary out;
    std::vector<CausalGraph> found;
    for (int i = 0; i < runs; ++i) {
        const auto parts = split(ds, ratios, derive_seed(seed, static_cast<std::uint64_t>(i), kSplitStream));
        const auto [m, names] = discovery_matrix(parts.train);
        try {
            out.runs.push_back(ica_lingam(m, names, "t", "y", prune_threshold,
                                          derive_seed(seed, static_cast<std::uint64_t>(i), kDiscoveryStream)));
        } catch (const DataError& e) {
            out.runs.push_back(DiscoveryFailure{e.what()});
        }
        if (const auto* g = std::get_if<CausalGraph>(&out.runs.back())) {
            found.push_back(*g);
        }
    }
    if (!found.empty()) {
        out.mode = mode_graph(found);
    }
    return out;
}

Experiment::Experiment(ExperimentConfig cfg) : cfg_(std::move(cfg)) {
    cfg_.validate();
}

fs::path Experiment::data_dir(int rep) const {
    return cfg_.output_dir / "data" / rep_name(rep);
}

fs::path Experiment::graph_file(int rep) const {
    return cfg_.output_dir / "graphs" / (rep_name(rep) + ".graph");
}

fs::path Experiment::grouping_file(int rep) const {
    return cfg_.output_dir / "graphs" / (rep_name(rep) + ".groups.json");
}

fs::path Experiment::prediction_file(int rep, const ModelEntry& m, SplitLabel split) const {
    return cfg_.output_dir / "predictions" / rep_name(rep) / (m.label() + "_" + to_string(split) + ".csv");
}

fs::path Experiment::model_file(int rep, const ModelEntry& m) const {
    return cfg_.output_dir / "models" / rep_name(rep) / (m.label() + ".bin");
}

void Experiment::log(const std::string& line) const {
    std::lock_guard lock(log_mutex);
    fs::create_directories(cfg_.output_dir);
    std::ofstream out(log_file(), std::ios::app);
    out << line << "\n";
}

Experiment::RepData Experiment::make_split(int rep) const {
    const auto split_index = static_cast<std::uint64_t>(rep / cfg_.repeats);
    RepData d;
    if (cfg_.synthetic) {
        auto sc = *cfg_.synthetic;
        sc.seed = derive_seed(cfg_.seed, split_index, kSyntheticStream);
        auto gen = cgc::generate(sc);
        const Index n = gen.train.size();
        const auto n_val = static_cast<Index>(std::floor(static_cast<Real>(n) * cfg_.validation_fraction + 1e-9));
        if (n_val < 1 || n_val >= n) {
            throw DataError("validation fraction leaves an empty training or validation part");
        }
        std::vector<Index> perm(static_cast<std::size_t>(n));
        std::iota(perm.begin(), perm.end(), Index{0});
        std::mt19937_64 rng(derive_seed(cfg_.seed, split_index, kValidationStream));
        std::shuffle(perm.begin(), perm.end(), rng);
        std::vector<Index> val(perm.begin(), perm.begin() + n_val);
        std::vector<Index> tr(perm.begin() + n_val, perm.end());
        std::sort(val.begin(), val.end());
        std::sort(tr.begin(), tr.end());
        d.train = gen.train.subset(tr);
        d.val = gen.train.subset(val);
        d.test = std::move(gen.test);
    } else {
        const auto& file = cfg_.csv_files[split_index % cfg_.csv_files.size()];
        const auto ds = load_csv(file, cfg_.schema);
        auto parts = split(ds, cfg_.split_ratios, derive_seed(cfg_.seed, split_index, kSplitStream));
        d.train = std::move(parts.train);
        d.val = std::move(parts.val);
        d.test = std::move(parts.test);
    }
    return d;
}

Experiment::RepData Experiment::read_split(int rep) const {
    const auto dir = data_dir(rep);
    CsvSchema schema;
    RepData d;
    auto read = [&](const char* name) {
        const auto path = dir / name;
        if (!fs::exists(path)) {
            throw DataError("missing '" + path.string() + "'; run the 'generate' stage first");
        }
        const auto text = io::read_file(path);
        // Optional ground-truth columns are declared only if the header has them.
        const auto header = text.substr(0, text.find('\n'));
        const auto cols = io::split(header, ',');
        auto has = [&](const char* c) { return std::find(cols.begin(), cols.end(), c) != cols.end(); };
        CsvSchema s;
        if (has("mu0")) {
            s.mu0 = "mu0";
        }
        if (has("mu1")) {
            s.mu1 = "mu1";
        }
        if (has("e_true")) {
            s.e_true = "e_true";
        }
        if (has("exp")) {
            s.exp_flag = "exp";
        }
        return parse_csv(text, s, path.string());
    };
    d.train = read("train.csv");
    d.val = read("val.csv");
    d.test = read("test.csv");
    return d;
}

void Experiment::generate() {
    for (int rep = 0; rep < cfg_.total_replications(); ++rep) {
        auto d = make_split(rep);
        write_csv(d.train, (data_dir(rep) / "train.csv").string());
        write_csv(d.val, (data_dir(rep) / "val.csv").string());
        write_csv(d.test, (data_dir(rep) / "test.csv").string());
    }
    log("generate: wrote " + std::to_string(cfg_.total_replications()) + " replication splits");
}

void Experiment::discover() {
    std::vector<CausalGraph> successes;
    for (int rep = 0; rep < cfg_.total_replications(); ++rep) {
        const auto d = read_split(rep);
        const auto& columns = d.train.columns;
        nlohmann::json record;
        VariableGrouping grouping;
        std::string source;
        switch (cfg_.graph_source) {
        case GraphSource::file: {
            const auto g = read_graph(cfg_.graph_path);
            grouping = complete_grouping(build_groups(g), columns);
            source = "file";
            write_graph(g, graph_file(rep).string());
            log(rep_name(rep) + ": graph read from " + cfg_.graph_path);
            break;
        }
        case GraphSource::forbidden:
            grouping = groups_from_forbidden(columns, cfg_.forbidden_pairs);
            source = "forbidden";
            log(rep_name(rep) + ": groups from forbidden pairs");
            break;
        case GraphSource::fully_connected:
            grouping = fully_connected(columns);
            source = "fully-connected";
            log(rep_name(rep) + ": fully connected grouping");
            break;
        case GraphSource::discover: {
            log(rep_name(rep) + ": discovery invoked");
            const auto [m, names] = discovery_matrix(d.train);
            std::optional<CausalGraph> graph;
            std::string reason;
            try {
                auto res = ica_lingam(m, names, "t", "y", cfg_.prune_threshold,
                                      derive_seed(cfg_.seed, static_cast<std::uint64_t>(rep), kDiscoveryStream));
                if (auto* g = std::get_if<CausalGraph>(&res)) {
                    build_groups(*g); // a graph without covariate parents of y is unusable
                    graph = *g;
                } else {
                    reason = std::get<DiscoveryFailure>(res).reason;
                }
            } catch (const Error& e) {
                reason = e.what();
            }
            if (graph) {
                successes.push_back(*graph);
                source = "discovered";
            } else {
                log(rep_name(rep) + ": discovery failed (" + reason + ")");
                record["reason"] = reason;
                if (!successes.empty()) {
                    graph = mode_graph(successes);
                    source = "fallback-mode";
                } else if (cfg_.fallback_graph) {
                    graph = read_graph(*cfg_.fallback_graph);
                    source = "fallback-file";
                } else {
                    source = "fallback-fully-connected";
                }
                log(rep_name(rep) + ": using " + source);
            }
            if (graph) {
                write_graph(*graph, graph_file(rep).string());
                grouping = complete_grouping(build_groups(*graph), columns);
            } else {
                grouping = fully_connected(columns);
            }
            break;
        }
        }
        record["source"] = source;
        record["grouping"] = to_json(grouping);
        io::write_file_atomic(grouping_file(rep), record.dump(2) + "\n");
    }
    if (!successes.empty()) {
        write_graph(mode_graph(successes), (cfg_.output_dir / "graphs" / "mode.graph").string());
    }
}

void Experiment::train_replication(int rep, std::vector<std::string>& failures) {
    RepData d;
    nlohmann::json groups;
    try {
        d = read_split(rep);
        if (!fs::exists(grouping_file(rep))) {
            throw DataError("missing '" + grouping_file(rep).string() + "'; run the 'discover' stage first");
        }
        groups = nlohmann::json::parse(io::read_file(grouping_file(rep)));
    } catch (const std::exception& e) {
        failures.push_back(rep_name(rep) + ": " + e.what());
        log(failures.back());
        return;
    }
    const auto grouping = grouping_from_json(groups.at("grouping"));
    for (const auto& m : cfg_.models) {
        if (cfg_.resume && fs::exists(prediction_file(rep, m, SplitLabel::test))) {
            continue;
        }
        try {
            auto spec = cfg_.spec_for(m, rep);
            if (m.mode == ConstraintMode::cgc) {
                spec.grouping = grouping;
            }
            auto net = build_model(spec, d.train.columns);
            const auto report = cgc::train(net, d.train, d.val);
            const nlohmann::json rj = {{"epochs_run", report.epochs_run},
                                       {"best_epoch", report.best_epoch},
                                       {"best_val_loss", report.best_val_loss},
                                       {"final_train_loss", report.final_train_loss},
                                       {"early_stopped", report.early_stopped}};
            io::write_file_atomic(model_file(rep, m), save_model(net));
            auto report_path = model_file(rep, m);
            report_path.replace_extension(".json");
            io::write_file_atomic(report_path, rj.dump(2) + "\n");
            io::write_file_atomic(prediction_file(rep, m, SplitLabel::train),
                                  predictions_csv(predict(net, d.train.x)));
            io::write_file_atomic(prediction_file(rep, m, SplitLabel::test), predictions_csv(predict(net, d.test.x)));
            log(rep_name(rep) + ": trained " + m.label() + " (" + std::to_string(report.epochs_run) + " epochs)");
        } catch (const std::exception& e) {
            failures.push_back(rep_name(rep) + " " + m.label() + ": " + e.what());
            log(failures.back());
        }
    }
}

void Experiment::train() {
    const int total = cfg_.total_replications();
    std::vector<std::vector<std::string>> failures(static_cast<std::size_t>(total));
    std::atomic<int> next{0};
    auto worker = [&] {
        for (int rep = next++; rep < total; rep = next++) {
            train_replication(rep, failures[static_cast<std::size_t>(rep)]);
        }
    };
    const int jobs = std::min(cfg_.jobs, total);
    if (jobs <= 1) {
        worker();
    } else {
        std::vector<std::thread> pool;
        for (int i = 0; i < jobs; ++i) {
            pool.emplace_back(worker);
        }
        for (auto& t : pool) {
            t.join();
        }
    }
}

ExperimentResult Experiment::evaluate() {
    ExperimentResult result;
    std::string merged = raw_report_header() + "\n";
    for (int rep = 0; rep < cfg_.total_replications(); ++rep) {
        RepData d;
        nlohmann::json groups;
        try {
            d = read_split(rep);
            groups = nlohmann::json::parse(io::read_file(grouping_file(rep)));
        } catch (const std::exception& e) {
            result.failures.push_back(rep_name(rep) + ": " + e.what());
            continue;
        }
        std::string rep_csv = raw_report_header() + "\n";
        for (const auto& m : cfg_.models) {
            const auto train_pred = prediction_file(rep, m, SplitLabel::train);
            const auto test_pred = prediction_file(rep, m, SplitLabel::test);
            if (!fs::exists(train_pred) || !fs::exists(test_pred)) {
                result.failures.push_back(rep_name(rep) + " " + m.label() + ": no predictions (training failed or "
                                                                            "the 'train' stage has not run)");
                continue;
            }
            auto report_path = model_file(rep, m);
            report_path.replace_extension(".json");
            const auto rj = nlohmann::json::parse(io::read_file(report_path));
            for (auto split : {SplitLabel::train, SplitLabel::test}) {
                const auto& data = split == SplitLabel::train ? d.train : d.test;
                const auto path = split == SplitLabel::train ? train_pred : test_pred;
                const auto pred = parse_predictions_csv(io::read_file(path), path.string());
                if (pred.y0.size() != data.size()) {
                    throw DataError(path.string() + ": row count does not match the split");
                }
                ResultRow row;
                row.model = to_string(m.kind);
                row.mode = to_string(m.mode);
                row.dataset = cfg_.dataset_label;
                row.replication = rep;
                row.split = split;
                row.metrics = cgc::evaluate(data, pred.ite(), split);
                row.epochs = rj.at("epochs_run").get<int>();
                row.best_val_loss = rj.at("best_val_loss").get<Real>();
                row.graph = groups.at("source").get<std::string>();
                row.n_groups = static_cast<Index>(groups.at("grouping").at("groups").size());
                rep_csv += to_csv_line(row) + "\n";
                result.rows.push_back(std::move(row));
            }
        }
        io::write_file_atomic(cfg_.output_dir / "replications" / (rep_name(rep) + ".csv"), rep_csv);
    }
    for (const auto& r : result.rows) {
        merged += to_csv_line(r) + "\n";
    }
    io::write_file_atomic(raw_report_file(), merged);
    return result;
}

void Experiment::report() const {
    report_directory(cfg_.output_dir);
}

ExperimentResult Experiment::run() {
    fs::create_directories(cfg_.output_dir);
    fs::remove(log_file());
    generate();
    discover();
    train();
    auto result = evaluate();
    if (!result.rows.empty()) {
        report();
    }
    return result;
}

ReportTables build_report(const std::vector<ResultRow>& rows) {
    if (rows.empty()) {
        throw DataError("report: no result rows");
    }
    using Key = std::tuple<std::string, std::string, std::string, std::string>; // dataset, split, model, mode
    std::map<Key, std::map<int, EvalReport>> grouped;
    std::set<std::string> datasets;
    for (const auto& r : rows) {
        grouped[{r.dataset, to_string(r.split), r.model, r.mode}][r.replication] = r.metrics;
        datasets.insert(r.dataset);
    }
    const std::vector<std::string> kinds{"tarnet", "dragonnet", "bcauss"};
    const std::vector<std::string> modes{"cgc", "unconstrained"};

    ReportTables out;
    out.aggregate_csv = "dataset,split,model,mode,metric,n,mean,sd,sem\n";
    std::string& md = out.markdown;
    md += "# Results\n";
    for (const auto& ds : datasets) {
        for (const std::string split : {"train", "test"}) {
            std::string values;
            std::string ratios;
            for (const auto& kind : kinds) {
                for (const auto& mode : modes) {
                    auto it = grouped.find({ds, split, kind, mode});
                    if (it == grouped.end()) {
                        continue;
                    }
                    std::vector<Real> pehe, ate, att;
                    for (const auto& [rep, m] : it->second) {
                        pehe.push_back(m.sqrt_pehe);
                        ate.push_back(m.ate_error);
                        if (m.att_error) {
                            att.push_back(*m.att_error);
                        }
                    }
                    auto cell = [](const Summary& s) {
                        return s.n == 0 ? std::string("-") : fixed(s.mean) + " ± " + fixed(s.sem);
                    };
                    const auto sp = summarize(pehe), sa = summarize(ate), st = summarize(att);
                    values += "| " + kind + (mode == "cgc" ? " + CGC" : "") + " | " + cell(sp) + " | " + cell(sa) +
                              " | " + cell(st) + " | " + std::to_string(it->second.size()) + " |\n";
                    for (const auto& [name, s] : {std::pair{"sqrt_pehe", sp}, {"ate_error", sa}, {"att_error", st}}) {
                        if (s.n == 0) {
                            continue;
                        }
                        out.aggregate_csv += ds + "," + split + "," + kind + "," + mode + "," + name + "," +
                                             std::to_string(s.n) + "," + io::format_real(s.mean) + "," +
                                             io::format_real(s.sd) + "," + io::format_real(s.sem) + "\n";
                    }
                }
                auto c = grouped.find({ds, split, kind, "cgc"});
                auto u = grouped.find({ds, split, kind, "unconstrained"});
                if (c != grouped.end() && u != grouped.end()) {
                    std::vector<EvalReport> pc, pu;
                    for (const auto& [rep, m] : c->second) {
                        if (auto f = u->second.find(rep); f != u->second.end()) {
                            pc.push_back(m);
                            pu.push_back(f->second);
                        }
                    }
                    if (!pc.empty()) {
                        const auto r = ratio_report(pc, pu);
                        auto fmt = [](const std::optional<Real>& v) { return v ? fixed(*v) : std::string("undefined"); };
                        ratios += "| " + kind + " | " + fmt(r.sqrt_pehe) + " | " + fmt(r.ate_error) + " | " +
                                  fmt(r.att_error) + " | " + std::to_string(pc.size()) + " |\n";
                    }
                }
            }
            if (values.empty()) {
                continue;
            }
            md += "\n## " + ds + " (" + split + ")\n\n";
            md += "| Model | sqrt PEHE | ATE error | ATT error | n |\n|---|---|---|---|---|\n" + values;
            if (!ratios.empty()) {
                md += "\nConstrained / unconstrained (values < 1 favour CGC):\n\n";
                md += "| Model | sqrt PEHE | ATE error | ATT error | pairs |\n|---|---|---|---|---|\n" + ratios;
            }
        }
    }
    return out;
}

ReportTables report_directory(const fs::path& dir) {
    if (!fs::is_directory(dir)) {
        throw DataError("report: '" + dir.string() + "' is not a directory; run the 'evaluate' stage first");
    }
    std::vector<fs::path> files;
    for (const auto& e : fs::recursive_directory_iterator(dir)) {
        if (e.is_regular_file() && e.path().filename() == "raw_report.csv") {
            files.push_back(e.path());
        }
    }
    std::sort(files.begin(), files.end());
    std::vector<ResultRow> rows;
    for (const auto& f : files) {
        auto part = parse_raw_report(io::read_file(f), f.string());
        rows.insert(rows.end(), part.begin(), part.end());
    }
    if (rows.empty()) {
        throw DataError("report: no raw_report.csv rows under '" + dir.string() +
                        "'; run the 'evaluate' stage first");
    }
    auto tables = build_report(rows);
    io::write_file_atomic(dir / "summary.md", tables.markdown);
    io::write_file_atomic(dir / "aggregate.csv", tables.aggregate_csv);
    return tables;
}

} // namespace cgc
