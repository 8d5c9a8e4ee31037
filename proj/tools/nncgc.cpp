// nncgc: configuration-driven runner for the constrained/unconstrained
// treatment-effect comparison. Exit codes: 0 ok, 1 error, 2 bad config,
// 3 every replication failed.
#include "cgc/experiment.hpp"

#include "CLI11.hpp"

#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>

namespace {

struct Common {
    std::string config;
    std::optional<int> jobs;
    std::optional<std::uint64_t> seed;
    std::string out;
};

void add_common(CLI::App* cmd, Common& c, bool config_required = true) {
    auto* opt = cmd->add_option("--config", c.config, "experiment config (JSON)");
    if (config_required) {
        opt->required();
    }
    cmd->add_option("--jobs", c.jobs, "replications trained in parallel")->check(CLI::PositiveNumber);
    cmd->add_option("--seed", c.seed, "master seed (overrides the config)");
    cmd->add_option("--out", c.out, "output directory (overrides the config)");
}

cgc::Experiment make_experiment(const Common& c) {
    auto cfg = cgc::load_config(c.config);
    if (c.jobs) {
        cfg.jobs = *c.jobs;
    }
    if (c.seed) {
        cfg.seed = *c.seed;
    }
    if (!c.out.empty()) {
        cfg.output_dir = c.out;
    }
    return cgc::Experiment(std::move(cfg));
}

int finish(const cgc::ExperimentResult& r) {
    for (const auto& f : r.failures) {
        std::cerr << "failed: " << f << "\n";
    }
    if (r.rows.empty() && !r.failures.empty()) {
        std::cerr << "error: every replication failed\n";
        return 3;
    }
    return 0;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"Causal-graph-constrained treatment effect estimation"};
    app.require_subcommand(1);

    Common common;
    auto* gen = app.add_subcommand("generate", "write per-replication train/val/test splits");
    auto* disc = app.add_subcommand("discover", "discover graphs and build variable groups");
    auto* trn = app.add_subcommand("train", "train every configured model");
    auto* ev = app.add_subcommand("evaluate", "score predictions and write the raw report");
    auto* rep = app.add_subcommand("report", "aggregate raw reports into summary tables");
    auto* run = app.add_subcommand("run", "all stages in order");
    for (auto* cmd : {gen, trn, ev, run}) {
        add_common(cmd, common);
    }
    add_common(disc, common, false);

    // Standalone discovery on one CSV: repeated splits, mode graph written out.
    std::string input;
    int runs = 10;
    std::string graph_out = "mode.graph";
    double prune = 0.1;
    disc->add_option("--input", input, "CSV with covariates, t and y (standalone mode)");
    disc->add_option("--runs", runs, "discovery repetitions in standalone mode")->check(CLI::PositiveNumber);
    disc->add_option("--graph-out", graph_out, "where the mode graph is written in standalone mode");
    disc->add_option("--prune", prune, "pruning threshold in standalone mode");
    std::string exp_column = "exp";
    disc->add_option("--exp-column", exp_column, "experimental-flag column excluded from discovery");

    std::string report_dir;
    rep->add_option("--out", report_dir, "directory holding raw_report.csv files");
    rep->add_option("--config", common.config, "take the output directory from this config");

    CLI11_PARSE(app, argc, argv);

    try {
        if (*disc && !input.empty()) {
            // A Jobs-style experimental flag column is not a covariate.
            cgc::CsvSchema schema;
            std::ifstream head(input);
            std::string header;
            std::getline(head, header);
            std::stringstream cols(header);
            for (std::string c; std::getline(cols, c, ',');) {
                if (c == exp_column) {
                    schema.exp_flag = exp_column;
                }
            }
            const auto ds = cgc::load_csv(input, schema);
            const auto summary =
                cgc::discover_repeated(ds, {0.7, 0.2, 0.1}, runs, common.seed.value_or(0), prune);
            int ok = 0;
            for (const auto& r : summary.runs) {
                ok += std::holds_alternative<cgc::CausalGraph>(r) ? 1 : 0;
            }
            std::cout << ok << "/" << runs << " discovery runs succeeded\n";
            if (!summary.mode) {
                std::cerr << "error: discovery failed on every run\n";
                return 3;
            }
            cgc::write_graph(*summary.mode, graph_out);
            std::cout << "mode graph written to " << graph_out << "\n";
            return 0;
        }
        if (*disc && common.config.empty()) {
            std::cerr << "error: discover needs --config or --input\n";
            return 2;
        }
        if (*rep) {
            std::filesystem::path dir = report_dir;
            if (dir.empty()) {
                if (common.config.empty()) {
                    std::cerr << "error: report needs --out or --config\n";
                    return 2;
                }
                dir = cgc::load_config(common.config).output_dir;
            }
            const auto tables = cgc::report_directory(dir);
            std::cout << tables.markdown;
            return 0;
        }

        auto exp = make_experiment(common);
        if (*gen) {
            exp.generate();
        } else if (*disc) {
            exp.discover();
        } else if (*trn) {
            exp.train();
        } else if (*ev) {
            return finish(exp.evaluate());
        } else if (*run) {
            const int code = finish(exp.run());
            if (code == 0) {
                std::cout << "results in " << exp.config().output_dir.string() << "\n";
            }
            return code;
        }
        return 0;
    } catch (const cgc::ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
}
