#include "cgc/experiment.hpp"
#include "cgc/io.hpp"

#include "doctest.h"
#include "testlib.hpp"

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>

#include <sys/wait.h>

using namespace cgc;
namespace fs = std::filesystem;

namespace {

// Small nets and few epochs keep a full pipeline run to a few seconds.
nlohmann::json tiny_config(const fs::path& out, int reps = 2) {
    return {{"dataset", {{"synthetic", {{"scenario", "C"}, {"n", 500}, {"d", 6}, {"sigma", 0.5}}}}},
            {"graph", {{"source", "file"}, {"path", std::string(SOURCE_DIR) + "/data/graphs/scenario_C.graph"}}},
            {"models", {{{"kind", "tarnet"}, {"mode", "cgc"}}, {{"kind", "tarnet"}, {"mode", "unconstrained"}}}},
            {"replications", reps},
            {"seed", 3},
            {"output", out.string()},
            {"hyperparameters",
             {{"all",
               {{"trunk_width", 8},
                {"trunk_depth", 1},
                {"head_width", 4},
                {"head_depth", 1},
                {"max_epochs", 5},
                {"learning_rate", 1e-3}}}}}};
}

std::string slurp(const fs::path& p) {
    return io::read_file(p);
}

int count_lines(const std::string& text) {
    int n = 0;
    std::istringstream in(text);
    for (std::string line; std::getline(in, line);) {
        n += !line.empty();
    }
    return n;
}

int run_cli(const std::string& args) {
    const std::string cmd = std::string(NNCGC_BINARY) + " " + args + " > /dev/null 2>&1";
    const int status = std::system(cmd.c_str());
    return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

fs::path write_json(const fs::path& p, const nlohmann::json& j) {
    fs::create_directories(p.parent_path());
    std::ofstream(p) << j.dump(2) << "\n";
    return p;
}

} // namespace

TEST_CASE("config parsing") {
    const auto dir = testlib::scratch_dir("exp_config");
    SUBCASE("defaults and overrides") {
        const auto cfg = parse_config(tiny_config(dir / "out"), dir);
        CHECK(cfg.dataset_label == "scenario_C");
        CHECK(cfg.models.size() == 2);
        CHECK(cfg.graph_source == GraphSource::file);
        const auto spec = cfg.spec_for(cfg.models[0], 1);
        CHECK(spec.trunk_width == 8);
        CHECK(spec.learning_rate == 1e-3);
        CHECK(spec.seed != cfg.spec_for(cfg.models[0], 0).seed);
        CHECK(spec.seed == cfg.spec_for(cfg.models[1], 1).seed);
    }
    SUBCASE("unknown keys are named") {
        auto j = tiny_config(dir / "out");
        j["graph"]["prune"] = 0.2;
        try {
            parse_config(j, dir);
            FAIL("expected a config error");
        } catch (const ConfigError& e) {
            CHECK(std::string(e.what()).find("graph.prune") != std::string::npos);
        }
    }
    SUBCASE("syntax errors carry a line number") {
        const auto p = dir / "bad.json";
        std::ofstream(p) << "{\n  \"models\": [\n    {\"kind\": \"tarnet\",}\n  ]\n}\n";
        try {
            load_config(p);
            FAIL("expected a config error");
        } catch (const ConfigError& e) {
            CHECK(std::string(e.what()).find("line 3") != std::string::npos);
        }
    }
    SUBCASE("invalid values") {
        auto j = tiny_config(dir / "out");
        j["models"] = nlohmann::json::array();
        CHECK_THROWS_AS(parse_config(j, dir), ConfigError);
        j = tiny_config(dir / "out");
        j["replications"] = 0;
        CHECK_THROWS_AS(parse_config(j, dir), ConfigError);
        j = tiny_config(dir / "out");
        j["graph"].erase("path");
        CHECK_THROWS_AS(parse_config(j, dir), ConfigError);
    }
}

TEST_CASE("pipeline") {
    const auto dir = testlib::scratch_dir("exp_pipeline");
    const auto cfg = parse_config(tiny_config(dir / "a", 5), dir);
    Experiment exp(cfg);
    const auto result = exp.run();

    SUBCASE("one row per replication, model and split") {
        CHECK(result.failures.empty());
        CHECK(result.rows.size() == 5 * 2 * 2);
        int models = 0;
        for (const auto& e : fs::recursive_directory_iterator(dir / "a" / "models")) {
            models += e.path().extension() == ".bin";
        }
        CHECK(models == 10);
        CHECK(count_lines(slurp(exp.raw_report_file())) == 1 + 20);
        CHECK(parse_raw_report(slurp(exp.raw_report_file())).size() == 20);
        for (const auto& row : result.rows) {
            CHECK(std::isfinite(row.metrics.sqrt_pehe));
        }
        CHECK(fs::exists(dir / "a" / "summary.md"));
        CHECK(fs::exists(dir / "a" / "aggregate.csv"));
    }
    SUBCASE("a graph file skips discovery") {
        const auto log = slurp(exp.log_file());
        CHECK(log.find("discovery invoked") == std::string::npos);
        CHECK(log.find("graph read from") != std::string::npos);
        const auto groups = nlohmann::json::parse(slurp(exp.grouping_file(0)));
        CHECK(groups["source"] == "file");
    }
    SUBCASE("constrained and unconstrained rows share their splits") {
        for (const auto& row : result.rows) {
            CHECK(row.metrics.n_eval == (row.split == SplitLabel::train ? 400 : 500));
        }
    }
    SUBCASE("same config and seed give byte-identical reports") {
        auto again = cfg;
        again.output_dir = dir / "b";
        Experiment(again).run();
        CHECK(slurp(dir / "b" / "raw_report.csv") == slurp(exp.raw_report_file()));
    }
    SUBCASE("running the stages one by one matches run()") {
        auto staged = cfg;
        staged.output_dir = dir / "c";
        Experiment e(staged);
        e.generate();
        e.discover();
        e.train();
        e.evaluate();
        e.report();
        CHECK(slurp(dir / "c" / "raw_report.csv") == slurp(exp.raw_report_file()));
        CHECK(slurp(dir / "c" / "summary.md") == slurp(dir / "a" / "summary.md"));
    }
    SUBCASE("resume keeps finished models") {
        auto resumed = cfg;
        resumed.resume = true;
        const auto before = fs::last_write_time(exp.model_file(0, cfg.models[0]));
        Experiment(resumed).train();
        CHECK(fs::last_write_time(exp.model_file(0, cfg.models[0])) == before);
    }
}

TEST_CASE("stage inputs") {
    const auto dir = testlib::scratch_dir("exp_stages");
    SUBCASE("a missing input names the stage that produces it") {
        Experiment e(parse_config(tiny_config(dir / "fresh"), dir));
        e.train();
        CHECK(slurp(e.log_file()).find("run the 'generate' stage first") != std::string::npos);
        const auto r = e.evaluate();
        CHECK(r.rows.empty());
        CHECK(r.failures.size() == 2);
    }
    SUBCASE("report on an empty directory fails") {
        fs::create_directories(dir / "empty");
        try {
            report_directory(dir / "empty");
            FAIL("expected an error");
        } catch (const DataError& e) {
            CHECK(std::string(e.what()).find("evaluate") != std::string::npos);
        }
    }
    SUBCASE("discovery falls back to a full grouping on Gaussian data") {
        auto j = tiny_config(dir / "disc", 1);
        j["graph"] = {{"source", "discover"}};
        Experiment e(parse_config(j, dir));
        e.generate();
        e.discover();
        const auto groups = nlohmann::json::parse(slurp(e.grouping_file(0)));
        CHECK(groups["source"].get<std::string>().rfind("fallback", 0) == 0);
        CHECK(slurp(e.log_file()).find("discovery invoked") != std::string::npos);
    }
}

TEST_CASE("report tables") {
    std::vector<ResultRow> rows;
    for (int rep = 0; rep < 2; ++rep) {
        for (const char* mode : {"cgc", "unconstrained"}) {
            ResultRow r;
            r.model = "bcauss";
            r.mode = mode;
            r.dataset = "ihdp";
            r.replication = rep;
            r.metrics.sqrt_pehe = std::string(mode) == "cgc" ? 0.741 : 0.962;
            r.metrics.ate_error = 0.1;
            rows.push_back(r);
        }
    }
    const auto tables = build_report(rows);
    CHECK(tables.markdown.find("0.770") != std::string::npos);
    CHECK(tables.aggregate_csv.rfind("dataset,split,model,mode,metric,n,mean,sd,sem", 0) == 0);
    const auto line = to_csv_line(rows[0]);
    const auto back = parse_raw_report(raw_report_header() + "\n" + line + "\n");
    REQUIRE(back.size() == 1);
    CHECK(to_csv_line(back[0]) == line);
}

TEST_CASE("command line") {
    const auto dir = testlib::scratch_dir("exp_cli");
    const auto good = write_json(dir / "good.json", tiny_config(dir / "out", 1));
    CHECK(run_cli("run --config " + good.string()) == 0);
    CHECK(fs::exists(dir / "out" / "raw_report.csv"));
    CHECK(run_cli("report --out " + (dir / "out").string()) == 0);
    CHECK(run_cli("report --out " + (dir / "nothing").string()) == 1);

    auto bad = tiny_config(dir / "bad_out", 1);
    bad["unexpected"] = 1;
    CHECK(run_cli("run --config " + write_json(dir / "bad.json", bad).string()) == 2);

    auto diverge = tiny_config(dir / "div_out", 1);
    diverge["hyperparameters"]["all"]["learning_rate"] = 1e12;
    CHECK(run_cli("run --config " + write_json(dir / "div.json", diverge).string()) == 3);

    SUBCASE("standalone discovery writes a mode graph") {
        // Jobs-style file: non-Gaussian covariates, an experimental flag column.
        std::mt19937_64 rng(9);
        std::uniform_real_distribution<Real> u(-1, 1);
        std::string text = "x1,x2,x3,t,y,exp\n";
        for (int i = 0; i < 1500; ++i) {
            const Real x1 = u(rng), x2 = 1.5 * x1 + u(rng), x3 = u(rng);
            const int t = x2 + 0.5 * u(rng) > 0 ? 1 : 0;
            const Real y = 2 * t + 1.2 * x2 + x3 + u(rng);
            text += std::to_string(x1) + "," + std::to_string(x2) + "," + std::to_string(x3) + "," +
                    std::to_string(t) + "," + std::to_string(y) + "," + (i < 600 ? "1" : "0") + "\n";
        }
        std::ofstream(dir / "jobs.csv") << text;
        const auto out = dir / "mode.graph";
        CHECK(run_cli("discover --input " + (dir / "jobs.csv").string() + " --runs 5 --graph-out " + out.string()) ==
              0);
        REQUIRE(fs::exists(out));
        const auto g = read_graph(out.string());
        CHECK(g.treatment() == "t");
        CHECK(g.outcome() == "y");
    }
}
