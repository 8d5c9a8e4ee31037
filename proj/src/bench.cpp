#include "cgc/bench.hpp"

#include "cgc/io.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numbers>
#include <numeric>
#include <random>

namespace cgc {

std::optional<Vector> Dataset::true_ite() const {
    if (!mu0 || !mu1) {
        return std::nullopt;
    }
    return Vector(*mu1 - *mu0);
}

Dataset Dataset::subset(std::span<const Index> rows) const {
    auto pick = [&](const Vector& v) {
        Vector out(static_cast<Index>(rows.size()));
        for (std::size_t i = 0; i < rows.size(); ++i) {
            out(static_cast<Index>(i)) = v(rows[i]);
        }
        return out;
    };
    Dataset out;
    out.columns = columns;
    out.x.resize(static_cast<Index>(rows.size()), x.cols());
    for (std::size_t i = 0; i < rows.size(); ++i) {
        out.x.row(static_cast<Index>(i)) = x.row(rows[i]);
    }
    out.t = pick(t);
    out.y = pick(y);
    if (mu0) {
        out.mu0 = pick(*mu0);
    }
    if (mu1) {
        out.mu1 = pick(*mu1);
    }
    if (e_true) {
        out.e_true = pick(*e_true);
    }
    if (exp_flag) {
        out.exp_flag = pick(*exp_flag);
    }
    return out;
}

void Dataset::validate() const {
    const Index n = x.rows();
    auto check = [&](const Vector& v, const char* name) {
        if (v.size() != n) {
            throw DataError(std::string("column '") + name + "' has " + std::to_string(v.size()) + " rows, expected " +
                            std::to_string(n));
        }
    };
    check(t, "t");
    check(y, "y");
    if (mu0) {
        check(*mu0, "mu0");
    }
    if (mu1) {
        check(*mu1, "mu1");
    }
    if (e_true) {
        check(*e_true, "e_true");
    }
    if (exp_flag) {
        check(*exp_flag, "exp");
    }
    if (static_cast<Index>(columns.size()) != x.cols()) {
        throw DataError("dataset has " + std::to_string(columns.size()) + " column names for " +
                        std::to_string(x.cols()) + " covariates");
    }
    for (Index i = 0; i < n; ++i) {
        if (t(i) != 0.0 && t(i) != 1.0) {
            throw DataError("row " + std::to_string(i) + ": treatment must be 0 or 1");
        }
    }
}

Scenario scenario_from_string(const std::string& s) {
    if (s == "A" || s == "a") {
        return Scenario::A;
    }
    if (s == "B" || s == "b") {
        return Scenario::B;
    }
    if (s == "C" || s == "c") {
        return Scenario::C;
    }
    if (s == "D" || s == "d") {
        return Scenario::D;
    }
    throw ConfigError("unknown scenario '" + s + "' (expected A, B, C or D)");
}

std::string to_string(Scenario s) {
    return std::string(1, static_cast<char>('A' + static_cast<int>(s)));
}

namespace {

Real softplus(Real v) {
    return v > 0 ? v + std::log1p(std::exp(-v)) : std::log1p(std::exp(v));
}

struct Draw {
    Matrix x;
    Vector e, b, tau, t;
};

Draw draw_structure(Scenario sc, Index n, Index d, std::mt19937_64& rng) {
    std::uniform_real_distribution<Real> unif(0.0, 1.0);
    std::normal_distribution<Real> normal(0.0, 1.0);
    Draw out;
    out.x.resize(n, d);
    for (Index i = 0; i < n; ++i) {
        for (Index j = 0; j < d; ++j) {
            out.x(i, j) = sc == Scenario::A ? unif(rng) : normal(rng);
        }
    }
    out.e.resize(n);
    out.b.resize(n);
    out.tau.resize(n);
    const Real pi = std::numbers::pi;
    for (Index i = 0; i < n; ++i) {
        const auto x = out.x.row(i);
        switch (sc) {
        case Scenario::A:
            out.b(i) = std::sin(pi * x(0) * x(1)) + 2.0 * (x(2) - 0.5) * (x(2) - 0.5) + x(3) + 0.5 * x(4);
            out.e(i) = std::clamp(std::sin(pi * x(0) * x(1)), 0.1, 0.9);
            out.tau(i) = (x(0) + x(1)) / 2.0;
            break;
        case Scenario::B:
            out.b(i) = std::max({x(0) + x(1), x(2), 0.0}) + std::max(x(3) + x(4), 0.0);
            out.e(i) = 0.5;
            out.tau(i) = x(0) + softplus(x(1));
            break;
        case Scenario::C:
            out.b(i) = 2.0 * softplus(x(0) + x(1) + x(2));
            out.e(i) = 1.0 / (1.0 + std::exp(x(1) + x(2)));
            out.tau(i) = 1.0;
            break;
        case Scenario::D:
            out.b(i) = 0.5 * (std::max(x(0) + x(1) + x(2), 0.0) + std::max(x(3) + x(4), 0.0));
            out.e(i) = 1.0 / (1.0 + std::exp(-x(0)) + std::exp(-x(1)));
            out.tau(i) = std::max(x(0) + x(1) + x(2), 0.0) - std::max(x(3) + x(4), 0.0);
            break;
        }
    }
    out.t.resize(n);
    for (Index i = 0; i < n; ++i) {
        out.t(i) = unif(rng) < out.e(i) ? 1.0 : 0.0;
    }
    return out;
}

Dataset assemble(const Draw& s, Real sigma, std::mt19937_64& noise_rng) {
    std::normal_distribution<Real> normal(0.0, 1.0);
    const Index n = s.x.rows();
    Dataset ds;
    ds.x = s.x;
    ds.t = s.t;
    ds.mu0 = Vector(s.b - 0.5 * s.tau);
    ds.mu1 = Vector(s.b + 0.5 * s.tau);
    ds.e_true = s.e;
    ds.y.resize(n);
    for (Index i = 0; i < n; ++i) {
        const Real mu = s.t(i) == 1.0 ? (*ds.mu1)(i) : (*ds.mu0)(i);
        const Real eps = normal(noise_rng);
        ds.y(i) = sigma == 0.0 ? mu : mu + sigma * eps;
    }
    for (Index j = 0; j < s.x.cols(); ++j) {
        ds.columns.push_back("x" + std::to_string(j + 1));
    }
    return ds;
}

} // namespace

SyntheticData generate(const SyntheticConfig& cfg) {
    if (!cfg.allow_off_grid) {
        const bool ok = (cfg.n == 500 || cfg.n == 1000) && (cfg.d == 6 || cfg.d == 12) &&
                        (cfg.sigma == 0.5 || cfg.sigma == 1.0 || cfg.sigma == 2.0 || cfg.sigma == 4.0);
        if (!ok) {
            throw ConfigError("synthetic config outside the n∈{500,1000}, d∈{6,12}, σ∈{0.5,1,2,4} grid; "
                              "set allow_off_grid to override");
        }
    }
    if (cfg.d < 5) {
        throw ConfigError("synthetic scenarios need d >= 5");
    }
    if (cfg.n < 1 || !(cfg.sigma >= 0.0)) {
        throw ConfigError("synthetic config needs n >= 1 and sigma >= 0");
    }
    std::mt19937_64 structural(derive_seed(cfg.seed, 1));
    std::mt19937_64 noise(cfg.noise_seed ? *cfg.noise_seed : derive_seed(cfg.seed, 2));
    const auto train = draw_structure(cfg.scenario, cfg.n, cfg.d, structural);
    const auto test = draw_structure(cfg.scenario, cfg.n, cfg.d, structural);
    SyntheticData out;
    out.train = assemble(train, cfg.sigma, noise);
    out.test = assemble(test, cfg.sigma, noise);
    return out;
}

Dataset parse_csv(const std::string& text, const CsvSchema& schema, const std::string& source) {
    auto lines = io::split(text, '\n');
    while (!lines.empty() && io::trim(lines.back()).empty()) {
        lines.pop_back();
    }
    if (lines.empty()) {
        throw DataError(source + ": empty file");
    }
    auto header = io::split(lines.front(), ',');
    std::map<std::string, std::size_t> col;
    for (std::size_t j = 0; j < header.size(); ++j) {
        header[j] = std::string(io::trim(header[j]));
        if (header[j].size() >= 2 && header[j].front() == '"' && header[j].back() == '"') {
            header[j] = header[j].substr(1, header[j].size() - 2);
        }
        col.emplace(header[j], j);
    }
    auto locate = [&](const std::string& name) {
        auto it = col.find(name);
        if (it == col.end()) {
            throw DataError(source + ": missing column '" + name + "'");
        }
        return it->second;
    };
    const auto t_col = locate(schema.t);
    const auto y_col = locate(schema.y);
    std::optional<std::size_t> mu0_col, mu1_col, e_col, exp_col;
    if (schema.mu0) {
        mu0_col = locate(*schema.mu0);
    }
    if (schema.mu1) {
        mu1_col = locate(*schema.mu1);
    }
    if (schema.e_true) {
        e_col = locate(*schema.e_true);
    }
    if (schema.exp_flag) {
        exp_col = locate(*schema.exp_flag);
    }
    std::vector<std::string> covs = schema.covariates;
    if (covs.empty()) {
        for (const auto& h : header) {
            bool claimed = h == schema.t || h == schema.y || (schema.mu0 && h == *schema.mu0) ||
                           (schema.mu1 && h == *schema.mu1) || (schema.e_true && h == *schema.e_true) ||
                           (schema.exp_flag && h == *schema.exp_flag);
            if (!claimed) {
                covs.push_back(h);
            }
        }
    }
    std::vector<std::size_t> cov_cols;
    for (const auto& c : covs) {
        cov_cols.push_back(locate(c));
    }

    const Index n = static_cast<Index>(lines.size() - 1);
    Dataset ds;
    ds.columns = covs;
    ds.x.resize(n, static_cast<Index>(covs.size()));
    ds.t.resize(n);
    ds.y.resize(n);
    if (mu0_col) {
        ds.mu0 = Vector(n);
    }
    if (mu1_col) {
        ds.mu1 = Vector(n);
    }
    if (e_col) {
        ds.e_true = Vector(n);
    }
    if (exp_col) {
        ds.exp_flag = Vector(n);
    }
    for (Index i = 0; i < n; ++i) {
        const auto row_no = static_cast<std::size_t>(i) + 2; // 1-based, header is line 1
        auto cells = io::split(lines[static_cast<std::size_t>(i) + 1], ',');
        if (cells.size() != header.size()) {
            throw DataError(source + ": line " + std::to_string(row_no) + " has " + std::to_string(cells.size()) +
                            " cells, header has " + std::to_string(header.size()));
        }
        auto cell = [&](std::size_t j) {
            return io::parse_real(cells[j], source + ": line " + std::to_string(row_no) + ", column '" + header[j] + "'");
        };
        for (std::size_t j = 0; j < cov_cols.size(); ++j) {
            ds.x(i, static_cast<Index>(j)) = cell(cov_cols[j]);
        }
        ds.t(i) = cell(t_col);
        if (ds.t(i) != 0.0 && ds.t(i) != 1.0) {
            throw DataError(source + ": line " + std::to_string(row_no) + ", column '" + schema.t +
                            "': treatment must be 0 or 1, got '" + std::string(io::trim(cells[t_col])) + "'");
        }
        ds.y(i) = cell(y_col);
        if (mu0_col) {
            (*ds.mu0)(i) = cell(*mu0_col);
        }
        if (mu1_col) {
            (*ds.mu1)(i) = cell(*mu1_col);
        }
        if (e_col) {
            (*ds.e_true)(i) = cell(*e_col);
        }
        if (exp_col) {
            (*ds.exp_flag)(i) = cell(*exp_col);
            if ((*ds.exp_flag)(i) != 0.0 && (*ds.exp_flag)(i) != 1.0) {
                throw DataError(source + ": line " + std::to_string(row_no) + ", column '" + *schema.exp_flag +
                                "': experimental flag must be 0 or 1");
            }
        }
    }
    return ds;
}

Dataset load_csv(const std::string& path, const CsvSchema& schema) {
    return parse_csv(io::read_file(path), schema, path);
}

std::string to_csv(const Dataset& ds) {
    ds.validate();
    std::string out;
    for (const auto& c : ds.columns) {
        out += c + ",";
    }
    out += "t,y";
    if (ds.mu0) {
        out += ",mu0";
    }
    if (ds.mu1) {
        out += ",mu1";
    }
    if (ds.e_true) {
        out += ",e_true";
    }
    if (ds.exp_flag) {
        out += ",exp";
    }
    out += "\n";
    for (Index i = 0; i < ds.size(); ++i) {
        for (Index j = 0; j < ds.dims(); ++j) {
            out += io::format_real(ds.x(i, j)) + ",";
        }
        out += io::format_real(ds.t(i)) + "," + io::format_real(ds.y(i));
        for (const auto* v : {&ds.mu0, &ds.mu1, &ds.e_true, &ds.exp_flag}) {
            if (*v) {
                out += "," + io::format_real((**v)(i));
            }
        }
        out += "\n";
    }
    return out;
}

void write_csv(const Dataset& ds, const std::string& path) {
    io::write_file_atomic(path, to_csv(ds));
}

std::array<Index, 3> split_sizes(Index n, const std::array<Real, 3>& ratios) {
    for (auto r : ratios) {
        if (!(r > 0.0)) {
            throw ConfigError("split ratios must be positive");
        }
    }
    if (std::abs(ratios[0] + ratios[1] + ratios[2] - 1.0) > 1e-9) {
        throw ConfigError("split ratios must sum to 1");
    }
    // The small epsilon keeps ratios like 0.2·1000 from flooring to 199.
    const auto n_val = static_cast<Index>(std::floor(static_cast<Real>(n) * ratios[1] + 1e-9));
    const auto n_test = static_cast<Index>(std::floor(static_cast<Real>(n) * ratios[2] + 1e-9));
    const Index n_train = n - n_val - n_test;
    if (n_train < 1 || n_val < 1 || n_test < 1) {
        throw DataError("split of " + std::to_string(n) + " rows leaves an empty part (" + std::to_string(n_train) +
                        "/" + std::to_string(n_val) + "/" + std::to_string(n_test) + ")");
    }
    return {n_train, n_val, n_test};
}

DataSplit split(const Dataset& ds, const std::array<Real, 3>& ratios, std::uint64_t seed) {
    const auto sizes = split_sizes(ds.size(), ratios);
    std::vector<Index> perm(static_cast<std::size_t>(ds.size()));
    std::iota(perm.begin(), perm.end(), Index{0});
    std::mt19937_64 rng(seed);
    std::shuffle(perm.begin(), perm.end(), rng);
    DataSplit out;
    auto b = perm.begin();
    out.train_rows.assign(b, b + sizes[0]);
    out.val_rows.assign(b + sizes[0], b + sizes[0] + sizes[1]);
    out.test_rows.assign(b + sizes[0] + sizes[1], perm.end());
    for (auto* rows : {&out.train_rows, &out.val_rows, &out.test_rows}) {
        std::sort(rows->begin(), rows->end());
    }
    out.train = ds.subset(out.train_rows);
    out.val = ds.subset(out.val_rows);
    out.test = ds.subset(out.test_rows);
    return out;
}

} // namespace cgc
