#pragma once

#include "cgc/types.hpp"

#include <array>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace cgc {

/// Covariates, binary treatment and observed outcome, plus whatever ground
/// truth the source provides.
struct Dataset {
    Matrix x;
    Vector t;
    Vector y;
    std::optional<Vector> mu0;
    std::optional<Vector> mu1;
    std::optional<Vector> e_true;
    std::optional<Vector> exp_flag;
    std::vector<std::string> columns;

    Index size() const { return x.rows(); }
    Index dims() const { return x.cols(); }

    /// mu1 − mu0 when both are present.
    std::optional<Vector> true_ite() const;

    Dataset subset(std::span<const Index> rows) const;

    /// Throws DataError when lengths disagree or t is not binary.
    void validate() const;
};

enum class Scenario { A, B, C, D };

Scenario scenario_from_string(const std::string& s);
std::string to_string(Scenario s);

struct SyntheticConfig {
    Scenario scenario = Scenario::A;
    Index n = 1000;
    Index d = 6;
    Real sigma = 0.5;
    std::uint64_t seed = 0;
    // Seed of the outcome noise only; defaults to a stream derived from `seed`.
    std::optional<std::uint64_t> noise_seed;
    bool allow_off_grid = false;
};

struct SyntheticData {
    Dataset train;
    Dataset test;
};

/// Scenario A–D generators: y = b(x) + (t − ½)τ(x) + σε with t ~ Bernoulli(e(x)).
/// The test set has the same size as the training set.
SyntheticData generate(const SyntheticConfig& cfg);

/// Column names of a CSV file; an empty covariate list selects every column
/// not claimed by another role.
struct CsvSchema {
    std::vector<std::string> covariates;
    std::string t = "t";
    std::string y = "y";
    std::optional<std::string> mu0;
    std::optional<std::string> mu1;
    std::optional<std::string> e_true;
    std::optional<std::string> exp_flag;
};

Dataset parse_csv(const std::string& text, const CsvSchema& schema, const std::string& source = "csv");
Dataset load_csv(const std::string& path, const CsvSchema& schema);

/// Header `<covariates>,t,y[,mu0,mu1,e_true,exp]`, shortest round-trip reals.
std::string to_csv(const Dataset& ds);
void write_csv(const Dataset& ds, const std::string& path);

struct DataSplit {
    Dataset train;
    Dataset val;
    Dataset test;
    std::vector<Index> train_rows;
    std::vector<Index> val_rows;
    std::vector<Index> test_rows;
};

/// Validation and test sizes are floor(n·ratio); training takes the remainder.
std::array<Index, 3> split_sizes(Index n, const std::array<Real, 3>& ratios);

/// Uniform random partition into train/validation/test.
DataSplit split(const Dataset& ds, const std::array<Real, 3>& ratios, std::uint64_t seed);

} // namespace cgc
