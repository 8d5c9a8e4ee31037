#pragma once

#include "cgc/graph.hpp"
#include "cgc/types.hpp"

#include <cstdint>
#include <string>
#include <variant>
#include <vector>

namespace cgc {

/// Result of deflation FastICA on standardized data.
struct MixingEstimate {
    Matrix rotation;  // k×k, orthonormal rows, acts on whitened data
    Matrix whitening; // k×k, maps standardized data to whitened data
    bool converged = false;
    int iterations = 0; // largest iteration count over components

    /// Full unmixing matrix for standardized data: rotation · whitening.
    Matrix unmixing() const { return rotation * whitening; }
};

struct IcaOptions {
    Real tol = 1e-6;
    int max_iter = 500;
    std::uint64_t seed = 0;
};

/// Deflation-based fixed-point ICA with a tanh contrast. `names` is used only
/// to label the offending column in rank errors.
MixingEstimate fast_ica(const Matrix& data, const IcaOptions& options,
                        const std::vector<std::string>& names = {});

/// Rescales every column to mean 0 and unit variance.
Matrix standardize_columns(const Matrix& data);

/// Minimum-cost perfect assignment on a square cost matrix; result[row] = col.
std::vector<Index> hungarian(const Matrix& cost);

/// Strictly lower-triangular arrangement of the LiNGAM coefficient matrix.
struct LingamEstimate {
    Matrix coefficients;        // b(i, j) != 0 means j -> i (standardized scale)
    std::vector<Index> order;   // causal order, roots first
    bool converged = false;
};

/// Raw ICA-LiNGAM estimate. Order search is exhaustive up to
/// `exhaustive_limit` variables and greedy beyond that.
LingamEstimate estimate_lingam(const Matrix& data, Real prune_threshold, std::uint64_t seed,
                               const std::vector<std::string>& names = {}, int exhaustive_limit = 8);

struct DiscoveryFailure {
    std::string reason;
};

using DiscoveryResult = std::variant<CausalGraph, DiscoveryFailure>;

/// ICA-LiNGAM discovery followed by reorientation of edges into the outcome.
/// ICA non-convergence is reported as a DiscoveryFailure value.
DiscoveryResult ica_lingam(const Matrix& data, const std::vector<std::string>& names, const std::string& treatment,
                           const std::string& outcome, Real prune_threshold, std::uint64_t seed);

} // namespace cgc
