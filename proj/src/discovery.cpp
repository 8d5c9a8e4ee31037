#include "cgc/discovery.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <random>

namespace cgc {

namespace {

std::string column_label(const std::vector<std::string>& names, Index j) {
    if (static_cast<std::size_t>(j) < names.size()) {
        return "'" + names[static_cast<std::size_t>(j)] + "'";
    }
    return std::to_string(j);
}

// Cholesky of the correlation matrix in column order; a vanishing pivot means
// column j is a linear combination of the columns before it.
void check_full_rank(const Matrix& corr, const std::vector<std::string>& names) {
    const Index k = corr.rows();
    Matrix l = Matrix::Zero(k, k);
    for (Index j = 0; j < k; ++j) {
        Real d = corr(j, j) - l.row(j).head(j).squaredNorm();
        if (d < 1e-10) {
            throw DataError("rank-deficient covariance: column " + column_label(names, j) +
                            " is linearly dependent on earlier columns");
        }
        l(j, j) = std::sqrt(d);
        for (Index i = j + 1; i < k; ++i) {
            l(i, j) = (corr(i, j) - l.row(i).head(j).dot(l.row(j).head(j))) / l(j, j);
        }
    }
}

} // namespace

Matrix standardize_columns(const Matrix& data) {
    Matrix z = data.rowwise() - data.colwise().mean();
    for (Index j = 0; j < z.cols(); ++j) {
        Real sd = std::sqrt(z.col(j).squaredNorm() / static_cast<Real>(z.rows()));
        if (sd > 0) {
            z.col(j) /= sd;
        }
    }
    return z;
}

MixingEstimate fast_ica(const Matrix& data, const IcaOptions& options, const std::vector<std::string>& names) {
    const Index n = data.rows();
    const Index k = data.cols();
    if (k < 2 || n <= k) {
        throw DataError("fast_ica needs n > k >= 2, got n=" + std::to_string(n) + ", k=" + std::to_string(k));
    }
    if (!data.allFinite()) {
        throw DataError("fast_ica input contains non-finite values");
    }
    const RowVector mean = data.colwise().mean();
    for (Index j = 0; j < k; ++j) {
        Real var = (data.col(j).array() - mean(j)).square().sum() / static_cast<Real>(n);
        if (!(var > 1e-24 * std::max<Real>(1.0, mean(j) * mean(j)))) {
            throw DataError("rank-deficient covariance: column " + column_label(names, j) + " has zero variance");
        }
    }
    const Matrix z = standardize_columns(data);
    const Matrix corr = (z.transpose() * z) / static_cast<Real>(n);
    check_full_rank(corr, names);

    Eigen::SelfAdjointEigenSolver<Matrix> eig(corr);
    const Vector inv_sqrt = eig.eigenvalues().array().rsqrt();
    MixingEstimate est;
    est.whitening = inv_sqrt.asDiagonal() * eig.eigenvectors().transpose();
    const Matrix white = z * est.whitening.transpose();

    std::mt19937_64 rng(options.seed);
    std::normal_distribution<Real> normal(0.0, 1.0);
    est.rotation = Matrix::Zero(k, k);
    est.converged = true;
    for (Index p = 0; p < k; ++p) {
        Vector w(k);
        for (Index i = 0; i < k; ++i) {
            w(i) = normal(rng);
        }
        w.normalize();
        bool done = false;
        int it = 0;
        while (it < options.max_iter) {
            ++it;
            const Vector u = white * w;
            const Vector g = u.array().tanh().matrix();
            const Real g_prime = (1.0 - g.array().square()).mean();
            Vector next = white.transpose() * g / static_cast<Real>(n) - g_prime * w;
            for (Index q = 0; q < p; ++q) {
                next -= next.dot(est.rotation.row(q).transpose()) * est.rotation.row(q).transpose();
            }
            next.normalize();
            const Real lim = std::abs(std::abs(next.dot(w)) - 1.0);
            w = next;
            if (lim < options.tol) {
                done = true;
                break;
            }
        }
        est.iterations = std::max(est.iterations, it);
        est.converged = est.converged && done;
        est.rotation.row(p) = w.transpose();
    }
    return est;
}

std::vector<Index> hungarian(const Matrix& cost) {
    const Index n = cost.rows();
    if (cost.cols() != n) {
        throw ShapeError("hungarian needs a square cost matrix");
    }
    const Real inf = std::numeric_limits<Real>::infinity();
    // 1-based potentials formulation; way[] tracks the augmenting path.
    std::vector<Real> u(n + 1, 0), v(n + 1, 0);
    std::vector<Index> p(n + 1, 0), way(n + 1, 0);
    for (Index i = 1; i <= n; ++i) {
        p[0] = i;
        Index j0 = 0;
        std::vector<Real> minv(n + 1, inf);
        std::vector<bool> used(n + 1, false);
        do {
            used[j0] = true;
            Index i0 = p[j0], j1 = 0;
            Real delta = inf;
            for (Index j = 1; j <= n; ++j) {
                if (used[j]) {
                    continue;
                }
                Real cur = cost(i0 - 1, j - 1) - u[i0] - v[j];
                if (cur < minv[j]) {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if (minv[j] < delta) {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for (Index j = 0; j <= n; ++j) {
                if (used[j]) {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
        } while (p[j0] != 0);
        do {
            Index j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
        } while (j0 != 0);
    }
    std::vector<Index> assignment(n, 0);
    for (Index j = 1; j <= n; ++j) {
        assignment[p[j] - 1] = j - 1;
    }
    return assignment;
}

namespace {

Real upper_mass(const Matrix& b, const std::vector<Index>& order) {
    Real s = 0;
    for (std::size_t a = 0; a < order.size(); ++a) {
        for (std::size_t c = a + 1; c < order.size(); ++c) {
            s += b(order[a], order[c]) * b(order[a], order[c]);
        }
    }
    return s;
}

std::vector<Index> causal_order(const Matrix& b, int exhaustive_limit) {
    const Index k = b.rows();
    std::vector<Index> order(k);
    std::iota(order.begin(), order.end(), Index{0});
    if (k <= exhaustive_limit) {
        auto best = order;
        Real best_mass = upper_mass(b, order);
        while (std::next_permutation(order.begin(), order.end())) {
            Real m = upper_mass(b, order);
            if (m < best_mass) {
                best_mass = m;
                best = order;
            }
        }
        return best;
    }
    // Greedy: the next node is the one whose row has the least weight on the
    // nodes not yet placed, i.e. the most exogenous among the remainder.
    std::vector<Index> remaining = order;
    order.clear();
    while (!remaining.empty()) {
        std::size_t pick = 0;
        Real pick_mass = std::numeric_limits<Real>::infinity();
        for (std::size_t a = 0; a < remaining.size(); ++a) {
            Real m = 0;
            for (auto j : remaining) {
                if (j != remaining[a]) {
                    m += b(remaining[a], j) * b(remaining[a], j);
                }
            }
            if (m < pick_mass) {
                pick_mass = m;
                pick = a;
            }
        }
        order.push_back(remaining[pick]);
        remaining.erase(remaining.begin() + static_cast<std::ptrdiff_t>(pick));
    }
    return order;
}

} // namespace

LingamEstimate estimate_lingam(const Matrix& data, Real prune_threshold, std::uint64_t seed,
                               const std::vector<std::string>& names, int exhaustive_limit) {
    IcaOptions opts;
    opts.seed = seed;
    const auto mix = fast_ica(data, opts, names);
    const Matrix w = mix.unmixing();
    const Index k = w.rows();

    Matrix cost(k, k);
    for (Index i = 0; i < k; ++i) {
        for (Index j = 0; j < k; ++j) {
            cost(i, j) = -std::log(std::max(std::abs(w(i, j)), 1e-300));
        }
    }
    const auto assign = hungarian(cost);
    Matrix permuted(k, k);
    for (Index i = 0; i < k; ++i) {
        permuted.row(assign[static_cast<std::size_t>(i)]) = w.row(i);
    }
    for (Index i = 0; i < k; ++i) {
        permuted.row(i) /= permuted(i, i);
    }
    Matrix b = Matrix::Identity(k, k) - permuted;

    LingamEstimate est;
    est.converged = mix.converged;
    est.order = causal_order(b, exhaustive_limit);
    std::vector<Index> position(k);
    for (Index a = 0; a < k; ++a) {
        position[est.order[a]] = a;
    }
    for (Index i = 0; i < k; ++i) {
        for (Index j = 0; j < k; ++j) {
            if (position[j] >= position[i] || std::abs(b(i, j)) < prune_threshold) {
                b(i, j) = 0;
            }
        }
    }
    est.coefficients = std::move(b);
    return est;
}

DiscoveryResult ica_lingam(const Matrix& data, const std::vector<std::string>& names, const std::string& treatment,
                           const std::string& outcome, Real prune_threshold, std::uint64_t seed) {
    if (names.size() != static_cast<std::size_t>(data.cols())) {
        throw ShapeError("ica_lingam: " + std::to_string(names.size()) + " names for " +
                         std::to_string(data.cols()) + " columns");
    }
    const auto est = estimate_lingam(data, prune_threshold, seed, names);
    if (!est.converged) {
        return DiscoveryFailure{"ICA did not converge within the iteration limit"};
    }
    EdgeSet edges;
    const Index k = est.coefficients.rows();
    for (Index i = 0; i < k; ++i) {
        for (Index j = 0; j < k; ++j) {
            if (est.coefficients(i, j) != 0) {
                edges.emplace(names[static_cast<std::size_t>(j)], names[static_cast<std::size_t>(i)]);
            }
        }
    }
    return normalize_discovered(names, edges, treatment, outcome);
}

} // namespace cgc
