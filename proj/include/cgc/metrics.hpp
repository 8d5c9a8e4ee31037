#pragma once

#include "cgc/bench.hpp"
#include "cgc/types.hpp"

#include <cmath>
#include <optional>
#include <span>
#include <string>

namespace cgc {

namespace detail {

template <typename A, typename B, typename C>
void check_lengths(const Eigen::DenseBase<A>& a, const Eigen::DenseBase<B>& b, const Eigen::DenseBase<C>& c) {
    if (a.size() != b.size() || a.size() != c.size()) {
        throw ShapeError("metric inputs have mismatched lengths (" + std::to_string(a.size()) + ", " +
                         std::to_string(b.size()) + ", " + std::to_string(c.size()) + ")");
    }
    if (a.size() == 0) {
        throw ShapeError("metric inputs are empty");
    }
}

} // namespace detail

/// Root mean squared error between predicted and true individual effects.
template <typename Ite, typename Mu1, typename Mu0>
typename Ite::Scalar sqrt_pehe(const Eigen::MatrixBase<Ite>& ite_hat, const Eigen::MatrixBase<Mu1>& mu1,
                               const Eigen::MatrixBase<Mu0>& mu0) {
    detail::check_lengths(ite_hat, mu1, mu0);
    return std::sqrt((ite_hat - (mu1 - mu0)).squaredNorm() / static_cast<typename Ite::Scalar>(ite_hat.size()));
}

template <typename Ite, typename Mu1, typename Mu0>
typename Ite::Scalar ate_error(const Eigen::MatrixBase<Ite>& ite_hat, const Eigen::MatrixBase<Mu1>& mu1,
                               const Eigen::MatrixBase<Mu0>& mu0) {
    detail::check_lengths(ite_hat, mu1, mu0);
    return std::abs(ite_hat.mean() - (mu1 - mu0).mean());
}

/// |ATT on the experimental subset − mean predicted effect over treated
/// experimental rows|. Requires an experimental flag and both arms.
Real att_error(const Dataset& ds, const Vector& ite_hat);

enum class SplitLabel { train, test };

std::string to_string(SplitLabel s);

struct EvalReport {
    Real sqrt_pehe = 0;
    Real ate_error = 0;
    std::optional<Real> att_error;
    Index n_eval = 0;
    SplitLabel split = SplitLabel::test;
};

/// Every metric the dataset supports: PEHE/ATE need mu0 and mu1, ATT needs
/// the experimental flag. Missing ground truth leaves the metric at NaN.
EvalReport evaluate(const Dataset& ds, const Vector& ite_hat, SplitLabel split);

/// Constrained-over-unconstrained ratio of mean metric values; nullopt when
/// the denominator is zero or the metric is unavailable.
struct RatioReport {
    std::optional<Real> sqrt_pehe;
    std::optional<Real> ate_error;
    std::optional<Real> att_error;
};

RatioReport ratio_report(std::span<const EvalReport> constrained, std::span<const EvalReport> unconstrained);

struct Summary {
    Real mean = 0;
    Real sd = 0;  // sample standard deviation
    Real sem = 0; // sd / sqrt(n)
    Index n = 0;
};

Summary summarize(std::span<const Real> values);

} // namespace cgc
