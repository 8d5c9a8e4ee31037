#include "cgc/metrics.hpp"

#include <limits>
#include <vector>

namespace cgc {

Real att_error(const Dataset& ds, const Vector& ite_hat) {
    if (!ds.exp_flag) {
        throw DataError("att_error needs an experimental-sample flag");
    }
    if (ite_hat.size() != ds.size()) {
        throw ShapeError("att_error: " + std::to_string(ite_hat.size()) + " predictions for " +
                         std::to_string(ds.size()) + " rows");
    }
    Real y1 = 0, y0 = 0, pred = 0;
    Index n1 = 0, n0 = 0;
    for (Index i = 0; i < ds.size(); ++i) {
        if ((*ds.exp_flag)(i) != 1.0) {
            continue;
        }
        if (ds.t(i) == 1.0) {
            y1 += ds.y(i);
            pred += ite_hat(i);
            ++n1;
        } else {
            y0 += ds.y(i);
            ++n0;
        }
    }
    if (n1 == 0 || n0 == 0) {
        throw DataError("att_error: experimental subset lacks a treated or a control row");
    }
    const Real att_true = y1 / static_cast<Real>(n1) - y0 / static_cast<Real>(n0);
    const Real att_hat = pred / static_cast<Real>(n1);
    return std::abs(att_true - att_hat);
}

std::string to_string(SplitLabel s) {
    return s == SplitLabel::train ? "train" : "test";
}

EvalReport evaluate(const Dataset& ds, const Vector& ite_hat, SplitLabel split) {
    EvalReport r;
    r.split = split;
    r.n_eval = ds.size();
    const Real nan = std::numeric_limits<Real>::quiet_NaN();
    if (ds.mu0 && ds.mu1) {
        r.sqrt_pehe = sqrt_pehe(ite_hat, *ds.mu1, *ds.mu0);
        r.ate_error = ate_error(ite_hat, *ds.mu1, *ds.mu0);
    } else {
        r.sqrt_pehe = nan;
        r.ate_error = nan;
    }
    if (ds.exp_flag) {
        r.att_error = att_error(ds, ite_hat);
    }
    return r;
}

namespace {

std::optional<Real> ratio_of_means(std::span<const EvalReport> a, std::span<const EvalReport> b,
                                   std::optional<Real> (*get)(const EvalReport&)) {
    Real sa = 0, sb = 0;
    for (const auto& r : a) {
        auto v = get(r);
        if (!v || std::isnan(*v)) {
            return std::nullopt;
        }
        sa += *v;
    }
    for (const auto& r : b) {
        auto v = get(r);
        if (!v || std::isnan(*v)) {
            return std::nullopt;
        }
        sb += *v;
    }
    const Real ma = sa / static_cast<Real>(a.size());
    const Real mb = sb / static_cast<Real>(b.size());
    if (mb == 0.0) {
        return std::nullopt;
    }
    return ma / mb;
}

} // namespace

RatioReport ratio_report(std::span<const EvalReport> constrained, std::span<const EvalReport> unconstrained) {
    if (constrained.empty() || unconstrained.empty()) {
        throw DataError("ratio_report needs non-empty report lists");
    }
    RatioReport out;
    out.sqrt_pehe = ratio_of_means(constrained, unconstrained,
                                   [](const EvalReport& r) -> std::optional<Real> { return r.sqrt_pehe; });
    out.ate_error = ratio_of_means(constrained, unconstrained,
                                   [](const EvalReport& r) -> std::optional<Real> { return r.ate_error; });
    out.att_error = ratio_of_means(constrained, unconstrained,
                                   [](const EvalReport& r) -> std::optional<Real> { return r.att_error; });
    return out;
}

Summary summarize(std::span<const Real> values) {
    Summary s;
    s.n = static_cast<Index>(values.size());
    if (values.empty()) {
        s.mean = s.sd = s.sem = std::numeric_limits<Real>::quiet_NaN();
        return s;
    }
    for (auto v : values) {
        s.mean += v;
    }
    s.mean /= static_cast<Real>(s.n);
    if (s.n > 1) {
        Real ss = 0;
        for (auto v : values) {
            ss += (v - s.mean) * (v - s.mean);
        }
        s.sd = std::sqrt(ss / static_cast<Real>(s.n - 1));
        s.sem = s.sd / std::sqrt(static_cast<Real>(s.n));
    }
    return s;
}

} // namespace cgc
