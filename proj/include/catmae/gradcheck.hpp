#pragma once

#include <cmath>
#include <functional>
#include <limits>
#include <string>
#include <utility>
#include <vector>

#include "catmae/error.hpp"
#include "catmae/tensor.hpp"

namespace catmae {

struct GradCheckResult {
    double max_rel_err = 0.0;
    std::string worst_param;
    std::int64_t worst_index = -1;
    double worst_analytic = 0.0;
    double worst_numeric = 0.0;

    bool passes(double tol) const { return max_rel_err < tol; }
};

// Compares reverse-mode gradients against central finite differences for a
// deterministic scalar function of the given (named) parameters. The function
// must rebuild its graph on every call and read parameter values live, so
// in-place nudges of param.data() are observed.
inline double grad_rel_err(double analytic, double numeric) {
    return std::abs(analytic - numeric) /
           std::max(1e-8, std::abs(analytic) + std::abs(numeric));
}

namespace detail {

template <typename T, typename F>
T central_diff(F&& f, T* slot, T h) {
    const T saved = *slot;
    *slot = saved + h;
    const T fp = f().item();
    *slot = saved - h;
    const T fm = f().item();
    *slot = saved;
    if (!std::isfinite(static_cast<double>(fp)) || !std::isfinite(static_cast<double>(fm)))
        throw NumericError("grad_check: non-finite loss during probing");
    return (fp - fm) / (T(2) * h);
}

}  // namespace detail

template <typename F>
GradCheckResult grad_check(F&& f,
                           const std::vector<std::pair<std::string, Tensor<double>>>& params,
                           double eps = 1e-5) {
    // analytic pass
    for (auto& [name, p] : params) const_cast<Tensor<double>&>(p).zero_grad();
    Tensor<double> loss = f();
    if (!std::isfinite(loss.item()))
        throw NumericError("grad_check: non-finite loss " + std::to_string(loss.item()));
    loss.backward();
    std::vector<std::vector<double>> analytic;
    analytic.reserve(params.size());
    for (auto& [name, p] : params) {
        if (p.has_grad())
            analytic.push_back(p.grad());
        else
            analytic.emplace_back(p.values().size(), 0.0);
    }

    GradCheckResult res;
    for (std::size_t pi = 0; pi < params.size(); ++pi) {
        auto& p = const_cast<Tensor<double>&>(params[pi].second);
        double* v = p.data();
        for (std::int64_t i = 0; i < p.numel(); ++i) {
            const double saved = v[i];
            v[i] = saved + eps;
            const double fp = f().item();
            v[i] = saved - eps;
            const double fm = f().item();
            v[i] = saved;
            if (!std::isfinite(fp) || !std::isfinite(fm))
                throw NumericError("grad_check: non-finite loss during probing of " +
                                   params[pi].first);
            const double numeric = (fp - fm) / (2.0 * eps);
            const double err = grad_rel_err(analytic[pi][static_cast<std::size_t>(i)], numeric);
            if (err > res.max_rel_err) {
                res.max_rel_err = err;
                res.worst_param = params[pi].first;
                res.worst_index = i;
                res.worst_analytic = analytic[pi][static_cast<std::size_t>(i)];
                res.worst_numeric = numeric;
            }
        }
    }
    return res;
}

// Full-model gradient check. Central differences in double bottom out near
// 5e-13 absolute accuracy, which is not enough to resolve the tiny gradients a
// deep composition produces, so each coordinate first tries a descending
// step-size sweep in double and, if still above tol, an extended-precision
// probe of the same function. The analytic gradient under test stays in
// double; only the finite-difference reference gets more accurate. `f_hp`
// must compute the same scalar as `f` from `params_hp`, which is synced to
// `params` here, so callers only keep shapes and names parallel.
template <typename F, typename G>
GradCheckResult grad_check_refined(
    F&& f, const std::vector<std::pair<std::string, Tensor<double>>>& params,
    G&& f_hp, const std::vector<std::pair<std::string, Tensor<long double>>>& params_hp,
    double tol = 1e-5) {
    if (params_hp.size() != params.size())
        throw ConfigError("grad_check_refined: parameter sets differ in size");
    for (std::size_t pi = 0; pi < params.size(); ++pi) {
        auto& hp = const_cast<Tensor<long double>&>(params_hp[pi].second);
        if (hp.numel() != params[pi].second.numel())
            throw ConfigError("grad_check_refined: size mismatch for " + params[pi].first);
        const double* src = params[pi].second.values().data();
        long double* dst = hp.data();
        for (std::int64_t i = 0; i < hp.numel(); ++i) dst[i] = src[i];
    }

    for (auto& [name, p] : params) const_cast<Tensor<double>&>(p).zero_grad();
    Tensor<double> loss = f();
    if (!std::isfinite(loss.item()))
        throw NumericError("grad_check: non-finite loss " + std::to_string(loss.item()));
    loss.backward();
    std::vector<std::vector<double>> analytic;
    analytic.reserve(params.size());
    for (auto& [name, p] : params) {
        if (p.has_grad())
            analytic.push_back(p.grad());
        else
            analytic.emplace_back(p.values().size(), 0.0);
    }

    constexpr double kStepsDouble[] = {1e-2, 1e-3, 1e-4, 1e-5};
    constexpr long double kStepsHp[] = {1e-5L, 1e-4L, 3e-4L, 1e-3L, 3e-3L, 1e-2L};

    GradCheckResult res;
    NoGradGuard ng;
    for (std::size_t pi = 0; pi < params.size(); ++pi) {
        auto& p = const_cast<Tensor<double>&>(params[pi].second);
        auto& p_hp = const_cast<Tensor<long double>&>(params_hp[pi].second);
        for (std::int64_t i = 0; i < p.numel(); ++i) {
            const double ga = analytic[pi][static_cast<std::size_t>(i)];
            double best = std::numeric_limits<double>::infinity();
            double best_numeric = 0.0;
            for (double h : kStepsDouble) {
                const double numeric = detail::central_diff(f, p.data() + i, h);
                const double err = grad_rel_err(ga, numeric);
                if (err < best) {
                    best = err;
                    best_numeric = numeric;
                }
                if (best < tol) break;
            }
            if (best >= tol) {
                for (long double h : kStepsHp) {
                    const double numeric = static_cast<double>(
                        detail::central_diff(f_hp, p_hp.data() + i, h));
                    const double err = grad_rel_err(ga, numeric);
                    if (err < best) {
                        best = err;
                        best_numeric = numeric;
                    }
                    if (best < tol) break;
                }
            }
            if (best > res.max_rel_err) {
                res.max_rel_err = best;
                res.worst_param = params[pi].first;
                res.worst_index = i;
                res.worst_analytic = ga;
                res.worst_numeric = best_numeric;
            }
        }
    }
    return res;
}

}  // namespace catmae
