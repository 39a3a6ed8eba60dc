#pragma once

#include <functional>
#include <string>
#include <vector>

#include "gmem/autodiff.hpp"

namespace gmem {

struct OracleError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// Central-difference gradient of `f` with respect to every coordinate of
/// every tensor in `params`. Values are restored bit-exactly after each probe.
inline std::vector<Tensor> finite_difference_grad(const std::function<double()>& f, const ParamRefs& params,
                                                  double eps = 1e-5) {
    if (!(eps > 0.0)) throw ContractError("finite_difference_grad: eps must be positive");
    const double base = f();
    if (f() != base) throw OracleError("finite_difference_grad: objective is not deterministic");

    std::vector<Tensor> grads;
    grads.reserve(params.size());
    for (Parameter* p : params) {
        Tensor g(p->value.shape());
        for (std::size_t i = 0; i < p->value.size(); ++i) {
            const double orig = p->value[i];
            p->value[i] = orig + eps;
            const double up = f();
            p->value[i] = orig - eps;
            const double down = f();
            p->value[i] = orig;
            g[i] = (up - down) / (2.0 * eps);
        }
        grads.push_back(std::move(g));
    }
    return grads;
}

struct GradCheckRow {
    std::string name;
    std::size_t count = 0;
    double max_rel_error = 0.0;
    double max_abs_error = 0.0;
    bool pass = true;
};

/// Coordinate-wise comparison: a coordinate passes when the absolute gap is
/// under `abs_floor` or the gap relative to max(|a|, |n|) is under `rel_tol`.
inline GradCheckRow compare_gradient(const std::string& name, const Tensor& analytic, const Tensor& numeric,
                                     double rel_tol = 1e-4, double abs_floor = 1e-7) {
    kernel::require_same_shape(analytic, numeric, "compare_gradient");
    GradCheckRow row{name, analytic.size(), 0.0, 0.0, true};
    for (std::size_t i = 0; i < analytic.size(); ++i) {
        const double a = analytic[i], n = numeric[i];
        const double gap = std::abs(a - n);
        const double scale = std::max(std::abs(a), std::abs(n));
        const double rel = scale > abs_floor ? gap / scale : 0.0;
        row.max_abs_error = std::max(row.max_abs_error, gap);
        row.max_rel_error = std::max(row.max_rel_error, rel);
        if (gap > abs_floor && gap > rel_tol * scale) row.pass = false;
    }
    return row;
}

}  // namespace gmem
