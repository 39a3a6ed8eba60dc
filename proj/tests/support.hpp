#pragma once

#include <gtest/gtest.h>

#include <functional>

#include "gmem/gradcheck.hpp"
#include "gmem/util.hpp"

namespace gmem::testing {

using LossFn = std::function<Var(Tape&)>;

// Backward on `loss` against central differences for every tensor in `params`.
inline void expect_gradients_match(const LossFn& loss, const ParamRefs& params, double rel_tol = 1e-4,
                                   double abs_floor = 1e-7) {
    for (Parameter* p : params) p->zero_grad();
    {
        Tape t;
        t.backward(loss(t));
    }
    auto f = [&] {
        Tape t(false);
        return loss(t).value().item();
    };
    const auto numeric = finite_difference_grad(f, params);
    for (std::size_t k = 0; k < params.size(); ++k) {
        const GradCheckRow row = compare_gradient(params[k]->name, params[k]->grad, numeric[k], rel_tol, abs_floor);
        EXPECT_TRUE(row.pass) << row.name << ": max rel " << row.max_rel_error << ", max abs " << row.max_abs_error;
    }
}

inline double max_abs_diff(const Tensor& a, const Tensor& b) {
    EXPECT_EQ(a.shape(), b.shape());
    double m = 0.0;
    for (std::size_t i = 0; i < a.size() && i < b.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
    return m;
}

inline Parameter random_param(const std::string& name, Shape shape, Rng& rng, double std = 1.0) {
    return Parameter(name, random_normal(std::move(shape), std, rng));
}

}  // namespace gmem::testing
