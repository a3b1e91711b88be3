#pragma once

// Central finite-difference oracle used by the gradient tests. Stays
// independent of the backward implementation: it only perturbs leaf values
// and re-runs the forward closure.

#include <cmath>
#include <functional>
#include <vector>

#include "ammnet/rng.hpp"
#include "ammnet/tensor.hpp"

namespace gradcheck {

// Returns the max relative error between the autograd gradient of
// scalar_fn() w.r.t. `leaf` and the central finite difference, f64 only.
// The closure must rebuild the graph from the leaves on every call.
inline double max_rel_err(ammnet::Tensor<double>& leaf,
                          const std::function<ammnet::Tensor<double>()>& scalar_fn,
                          double step = 1e-5) {
    using namespace ammnet;
    leaf.clear_grad();
    Tensor<double> out = scalar_fn();
    out.backward();
    std::vector<double> analytic = leaf.grad();

    double worst = 0.0;
    auto& v = leaf.data();
    for (size_t i = 0; i < v.size(); ++i) {
        const double keep = v[i];
        v[i] = keep + step;
        const double fp = scalar_fn().item();
        v[i] = keep - step;
        const double fm = scalar_fn().item();
        v[i] = keep;
        const double numeric = (fp - fm) / (2.0 * step);
        const double denom = std::max({std::abs(numeric), std::abs(analytic[i]), 1e-8});
        worst = std::max(worst, std::abs(numeric - analytic[i]) / denom);
    }
    return worst;
}

// Same check against several leaves at once; returns the worst error.
inline double max_rel_err_multi(std::vector<ammnet::Tensor<double>*> leaves,
                                const std::function<ammnet::Tensor<double>()>& scalar_fn,
                                double step = 1e-5) {
    double worst = 0.0;
    for (auto* leaf : leaves) {
        for (auto* l : leaves) l->clear_grad();
        worst = std::max(worst, max_rel_err(*leaf, scalar_fn, step));
    }
    return worst;
}

inline ammnet::Tensor<double> random_tensor(ammnet::Shape shape, uint64_t seed,
                                            bool requires_grad = true) {
    ammnet::Rng rng(seed);
    auto t = ammnet::Tensor<double>::zeros(std::move(shape), requires_grad);
    for (auto& v : t.data()) v = rng.uniform(-1.0, 1.0);
    return t;
}

}  // namespace gradcheck
