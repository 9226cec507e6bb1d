#pragma once

// Shared helpers for the unit tests: a central finite-difference gradient
// checker (float64, central differences) and small random-tensor builders.

#include <cat/tensor.hpp>

#include <cmath>
#include <random>
#include <string>
#include <utility>
#include <vector>

namespace testutil {

using DTensor = cat::TensorT<double>;

struct GradCheckResult {
    double max_rel_err = 0.0;
    std::string worst_param;
    long worst_index = -1;
    long checked = 0;
    bool ok(double tol = 1e-4) const { return checked > 0 && max_rel_err < tol; }
};

// Compares analytic gradients against central finite differences for every
// element of every parameter. `loss_fn` must rebuild the forward graph from
// the current parameter values on each call and return a scalar.
//
// Relative error uses denominator max(|a|, |n|, 1e-5); the floor only kicks
// in for near-zero gradients where the difference itself is at noise level.
template <class LossFn>
GradCheckResult check_gradients(std::vector<std::pair<std::string, DTensor>>& params,
                                LossFn&& loss_fn, double h = 1e-4) {
    GradCheckResult res;
    for (auto& [name, p] : params) p.zero_grad();
    auto loss = loss_fn();
    cat::backward(loss);
    for (auto& [name, p] : params) {
        std::vector<double> analytic = p.has_grad() ? p.grad() : std::vector<double>(p.numel(), 0.0);
        for (long i = 0; i < p.numel(); ++i) {
            const double saved = p.values()[i];
            double lp, lm;
            {
                cat::NoGradGuard ng;
                p.values()[i] = saved + h;
                lp = loss_fn().value();
                p.values()[i] = saved - h;
                lm = loss_fn().value();
            }
            p.values()[i] = saved;
            const double numeric = (lp - lm) / (2.0 * h);
            const double denom = std::max({std::fabs(analytic[i]), std::fabs(numeric), 1e-5});
            const double rel = std::fabs(analytic[i] - numeric) / denom;
            ++res.checked;
            if (rel > res.max_rel_err) {
                res.max_rel_err = rel;
                res.worst_param = name;
                res.worst_index = i;
            }
        }
    }
    return res;
}

inline DTensor random_tensor(int rows, int cols, std::mt19937& rng, double scale = 1.0,
                             bool requires_grad = true) {
    std::uniform_real_distribution<double> dist(-scale, scale);
    auto t = DTensor::zeros({rows, cols});
    for (auto& v : t.values()) v = dist(rng);
    t.set_requires_grad(requires_grad);
    return t;
}

inline bool approx_equal(const std::vector<double>& a, const std::vector<double>& b, double tol) {
    if (a.size() != b.size()) return false;
    for (size_t i = 0; i < a.size(); ++i)
        if (std::fabs(a[i] - b[i]) > tol) return false;
    return true;
}

}  // namespace testutil
