#pragma once

// Central finite-difference gradient checking for scalar functions built on a
// Graph. The error measure is norm-wise relative error,
//   ||g_analytic - g_numeric|| / max(||g_analytic||, ||g_numeric||, 1e-12),
// computed over the checked coordinates of each input.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <random>
#include <vector>

#include "osseg/tensor.hpp"

namespace osseg {

// Builds a scalar from leaf variables that wrap `inputs` in the same order.
using ScalarFn = std::function<Var(Graph&, const std::vector<Var>&)>;

struct GradCheckOptions {
    double step = 1e-6;
    // Coordinates probed per input; inputs with more elements are subsampled.
    std::size_t max_coords = std::numeric_limits<std::size_t>::max();
    std::uint64_t seed = 0;
};

struct GradCheckResult {
    // Norm-wise relative error per input.
    std::vector<double> rel_error;
    double max_rel_error() const {
        double m = 0.0;
        for (double e : rel_error) m = std::max(m, e);
        return m;
    }
};

inline double evaluate_scalar(const ScalarFn& f, const std::vector<Tensor>& inputs) {
    Graph g;
    std::vector<Var> vars;
    vars.reserve(inputs.size());
    for (const auto& t : inputs) vars.push_back(g.constant(t));
    return g.value(f(g, vars))[0];
}

inline std::vector<std::vector<double>> analytic_gradients(const ScalarFn& f, const std::vector<Tensor>& inputs) {
    Graph g;
    std::vector<Var> vars;
    vars.reserve(inputs.size());
    for (const auto& t : inputs) vars.push_back(g.variable(t));
    Var out = f(g, vars);
    g.backward(out);
    std::vector<std::vector<double>> grads;
    for (Var v : vars) {
        auto s = g.grad(v);
        grads.emplace_back(s.begin(), s.end());
    }
    return grads;
}

inline GradCheckResult check_gradients(const ScalarFn& f, std::vector<Tensor> inputs,
                                       const GradCheckOptions& opt = {}) {
    const auto analytic = analytic_gradients(f, inputs);
    std::mt19937_64 rng(opt.seed);
    GradCheckResult result;
    for (std::size_t k = 0; k < inputs.size(); ++k) {
        const std::size_t n = inputs[k].numel();
        std::vector<std::size_t> coords(n);
        for (std::size_t i = 0; i < n; ++i) coords[i] = i;
        if (n > opt.max_coords) {
            std::shuffle(coords.begin(), coords.end(), rng);
            coords.resize(opt.max_coords);
        }
        double diff2 = 0.0, a2 = 0.0, n2 = 0.0;
        for (std::size_t i : coords) {
            const double orig = inputs[k][i];
            inputs[k][i] = orig + opt.step;
            const double fp = evaluate_scalar(f, inputs);
            inputs[k][i] = orig - opt.step;
            const double fm = evaluate_scalar(f, inputs);
            inputs[k][i] = orig;
            const double numeric = (fp - fm) / (2.0 * opt.step);
            const double a = analytic[k][i];
            diff2 += (a - numeric) * (a - numeric);
            a2 += a * a;
            n2 += numeric * numeric;
        }
        const double denom = std::max({std::sqrt(a2), std::sqrt(n2), 1e-12});
        result.rel_error.push_back(std::sqrt(diff2) / denom);
    }
    return result;
}

}  // namespace osseg
