#pragma once

#include <functional>
#include <vector>

#include "pcseg/autodiff.hpp"

namespace pcseg {

// Scalar-valued function of a set of float64 variables, executed under an
// optional tape. The same callable serves the analytic pass (real tape) and
// the finite-difference probes (tape = nullptr).
using GradCheckFn =
    std::function<Var<double>(Tape<double>*, const std::vector<Var<double>>&)>;

// Compares tape gradients against central finite differences on every element
// of every input. Returns the worst guarded relative error
// |a - n| / max(1, |a|, |n|).
inline double grad_check(const GradCheckFn& fn, const std::vector<TensorData<double>>& inputs,
                         double eps = 1e-5) {
    std::vector<Var<double>> vars;
    vars.reserve(inputs.size());
    for (const auto& t : inputs) vars.push_back(make_var<double>(t, /*requires_grad=*/true));

    Tape<double> tape;
    auto loss = fn(&tape, vars);
    tape.backward(loss);

    std::vector<TensorData<double>> analytic;
    analytic.reserve(vars.size());
    for (const auto& v : vars) analytic.push_back(v->grad);

    auto eval = [&](const std::vector<TensorData<double>>& probe) {
        std::vector<Var<double>> pv;
        pv.reserve(probe.size());
        for (const auto& t : probe) pv.push_back(make_var<double>(t, false));
        return fn(nullptr, pv)->value.v[0];
    };

    double worst = 0;
    std::vector<TensorData<double>> probe = inputs;
    for (std::size_t vi = 0; vi < inputs.size(); ++vi) {
        for (std::size_t j = 0; j < probe[vi].v.size(); ++j) {
            const double saved = probe[vi].v[j];
            probe[vi].v[j] = saved + eps;
            const double fp = eval(probe);
            probe[vi].v[j] = saved - eps;
            const double fm = eval(probe);
            probe[vi].v[j] = saved;
            const double numeric = (fp - fm) / (2.0 * eps);
            const double a = analytic[vi].v[j];
            const double err = std::abs(a - numeric) / std::max({1.0, std::abs(a), std::abs(numeric)});
            if (err > worst) worst = err;
        }
    }
    return worst;
}

}  // namespace pcseg
