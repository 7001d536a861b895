#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "apiq/autodiff/ops.hpp"

namespace apiq::ad {

// Builds a scalar from leaf variables on the given tape.
using ScalarFn = std::function<Var<double>(Tape<double>&, const std::vector<Var<double>>&)>;

struct GradcheckInput {
    double max_rel_err = 0.0;
    std::size_t worst_index = 0;
    double tape_grad = 0.0; // at worst_index
    double numeric_grad = 0.0;
};

struct GradcheckReport {
    std::vector<GradcheckInput> inputs;
    double tolerance = 0.0;
    bool passed = true;

    double max_rel_err() const
    {
        double m = 0.0;
        for (const auto& i : inputs) m = std::max(m, i.max_rel_err);
        return m;
    }
};

struct GradcheckOptions {
    double rel_step = 1e-4; // h = rel_step * max(1, |x|)
    // Relative error is |g - n| / max(|g|, |n|, floor) where floor is
    // floor_frac times the largest numeric gradient of that input (plus a
    // tiny absolute term), so near-zero entries do not dominate.
    double floor_frac = 1e-3;
    // Only check these inputs (all when empty).
    std::vector<std::size_t> only;
    // Only check these element indices of every checked input (all when empty).
    std::vector<std::size_t> elements;
};

// Compares tape gradients of f against central differences. When a surrogate
// is supplied, the differences are taken on it instead (e.g. a function with
// rounding replaced by identity); f still supplies the tape gradient.
inline GradcheckReport gradcheck(const ScalarFn& f, const std::vector<Tensor<double>>& inputs, double tolerance,
                                 const ScalarFn& surrogate = {}, const GradcheckOptions& opt = {})
{
    GradcheckReport rep;
    rep.tolerance = tolerance;

    std::vector<Tensor<double>> grads;
    {
        Tape<double> tape;
        std::vector<Var<double>> leaves;
        for (const auto& x : inputs) leaves.push_back(tape.leaf(x, true));
        Var<double> out = f(tape, leaves);
        tape.backward(out);
        for (const auto& l : leaves) grads.push_back(tape.grad(l));
    }

    const ScalarFn& numeric = surrogate ? surrogate : f;
    auto eval = [&](const std::vector<Tensor<double>>& xs) {
        Tape<double> tape;
        NoGrad<double> guard(tape);
        std::vector<Var<double>> leaves;
        for (const auto& x : xs) leaves.push_back(tape.leaf(x, true));
        return numeric(tape, leaves).value().item();
    };

    std::vector<Tensor<double>> work = inputs;
    for (std::size_t k = 0; k < inputs.size(); ++k) {
        GradcheckInput res;
        const bool skip = !opt.only.empty() && std::find(opt.only.begin(), opt.only.end(), k) == opt.only.end();
        if (skip) {
            rep.inputs.push_back(res);
            continue;
        }
        std::vector<std::size_t> idx = opt.elements;
        if (idx.empty())
            for (std::size_t i = 0; i < inputs[k].numel(); ++i) idx.push_back(i);
        std::vector<double> num(idx.size());
        for (std::size_t n = 0; n < idx.size(); ++n) {
            const std::size_t i = idx[n];
            const double x0 = inputs[k][i];
            const double h = opt.rel_step * std::max(1.0, std::abs(x0));
            work[k][i] = x0 + h;
            const double fp = eval(work);
            work[k][i] = x0 - h;
            const double fm = eval(work);
            work[k][i] = x0;
            num[n] = (fp - fm) / (2.0 * h);
        }
        double scale = 0.0;
        for (double v : num) scale = std::max(scale, std::abs(v));
        const double floor = opt.floor_frac * scale + 1e-12;
        for (std::size_t n = 0; n < idx.size(); ++n) {
            const double g = grads[k][idx[n]];
            const double e = std::abs(g - num[n]) / std::max({std::abs(g), std::abs(num[n]), floor});
            if (e >= res.max_rel_err) {
                res.max_rel_err = e;
                res.worst_index = idx[n];
                res.tape_grad = g;
                res.numeric_grad = num[n];
            }
        }
        rep.passed = rep.passed && res.max_rel_err <= tolerance;
        rep.inputs.push_back(res);
    }
    return rep;
}

} // namespace apiq::ad
