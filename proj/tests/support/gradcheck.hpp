// Copyright (c) 2026, deskmoe contributors
// SPDX-License-Identifier: Apache-2.0
//
// Central finite-difference oracle. It only evaluates the loss closure
// forward (no tape), so it is independent of every backward implementation.

#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "deskmoe/tensor.hpp"

namespace deskmoe::testing {

struct GradCheckResult {
    double max_rel_err = 0.0;
    std::string worst;
};

// Relative error per tensor: ||analytic - numeric||_2 / max(||numeric||_2, floor).
// `loss` must rebuild the graph from the current parameter values on every call.
inline GradCheckResult gradcheck(const std::function<Tensor<double>()>& loss, std::vector<Tensor<double>> inputs,
                                 double h = 1e-6, double floor = 1e-8) {
    for (auto& t : inputs) {
        t.set_requires_grad(true);
        t.ensure_grad();
        t.zero_grad();
    }
    {
        Tape tape;
        TapeScope scope(tape);
        auto l = loss();
        tape.backward(l);
    }
    GradCheckResult result;
    for (std::size_t k = 0; k < inputs.size(); ++k) {
        auto& t = inputs[k];
        std::vector<double> analytic(t.grad().begin(), t.grad().end());
        double diff2 = 0.0, num2 = 0.0;
        for (std::size_t i = 0; i < t.numel(); ++i) {
            const double orig = t[i];
            double fp, fm;
            {
                NoGradScope ng;
                t[i] = orig + h;
                fp = loss().item();
                t[i] = orig - h;
                fm = loss().item();
            }
            t[i] = orig;
            const double numeric = (fp - fm) / (2.0 * h);
            diff2 += (numeric - analytic[i]) * (numeric - analytic[i]);
            num2 += numeric * numeric;
        }
        const double rel = std::sqrt(diff2) / std::max(std::sqrt(num2), floor);
        if (rel > result.max_rel_err) {
            result.max_rel_err = rel;
            result.worst = "input " + std::to_string(k);
        }
    }
    return result;
}

}  // namespace deskmoe::testing
