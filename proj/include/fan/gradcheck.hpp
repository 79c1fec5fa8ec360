#pragma once

#include <cmath>
#include <functional>
#include <sstream>
#include <string>
#include <vector>

#include "fan/tensor.hpp"

namespace fan {

struct GradCheckResult {
    bool ok = true;
    double max_err = 0.0;         // worst |analytic - numeric| over the tolerance
    std::string worst;            // human-readable location of the worst element
    int checked = 0;

    explicit operator bool() const { return ok; }
};

// Central-difference verification of reverse-mode gradients. `f` must build a
// fresh graph from the current values of `inputs` and return a scalar. Each
// input element is perturbed with h scaled to its magnitude; the analytic
// gradient passes when |a - n| <= atol + rtol * max(|a|, |n|).
inline GradCheckResult grad_check(const std::function<Tensor()>& f, std::vector<Tensor> inputs,
                                  double rtol = 1e-5, double atol = 1e-8,
                                  int max_elements_per_input = -1) {
    for (auto& t : inputs) t.zero_grad();
    Tensor out = f();
    out.backward();
    std::vector<std::vector<real>> analytic;
    analytic.reserve(inputs.size());
    for (auto& t : inputs) analytic.push_back(t.grad());

    GradCheckResult res;
    NoGradGuard ng;
    for (std::size_t ti = 0; ti < inputs.size(); ++ti) {
        auto& vals = inputs[ti].values();
        const std::size_t n = vals.size();
        const std::size_t limit =
            max_elements_per_input < 0 ? n : std::min(n, std::size_t(max_elements_per_input));
        // Stride through the buffer so a truncated check still samples all of it.
        const std::size_t step = limit == 0 ? n : std::max<std::size_t>(1, n / limit);
        for (std::size_t i = 0; i < n; i += step) {
            const real x = vals[i];
            const real h = 1e-6 * std::max(real(1), std::fabs(x));
            vals[i] = x + h;
            const real fp = f().item();
            vals[i] = x - h;
            const real fm = f().item();
            vals[i] = x;
            const real numeric = (fp - fm) / (2 * h);
            const real a = analytic[ti][i];
            const real err = std::fabs(a - numeric);
            const real tol = atol + rtol * std::max(std::fabs(a), std::fabs(numeric));
            ++res.checked;
            if (err - tol > res.max_err) {
                res.max_err = err - tol;
                std::ostringstream ss;
                ss << "input " << ti << " elem " << i << ": analytic " << a << " numeric "
                   << numeric;
                res.worst = ss.str();
            }
            if (err > tol) res.ok = false;
        }
    }
    return res;
}

}  // namespace fan
