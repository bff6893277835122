#pragma once
// Central finite-difference validation of reverse-mode gradients.
//
// Coordinates where the one-sided slopes disagree badly are excluded: they sit
// on a kink (abs/relu/max at the crease), where a finite difference straddles
// two linear pieces and the comparison is meaningless.

#include <cmath>
#include <functional>
#include <vector>

#include "gals/tensor.hpp"

namespace gals {

struct GradCheckResult {
    double max_rel_err = 0.0;
    int checked = 0;
    int excluded = 0;
};

// Evaluates `f` on freshly watched copies of `points`. `f` must reduce to a
// scalar; it may itself call backward(..., create_higher_order=true), which
// turns this into a second-order check.
inline GradCheckResult finite_difference_check(
    const std::function<Tensor(Tape&, const std::vector<Tensor>&)>& f,
    const std::vector<Tensor>& points, double eps = 1e-5) {
    auto eval = [&](const std::vector<Tensor>& xs) {
        Tape tape;
        std::vector<Tensor> watched;
        watched.reserve(xs.size());
        for (const Tensor& x : xs) watched.push_back(tape.watch(x.clone()));
        return f(tape, watched).item();
    };

    Tape tape;
    std::vector<Tensor> watched;
    watched.reserve(points.size());
    for (const Tensor& x : points) watched.push_back(tape.watch(x.clone()));
    Tensor y = f(tape, watched);
    std::vector<Tensor> grads = backward(y, watched, false);
    const double f0 = y.item();

    GradCheckResult r;
    std::vector<Tensor> xs;
    for (const Tensor& p : points) xs.push_back(p.clone());
    for (size_t j = 0; j < xs.size(); ++j) {
        for (int i = 0; i < xs[j].numel(); ++i) {
            const double saved = xs[j].data()[i];
            xs[j].data()[i] = saved + eps;
            const double fp = eval(xs);
            xs[j].data()[i] = saved - eps;
            const double fm = eval(xs);
            xs[j].data()[i] = saved;

            const double dp = (fp - f0) / eps;
            const double dm = (f0 - fm) / eps;
            if (std::fabs(dp - dm) > 0.1 * std::max({std::fabs(dp), std::fabs(dm), 1e-3})) {
                ++r.excluded;
                continue;
            }
            const double fd = (fp - fm) / (2.0 * eps);
            const double an = grads[j].data()[i];
            const double rel =
                std::fabs(fd - an) / std::max(std::fabs(fd) + std::fabs(an), 1e-3);
            r.max_rel_err = std::max(r.max_rel_err, rel);
            ++r.checked;
        }
    }
    return r;
}

}  // namespace gals
