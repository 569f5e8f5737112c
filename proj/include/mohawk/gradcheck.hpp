#pragma once

#include <cmath>
#include <functional>

#include "mohawk/tensor.hpp"

namespace mohawk {

// Central finite differences of a scalar function, coordinate by coordinate.
// The independent oracle for every analytic gradient in this library.
inline Tensor finite_diff_grad(const std::function<double(const Tensor&)>& f, const Tensor& x,
                               double eps = 1e-5) {
    Tensor g(x.shape);
    Tensor xp = x;
    for (i64 i = 0; i < x.size(); ++i) {
        const double orig = xp[i];
        xp[i] = orig + eps;
        const double fp = f(xp);
        xp[i] = orig - eps;
        const double fm = f(xp);
        xp[i] = orig;
        check_input(std::isfinite(fp) && std::isfinite(fm),
                    "finite_diff_grad: non-finite function value");
        g[i] = (fp - fm) / (2.0 * eps);
    }
    return g;
}

// max_i |a_i - b_i| / max(|a_i|, |b_i|, floor). The floor keeps central-
// difference roundoff on near-zero coordinates from dominating the ratio.
inline double max_rel_err(const Tensor& a, const Tensor& b, double floor = 1e-5) {
    check(a.same_shape(b), "max_rel_err: shape mismatch");
    double worst = 0.0;
    for (i64 i = 0; i < a.size(); ++i) {
        double denom = std::max(std::max(std::abs(a[i]), std::abs(b[i])), floor);
        worst = std::max(worst, std::abs(a[i] - b[i]) / denom);
    }
    return worst;
}

}  // namespace mohawk
