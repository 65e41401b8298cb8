#pragma once

#include <cmath>
#include <functional>

#include "step/tensor.hpp"

namespace step {

// Central-difference gradient oracle. Deliberately knows nothing about the
// tape: it only re-evaluates the scalar function, so it stays an independent
// check on every reverse-mode gradient in the repo.
template <typename Real>
Tensor<Real> finite_diff_gradient(const std::function<Real(const Tensor<Real>&)>& f,
                                  const Tensor<Real>& x, Real h = Real(1e-5)) {
    Tensor<Real> g(x.shape);
    Tensor<Real> xp = x;
    for (std::size_t i = 0; i < x.numel(); ++i) {
        Real orig = xp[i];
        xp[i] = orig + h;
        Real fp = f(xp);
        xp[i] = orig - h;
        Real fm = f(xp);
        xp[i] = orig;
        g[i] = (fp - fm) / (Real(2) * h);
    }
    return g;
}

// Vector-level relative error ||a - b|| / max(||b||, floor).
template <typename Real>
Real rel_error(const Tensor<Real>& a, const Tensor<Real>& b, Real floor = Real(1e-8)) {
    Real num = 0, den = 0;
    for (std::size_t i = 0; i < a.numel(); ++i) {
        Real d = a[i] - b[i];
        num += d * d;
        den += b[i] * b[i];
    }
    return std::sqrt(num) / std::max(std::sqrt(den), floor);
}

}  // namespace step
