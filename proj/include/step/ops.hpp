#pragma once

#include <cmath>

#include "step/tape.hpp"

namespace step {

// Composites built from tape primitives; gradients come out of the chain rule
// with no hand-derived backward code.

// tanh-approximation GELU
template <typename Real>
int gelu(Tape<Real>& t, int x) {
    const Real c = Real(0.7978845608028654);  // sqrt(2/pi)
    int x3 = t.mul(t.mul(x, x), x);
    int inner = t.scale(t.add(x, t.scale(x3, Real(0.044715))), c);
    int g = t.add_const(t.tanh_(inner), Real(1));
    return t.scale(t.mul(x, g), Real(0.5));
}

// Smooth lower clamp: smooth_max_const(t, x, lo, k) ~= max(lo, x), exact far
// from the corner, differentiable everywhere. lo + softplus(k(x-lo))/k.
template <typename Real>
int smooth_max_const(Tape<Real>& t, int x, Real lo, Real k) {
    int shifted = t.scale(t.add_const(x, -lo), k);
    return t.add_const(t.scale(t.softplus(shifted), Real(1) / k), lo);
}

// huber(max(0, x)) with the hard hinge (subgradient 0 at the kink)
template <typename Real>
int hinge_huber(Tape<Real>& t, int x, Real delta = Real(1)) {
    return t.huber(t.relu(x), delta);
}

// Plain-value helpers mirroring the differentiable forms (used where no
// gradient is needed, and as independent cross-checks in tests).
template <typename Real>
Real huber_value(Real x, Real delta) {
    Real ax = std::abs(x);
    return ax <= delta ? Real(0.5) * x * x : delta * (ax - Real(0.5) * delta);
}

}  // namespace step
