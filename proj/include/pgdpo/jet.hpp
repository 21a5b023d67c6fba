// SPDX-License-Identifier: Apache-2.0
#pragma once

// Second-order forward-mode numbers: value plus first and second derivatives
// along a single input direction.

namespace pgdpo {

struct Jet2 {
    double v = 0.0;
    double d = 0.0;
    double dd = 0.0;

    static Jet2 constant(double v) { return {v, 0.0, 0.0}; }
    static Jet2 variable(double v) { return {v, 1.0, 0.0}; }
};

inline Jet2 operator+(Jet2 a, Jet2 b) { return {a.v + b.v, a.d + b.d, a.dd + b.dd}; }
inline Jet2 operator-(Jet2 a, Jet2 b) { return {a.v - b.v, a.d - b.d, a.dd - b.dd}; }
inline Jet2 operator*(Jet2 a, Jet2 b) {
    return {a.v * b.v, a.d * b.v + a.v * b.d, a.dd * b.v + 2.0 * a.d * b.d + a.v * b.dd};
}
inline Jet2 operator*(double s, Jet2 a) { return {s * a.v, s * a.d, s * a.dd}; }
inline Jet2 operator*(Jet2 a, double s) { return s * a; }
inline Jet2 operator+(Jet2 a, double s) { return {a.v + s, a.d, a.dd}; }

/// f(a) given f, f' and f'' evaluated at a.v.
inline Jet2 chain(Jet2 a, double f, double f1, double f2) {
    return {f, f1 * a.d, f1 * a.dd + f2 * a.d * a.d};
}

}  // namespace pgdpo
