#pragma once

#include <cmath>
#include <stdexcept>

#include <Eigen/Dense>

namespace pfi {

namespace detail {

// Gauss-Kronrod 7-15 nodes/weights on [-1, 1] (QUADPACK dqk15 values).
inline constexpr double kGk15Nodes[8] = {
    0.991455371120812639206854697526329,
    0.949107912342758524526189684047851,
    0.864864423359769072789712788640926,
    0.741531185599394439863864773280788,
    0.586087235467691130294144838258730,
    0.405845151377397166906606412076961,
    0.207784955007898467600689403773245,
    0.000000000000000000000000000000000};
inline constexpr double kGk15Weights[8] = {
    0.022935322010529224963732008058970,
    0.063092092629978553290700663189204,
    0.104790010322250183839876322541518,
    0.140653259715525918745189590510238,
    0.169004726639267902826583426598550,
    0.190350578064785409913256402421014,
    0.204432940075298892414161999234649,
    0.209482141084727828012999174891714};
inline constexpr double kG7Weights[4] = {
    0.129484966168869693270611432679082,
    0.279705391489276667901467771423780,
    0.381830050505118944950369775488975,
    0.417959183673469387755102040816327};

inline double error_measure(double x) { return std::abs(x); }
template <typename Derived>
double error_measure(const Eigen::MatrixBase<Derived>& m) {
    return m.cwiseAbs().maxCoeff();
}

template <typename F>
auto gk15(const F& f, double a, double b, double& err) {
    const double h = 0.5 * (b - a);
    const double c = 0.5 * (a + b);
    auto fc = f(c);
    auto kronrod = decltype(fc)(kGk15Weights[7] * fc);
    auto gauss = decltype(fc)(kG7Weights[3] * fc);
    for (int i = 0; i < 7; ++i) {
        const double dx = h * kGk15Nodes[i];
        auto pair_sum = decltype(fc)(f(c - dx) + f(c + dx));
        kronrod += kGk15Weights[i] * pair_sum;
        if (i % 2 == 1) gauss += kG7Weights[i / 2] * pair_sum;
    }
    kronrod *= h;
    gauss *= h;
    err = error_measure(decltype(fc)(kronrod - gauss));
    return kronrod;
}

template <typename F>
auto integrate_rec(const F& f, double a, double b, double tol, int depth) {
    double err = 0.0;
    auto whole = gk15(f, a, b, err);
    if (err <= tol || depth <= 0) return whole;
    const double c = 0.5 * (a + b);
    return decltype(whole)(integrate_rec(f, a, c, 0.5 * tol, depth - 1) +
                           integrate_rec(f, c, b, 0.5 * tol, depth - 1));
}

}  // namespace detail

/// Adaptive Gauss-Kronrod (7-15) integration of a scalar- or matrix-valued
/// integrand on [a, b] to absolute tolerance tol. Bisection depth is capped;
/// the cap corresponds to subintervals of width (b-a)/2^30.
template <typename F>
auto integrate(const F& f, double a, double b, double tol = 1e-10, int max_depth = 30) {
    if (!(b >= a)) throw std::invalid_argument("integrate: bad interval");
    return detail::integrate_rec(f, a, b, tol, max_depth);
}

}  // namespace pfi
