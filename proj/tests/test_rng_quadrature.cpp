#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "pfi/quadrature.hpp"
#include "pfi/rng.hpp"

using namespace pfi;

TEST_CASE("rng streams are deterministic and substreams are disjoint") {
    Rng a(42), b(42);
    for (int i = 0; i < 1000; ++i) CHECK(a.raw() == b.raw());

    Rng base(42);
    Rng s1 = base.substream("snapshots", 0);
    Rng s2 = base.substream("snapshots", 1);
    Rng s3 = base.substream("training", 0);
    CHECK(s1.raw() != s2.raw());
    CHECK(base.substream("snapshots", 0).raw() != s3.raw());

    // substream derivation does not consume from the parent
    Rng c(42);
    (void)c.substream("x", 7);
    Rng d(42);
    CHECK(c.raw() == d.raw());
}

TEST_CASE("rng moments") {
    Rng rng(7);
    const int n = 200000;
    double su = 0, su2 = 0, sn = 0, sn2 = 0, se = 0;
    for (int i = 0; i < n; ++i) {
        double u = rng.uniform();
        CHECK(u >= 0.0);
        CHECK(u < 1.0);
        su += u;
        su2 += u * u;
        double z = rng.normal();
        sn += z;
        sn2 += z * z;
        se += rng.exponential(2.0);
    }
    CHECK(std::abs(su / n - 0.5) < 3.0 * std::sqrt(1.0 / 12.0 / n));
    CHECK(std::abs(su2 / n - 1.0 / 3.0) < 0.005);
    CHECK(std::abs(sn / n) < 3.0 / std::sqrt(double(n)));
    CHECK(std::abs(sn2 / n - 1.0) < 3.0 * std::sqrt(2.0 / n));
    CHECK(std::abs(se / n - 0.5) < 3.0 * 0.5 / std::sqrt(double(n)));
}

TEST_CASE("categorical follows weights") {
    Rng rng(11);
    Eigen::VectorXd w(3);
    w << 1.0, 2.0, 7.0;
    Eigen::Vector3d counts = Eigen::Vector3d::Zero();
    const int n = 100000;
    for (int i = 0; i < n; ++i) counts[long(rng.categorical(w))] += 1.0;
    for (int k = 0; k < 3; ++k) {
        const double p = w[k] / w.sum();
        CHECK(std::abs(counts[k] / n - p) < 3.0 * std::sqrt(p * (1 - p) / n));
    }
}

TEST_CASE("quadrature reproduces closed-form integrals") {
    // smooth scalar
    const double got = integrate([](double x) { return std::exp(-x) * std::sin(3.0 * x); }, 0.0, 5.0, 1e-12);
    // \int e^{-x} sin(3x) dx = e^{-x} (-sin(3x) - 3 cos(3x))/10
    auto anti = [](double x) { return std::exp(-x) * (-std::sin(3 * x) - 3 * std::cos(3 * x)) / 10.0; };
    CHECK(got == doctest::Approx(anti(5.0) - anti(0.0)).epsilon(1e-11));

    // oscillatory, needs adaptivity
    const double osc = integrate([](double x) { return std::cos(50.0 * x); }, 0.0, 1.0, 1e-12);
    CHECK(osc == doctest::Approx(std::sin(50.0) / 50.0).epsilon(1e-9));

    // matrix-valued integrand (planar rotation)
    auto m = integrate(
        [&](double t) -> Eigen::MatrixXd {
            Eigen::Matrix2d r;
            r << std::cos(t), std::sin(t), -std::sin(t), std::cos(t);
            return r;
        },
        0.0, 1.0, 1e-12);
    Eigen::Matrix2d want;
    want << std::sin(1.0), 1.0 - std::cos(1.0), std::cos(1.0) - 1.0, std::sin(1.0);
    CHECK((m - want).cwiseAbs().maxCoeff() < 1e-10);
}
