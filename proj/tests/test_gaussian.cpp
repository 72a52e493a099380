#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "oracles.hpp"
#include "pfi/gaussian.hpp"
#include "pfi/rng.hpp"

using namespace pfi;
using Eigen::MatrixXd;
using Eigen::VectorXd;

namespace {

MatrixXd random_spd(Rng& rng, int d, double scale = 1.0) {
    MatrixXd a = rng.normal_matrix(d, d);
    return scale * (a * a.transpose() / d + 0.2 * MatrixXd::Identity(d, d));
}

GaussianState random_state(Rng& rng, int d) {
    return GaussianState(rng.normal_vector(d), random_spd(rng, d));
}

}  // namespace

TEST_CASE("GaussianState validates and round-trips spectrally") {
    VectorXd m = VectorXd::Zero(2);
    MatrixXd bad(2, 2);
    bad << 1.0, 0.5, -0.5, 1.0;  // asymmetric
    CHECK_THROWS(GaussianState(m, bad));
    MatrixXd neg(2, 2);
    neg << 1.0, 2.0, 2.0, 1.0;  // eigenvalues 3, -1
    CHECK_THROWS(GaussianState(m, neg));

    Rng rng(5);
    GaussianState g = random_state(rng, 6);
    Eigen::SelfAdjointEigenSolver<MatrixXd> es(g.cov);
    MatrixXd rebuilt = es.eigenvectors() * es.eigenvalues().asDiagonal() * es.eigenvectors().transpose();
    CHECK((rebuilt - g.cov).cwiseAbs().maxCoeff() < 1e-10 * g.cov.cwiseAbs().maxCoeff());
}

TEST_CASE("ou_propagate identity, stationarity, isotropic closed form") {
    const int d = 3;
    GaussianState init(VectorXd::Ones(d), MatrixXd::Identity(d, d));

    OuParams stat(-MatrixXd::Identity(d, d), MatrixXd::Identity(d, d), init);
    GaussianState at0 = ou_propagate(stat, 0.0);
    CHECK((at0.mean - init.mean).norm() == 0.0);
    CHECK((at0.cov - init.cov).norm() == 0.0);
    GaussianState at2 = ou_propagate(stat, 2.0);
    CHECK((at2.cov - MatrixXd::Identity(d, d)).cwiseAbs().maxCoeff() < 1e-12);
    CHECK(at2.mean.isApprox(std::exp(-2.0) * init.mean, 1e-12));
    CHECK_THROWS(ou_propagate(stat, -0.1));

    // isotropic with rotation: closed-form variance sigma_t^2 from the scalar ODE
    Rng rng(7);
    const double omega_s = -2.0, diff = 8.0, sigma0 = 1.0;
    MatrixXd skew = rng.normal_matrix(d, d);
    skew = skew - skew.transpose().eval();
    MatrixXd omega = omega_s * MatrixXd::Identity(d, d) + skew;
    VectorXd m0 = 20.0 * rng.unit_vector(d);
    OuParams iso(omega, diff * MatrixXd::Identity(d, d), GaussianState(m0, sigma0 * MatrixXd::Identity(d, d)));
    for (double t : {0.1, 0.5, 1.7}) {
        const double s2 =
            sigma0 * std::exp(2 * omega_s * t) + diff / omega_s * (std::exp(2 * omega_s * t) - 1.0);
        GaussianState lyap = ou_propagate(iso, t, PropagationMethod::lyapunov);
        GaussianState quad = ou_propagate(iso, t, PropagationMethod::quadrature);
        CHECK((lyap.cov - s2 * MatrixXd::Identity(d, d)).cwiseAbs().maxCoeff() < 1e-8 * s2);
        CHECK((quad.cov - s2 * MatrixXd::Identity(d, d)).cwiseAbs().maxCoeff() < 1e-8 * s2);
        CHECK(lyap.mean.norm() == doctest::Approx(std::exp(omega_s * t) * m0.norm()).epsilon(1e-10));
    }
}

TEST_CASE("ou_propagate semigroup property on anisotropic process") {
    Rng rng(11);
    const int d = 4;
    MatrixXd raw = rng.normal_matrix(d, d);
    MatrixXd omega = raw - (raw.cwiseAbs().rowwise().sum().maxCoeff() + 0.5) * MatrixXd::Identity(d, d);
    OuParams p(omega, random_spd(rng, d), random_state(rng, d));
    const double t1 = 0.3, t2 = 0.9;
    GaussianState mid = ou_propagate(p, t1);
    GaussianState direct = ou_propagate(p, t1 + t2);
    GaussianState chained = ou_propagate(OuParams(omega, p.diffusion, mid), t2);
    CHECK((direct.mean - chained.mean).norm() < 1e-8 * direct.mean.norm());
    CHECK((direct.cov - chained.cov).cwiseAbs().maxCoeff() < 1e-8 * direct.cov.cwiseAbs().maxCoeff());

    // quadrature fallback agrees with the Lyapunov route on a non-normal drift
    GaussianState q = ou_propagate(p, 0.7, PropagationMethod::quadrature);
    GaussianState l = ou_propagate(p, 0.7, PropagationMethod::lyapunov);
    CHECK((q.cov - l.cov).cwiseAbs().maxCoeff() < 1e-8 * l.cov.cwiseAbs().maxCoeff());
}

TEST_CASE("OuParams rejects unstable drift and indefinite diffusion") {
    const int d = 2;
    GaussianState init(VectorXd::Zero(d), MatrixXd::Identity(d, d));
    MatrixXd unstable = MatrixXd::Identity(d, d);  // positive eigenvalues
    CHECK_THROWS(OuParams(unstable, MatrixXd::Identity(d, d), init));
    MatrixXd indef(2, 2);
    indef << 1.0, 0.0, 0.0, -0.2;
    CHECK_THROWS(OuParams(-MatrixXd::Identity(d, d), indef, init));
}

TEST_CASE("w2 commuting-covariance identity and symmetry") {
    Rng rng(13);
    const int d = 5;
    const double s1 = 0.8, s2 = 1.7;
    VectorXd m = rng.normal_vector(d);
    GaussianState a(VectorXd::Zero(d), s1 * s1 * MatrixXd::Identity(d, d));
    GaussianState b(m, s2 * s2 * MatrixXd::Identity(d, d));
    const double expect = m.squaredNorm() + d * (s1 - s2) * (s1 - s2);
    CHECK(w2_squared(a, b) == doctest::Approx(expect).epsilon(1e-12));
    CHECK(w2_squared(b, a) == doctest::Approx(expect).epsilon(1e-12));
    CHECK(w2_squared(a, a) == doctest::Approx(0.0));
}

TEST_CASE("w2 triangle inequality spot checks (metric on Gaussians)") {
    Rng rng(17);
    for (int rep = 0; rep < 50; ++rep) {
        const int d = 2 + int(rng.uniform_index(4));
        GaussianState a = random_state(rng, d), b = random_state(rng, d), c = random_state(rng, d);
        const double ab = std::sqrt(w2_squared(a, b));
        const double bc = std::sqrt(w2_squared(b, c));
        const double ac = std::sqrt(w2_squared(a, c));
        CHECK(ac <= ab + bc + 1e-10);
    }
}

TEST_CASE("w2 against exhaustive assignment LP on sampled clouds (d=3)") {
    Rng rng(19);
    const int d = 3;
    GaussianState ga = random_state(rng, d), gb = random_state(rng, d);
    const double analytic = w2_squared(ga, gb);
    MatrixXd la = matrix_sqrt_psd(ga.cov), lb = matrix_sqrt_psd(gb.cov);

    auto draw = [&](const GaussianState& g, const MatrixXd& l, int n) {
        MatrixXd x(n, d);
        for (int i = 0; i < n; ++i) x.row(i) = (g.mean + l * rng.normal_vector(d)).transpose();
        return x;
    };

    // The plug-in LP value carries a positive discreteness gap relative to the
    // formula evaluated at the clouds' own fitted moments; in d=3 it decays
    // like n^{-2/3} with tiny variance, so check the decay across a 4x range.
    std::vector<double> gap;
    double lp5000 = 0.0, se5000 = 0.0;
    for (int n : {1250, 2500, 5000}) {
        MatrixXd xa = draw(ga, la, n), xb = draw(gb, lb, n);
        double se = 0.0;
        const double lp = oracle::assignment_w2sq(xa, xb, nullptr, &se);
        gap.push_back(lp - w2_squared(fit_gaussian(xa).state, fit_gaussian(xb).state));
        if (n == 5000) {
            lp5000 = lp;
            se5000 = se;
        }
    }
    CHECK(gap[0] > gap[1]);
    CHECK(gap[1] > gap[2]);
    CHECK(gap[2] > 0.0);
    CHECK(gap[2] < 0.5 * gap[0]);

    // End-to-end agreement with the closed form at the population parameters.
    CHECK(std::abs(lp5000 - analytic) < 3.0 * se5000);
    CHECK(se5000 < 0.05 * analytic);
}

TEST_CASE("entropic divergence: zero at equality, monotone eps->0 limit") {
    Rng rng(23);
    const int d = 4;
    GaussianState a = random_state(rng, d), b = random_state(rng, d);
    CHECK(sinkhorn_divergence_gaussian(a, a, 0.3) == doctest::Approx(0.0).epsilon(1e-10));

    const double w2 = w2_squared(a, b);
    double prev_gap = std::numeric_limits<double>::infinity();
    for (double eps : {1e-1, 1e-3, 1e-6}) {
        const double gap = std::abs(sinkhorn_divergence_gaussian(a, b, eps) - w2);
        CHECK(gap < prev_gap);
        prev_gap = gap;
    }
    CHECK(prev_gap < 1e-4 * w2);
    CHECK(entropic_w2_gaussian(a, b, 0.0) == w2_squared(a, b));
}

TEST_CASE("entropic cross operator spectrum matches xi = sqrt(eps^2/16 + sigma^4)") {
    for (double eps : {0.05, 0.4, 2.0}) {
        for (double s2 : {0.3, 1.0, 3.6}) {
            const int d = 3;
            MatrixXd cov = s2 * MatrixXd::Identity(d, d);
            MatrixXd m = entropic_cross_operator(cov, cov, eps);
            const double xi = std::sqrt(eps * eps / 16.0 + s2 * s2);
            Eigen::SelfAdjointEigenSolver<MatrixXd> es(m, Eigen::EigenvaluesOnly);
            for (int i = 0; i < d; ++i)
                CHECK(0.25 * eps * (es.eigenvalues()[i] + 1.0) == doctest::Approx(xi).epsilon(1e-12));
        }
    }
}

TEST_CASE("sinkhorn divergence nonnegative on random pairs") {
    Rng rng(29);
    for (int rep = 0; rep < 100; ++rep) {
        const int d = 2 + int(rng.uniform_index(4));
        GaussianState a = random_state(rng, d), b = random_state(rng, d);
        for (double eps : {0.01, 0.1, 1.0}) {
            CHECK(sinkhorn_divergence_gaussian(a, b, eps) >= -1e-9);
        }
    }
}

TEST_CASE("gaussian_score basics and finite-difference oracle") {
    const int d = 2;
    GaussianState std_normal(VectorXd::Zero(d), MatrixXd::Identity(d, d));
    VectorXd x(d);
    x << 0.7, -1.2;
    CHECK((gaussian_score(std_normal, x) + x).norm() < 1e-14);

    Rng rng(31);
    GaussianState g = random_state(rng, d);
    CHECK(gaussian_score(g, g.mean).norm() < 1e-14);

    // finite differences on the log-density (normalization drops out)
    auto logp = [&](const VectorXd& y) {
        return -0.5 * (y - g.mean).dot(g.cov.ldlt().solve(y - g.mean));
    };
    VectorXd fd = oracle::fd_gradient(logp, x, 1e-6);
    CHECK((gaussian_score(g, x) - fd).norm() < 1e-6);

    // batched evaluation agrees with per-point
    MatrixXd pts = rng.normal_matrix(d, 5);
    MatrixXd batch = gaussian_score_batch(g, pts);
    for (int j = 0; j < 5; ++j) CHECK((batch.col(j) - gaussian_score(g, pts.col(j))).norm() < 1e-12);
}

TEST_CASE("gaussian_score loop sums vanish (conservative field)") {
    Rng rng(37);
    const int d = 2;
    GaussianState g = random_state(rng, d);
    for (int rep = 0; rep < 20; ++rep) {
        VectorXd c = rng.normal_vector(d);
        const double w = rng.uniform(0.1, 2.0), h = rng.uniform(0.1, 2.0);
        VectorXd p0 = c, p1 = c, p2 = c, p3 = c;
        p1[0] += w;
        p2[0] += w;
        p2[1] += h;
        p3[1] += h;
        // midpoint rule per edge is exact for an affine field
        auto edge = [&](const VectorXd& u, const VectorXd& v) {
            return gaussian_score(g, 0.5 * (u + v)).dot(v - u);
        };
        const double loop = edge(p0, p1) + edge(p1, p2) + edge(p2, p3) + edge(p3, p0);
        CHECK(std::abs(loop) < 1e-8);
    }
}

TEST_CASE("fit_gaussian moments, flooring, and CLT fluctuation slope") {
    Rng rng(41);
    const int d = 3;

    CHECK_THROWS(fit_gaussian(MatrixXd::Zero(d, d)));  // n < d+1

    MatrixXd same = MatrixXd::Ones(10, d);
    GaussianFit degenerate = fit_gaussian(same);
    CHECK(degenerate.floored);

    GaussianState truth = random_state(rng, d);
    MatrixXd chol = matrix_sqrt_psd(truth.cov);
    const int n = 100000;
    MatrixXd samples(n, d);
    for (int i = 0; i < n; ++i) samples.row(i) = (truth.mean + chol * rng.normal_vector(d)).transpose();
    GaussianFit fit = fit_gaussian(samples);
    CHECK(!fit.floored);
    for (int k = 0; k < d; ++k) {
        const double se = std::sqrt(truth.cov(k, k) / n);
        CHECK(std::abs(fit.state.mean[k] - truth.mean[k]) < 3.0 * se);
        // var of sample variance ~ 2 sigma^4 / n for Gaussians
        const double se_var = std::sqrt(2.0 * truth.cov(k, k) * truth.cov(k, k) / n);
        CHECK(std::abs(fit.state.cov(k, k) - truth.cov(k, k)) < 3.0 * se_var);
    }

    // ||m_n - m|| ~ n^{-1/2}: slope of mean log error over three decades
    std::vector<double> logn, logerr;
    for (int nn : {100, 1000, 10000}) {
        double acc = 0.0;
        const int reps = 300;
        for (int rep = 0; rep < reps; ++rep) {
            VectorXd delta = VectorXd::Zero(d);
            for (int i = 0; i < nn; ++i) delta += chol * rng.normal_vector(d);
            acc += std::log((delta / nn).norm());
        }
        logn.push_back(std::log(double(nn)));
        logerr.push_back(acc / reps);
    }
    const double slope = oracle::ols_slope(logn, logerr);
    CHECK(slope == doctest::Approx(-0.5).epsilon(0.2));  // -0.5 +- 0.1
}
