#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "oracles.hpp"
#include "pfi/force.hpp"
#include "pfi/gaussian.hpp"
#include "pfi/ou_theory.hpp"
#include "pfi/rng.hpp"

using namespace pfi;
using Eigen::MatrixXd;
using Eigen::VectorXd;

namespace {

Mlp random_net(std::vector<int> dims, std::uint64_t seed, double wscale = 0.4,
               double bscale = 0.2) {
    Rng rng(seed);
    Mlp net(std::move(dims), rng);
    Rng jitter(seed + 1);
    for (int l = 0; l < net.layer_count(); ++l) {
        net.weight(l) += wscale * jitter.normal_matrix(net.weight(l).rows(), net.weight(l).cols());
        net.bias(l) += bscale * jitter.normal_vector(net.bias(l).size());
    }
    return net;
}

/// Cloud (rows) whose sample mean and 1/(n-1) covariance equal `mean`, `cov`
/// exactly: whiten a centered draw, then color with the Cholesky factor.
/// Affine maps preserve the property, so pushes of these clouds have
/// analytically known fitted moments.
MatrixXd exact_moment_cloud(int n, const VectorXd& mean, const MatrixXd& cov,
                            std::uint64_t seed) {
    const int d = int(mean.size());
    Rng rng(seed);
    MatrixXd g = rng.normal_matrix(n, d);
    const Eigen::RowVectorXd mu = g.colwise().mean();
    g.rowwise() -= mu;
    const MatrixXd c = g.transpose() * g / double(n - 1);
    Eigen::SelfAdjointEigenSolver<MatrixXd> es(c);
    MatrixXd z = g * es.operatorInverseSqrt();
    const Eigen::LLT<MatrixXd> llt(cov);
    MatrixXd x = z * MatrixXd(llt.matrixL()).transpose();
    const Eigen::RowVectorXd shift = mean.transpose();
    x.rowwise() += shift;
    return x;
}

MatrixXd sampled_cloud(Rng& rng, int n, const VectorXd& mean, const MatrixXd& cov) {
    const int d = int(mean.size());
    const Eigen::LLT<MatrixXd> llt(cov);
    MatrixXd x = rng.normal_matrix(n, d) * MatrixXd(llt.matrixL()).transpose();
    const Eigen::RowVectorXd shift = mean.transpose();
    x.rowwise() += shift;
    return x;
}

ScoreFunction ou_score(const OuParams& params) {
    const int d = int(params.omega.rows());
    return score_from_gaussian_path(d, [params](double t) { return ou_propagate(params, t); });
}

OuParams make_ou() {
    OuParams p;
    p.omega.resize(2, 2);
    p.omega << -1.0, 0.6, -0.4, -0.8;
    p.diffusion.resize(2, 2);
    p.diffusion << 0.5, 0.1, 0.1, 0.4;
    p.initial.mean = VectorXd(2);
    p.initial.mean << 1.0, -0.5;
    p.initial.cov.resize(2, 2);
    p.initial.cov << 0.6, 0.15, 0.15, 0.5;
    return p;
}

VectorXd flatten_rows(const MatrixXd& m) {
    return Eigen::Map<const VectorXd>(m.data(), m.size());
}

MatrixXd unflatten_rows(const VectorXd& v, int rows, int cols) {
    return Eigen::Map<const MatrixXd>(v.data(), rows, cols);
}

double loss_with_params(const InferenceProblem& prob, const VectorXd& theta) {
    InferenceProblem p = prob;
    p.force.set_parameters(theta);
    return total_loss(p).total;
}

/// Reverse-mode gradient vs central differences, relative Frobenius error.
double grad_rel_error(const InferenceProblem& prob) {
    VectorXd g;
    total_loss(prob, &g);
    const VectorXd fd = oracle::fd_gradient(
        [&](const VectorXd& th) { return loss_with_params(prob, th); }, prob.force.parameters());
    return (g - fd).norm() / std::max(fd.norm(), 1e-12);
}

SnapshotDataset toy_dataset(int n, std::uint64_t seed, double shift) {
    SnapshotDataset ds;
    ds.network = "toy";
    ds.species = {"a", "b"};
    ds.times = VectorXd(3);
    ds.times << 0.0, 0.3, 0.55;
    Rng rng(seed);
    for (int k = 0; k < 3; ++k) {
        MatrixXd c = 0.25 * rng.normal_matrix(n, 2);
        c.array() += shift;
        ds.snapshots.push_back(c);
    }
    ds.space = SpaceTag::concentration;
    return ds;
}

}  // namespace

TEST_CASE("pf_rhs with deterministic noise is the bare drift") {
    ForceModel f = ForceModel::neural(random_net({2, 5, 2}, 31), 0.7);
    const NoiseModel nm = NoiseModel::deterministic();
    VectorXd x(2);
    x << 0.8, -0.4;
    const VectorXd rhs = pf_rhs(f, nm, ScoreFunction{}, x, 0.2);
    const VectorXd want = f.force_at(x, 0.2);
    CHECK((rhs - want).norm() < 1e-14);
    // raw minus degradation, spelled out
    f.degradation = 0.0;
    const VectorXd raw = f.force_at(x, 0.2);
    CHECK((want - (raw - 0.7 * x)).norm() < 1e-14);
}

TEST_CASE("pf_rhs reproduces the analytic OU probability-flow field") {
    const OuParams p = make_ou();
    const ForceModel f = ForceModel::linear(p.omega);
    const NoiseModel nm = NoiseModel::constant_tensor(p.diffusion);
    const ScoreFunction sc = ou_score(p);
    const double t = 0.37;
    const GaussianState g = ou_propagate(p, t);
    const Eigen::LLT<MatrixXd> llt(g.cov);
    Rng rng(5);
    for (int rep = 0; rep < 4; ++rep) {
        const VectorXd x = g.mean + rng.normal_vector(2);
        const VectorXd want = p.omega * x + p.diffusion * llt.solve(x - g.mean);
        const VectorXd got = pf_rhs(f, nm, sc, x, t);
        CHECK((got - want).norm() < 1e-10 * (1.0 + want.norm()));
    }
}

TEST_CASE("diffusion priors follow their definitions") {
    const ForceModel f = ForceModel::linear((MatrixXd(2, 2) << 0.9, 0.1, -0.2, 0.7).finished());
    VectorXd x(2);
    x << 1.2, 0.5;

    SUBCASE("additive") {
        const MatrixXd d = noise_diffusion(NoiseModel::additive(0.8), f, x, 0.0);
        CHECK((d - 0.32 * MatrixXd::Identity(2, 2)).norm() < 1e-15);
    }
    SUBCASE("sqrt-state clamps negative coordinates") {
        VectorXd y(2);
        y << 0.5, -0.3;
        const MatrixXd d = noise_diffusion(NoiseModel::sqrt_state(0.8), f, y, 0.0);
        CHECK(d(0, 0) == doctest::Approx(0.32 * 0.5).epsilon(1e-14));
        CHECK(d(1, 1) == 0.0);
        CHECK(d(0, 1) == 0.0);
    }
    SUBCASE("chemical Langevin, counts and concentration units") {
        const NoiseModel counts = NoiseModel::cle(1.4, 0.6, 1.0, false);
        const MatrixXd dc = noise_diffusion(counts, f, x, 0.0);
        const VectorXd raw = f.raw(x, 0.0);
        for (int i = 0; i < 2; ++i)
            CHECK(dc(i, i) ==
                  doctest::Approx(0.5 * (1.4 * raw[i] + 0.6 * x[i])).epsilon(1e-13));
        const NoiseModel conc = NoiseModel::cle(1.4, 0.6, 5.0, true);
        const MatrixXd dv = noise_diffusion(conc, f, x, 0.0);
        CHECK((dv - dc / 5.0).norm() < 1e-13);
    }
    SUBCASE("chemical Langevin clamps where production minus decay is negative") {
        const ForceModel neg = ForceModel::linear((MatrixXd(2, 2) << -2.0, 0.0, 0.0, 0.5).finished());
        const MatrixXd d = noise_diffusion(NoiseModel::cle(1.0, 0.0, 1.0, false), neg, x, 0.0);
        CHECK(d(0, 0) == 0.0);
        CHECK(d(1, 1) > 0.0);
    }
    SUBCASE("constant tensor ignores the state") {
        MatrixXd dh(2, 2);
        dh << 0.4, 0.1, 0.1, 0.3;
        const NoiseModel nm = NoiseModel::constant_tensor(dh);
        CHECK((noise_diffusion(nm, f, x, 0.0) - dh).norm() == 0.0);
        CHECK((noise_diffusion(nm, f, VectorXd::Zero(2), 0.0) - dh).norm() == 0.0);
    }
}

TEST_CASE("divergence of the diffusion matches finite differences") {
    SUBCASE("scalar chemical Langevin, linear force, by hand") {
        const ForceModel f = ForceModel::linear((MatrixXd(1, 1) << 0.9).finished());
        const NoiseModel nm = NoiseModel::cle(1.4, 0.6, 1.0, false);
        VectorXd x(1);
        x << 2.0;
        // D = (1.4 * 0.9 x + 0.6 x) / 2, so dD/dx = (1.4 * 0.9 + 0.6) / 2
        const double want = 0.5 * (1.4 * 0.9 + 0.6);
        CHECK(noise_divergence(nm, f, x, 0.0)[0] == doctest::Approx(want).epsilon(1e-14));
        CHECK(noise_divergence(nm, f, x, 0.0, true)[0] == doctest::Approx(want).epsilon(1e-8));
    }
    SUBCASE("scalar chemical Langevin, small net") {
        Mlp net = random_net({1, 5, 1}, 17);
        net.bias(net.layer_count() - 1).array() += 2.0;
        const ForceModel f = ForceModel::neural(net);
        const NoiseModel nm = NoiseModel::cle(1.3, 0.5, 1.0, false);
        VectorXd x(1);
        x << 1.1;
        REQUIRE(noise_diffusion(nm, f, x, 0.0)(0, 0) > 0.2);
        const double exact = noise_divergence(nm, f, x, 0.0)[0];
        const double fd = noise_divergence(nm, f, x, 0.0, true)[0];
        CHECK(exact == doctest::Approx(fd).epsilon(1e-6));
    }
    SUBCASE("three species, both unit conventions") {
        Mlp net = random_net({3, 8, 3}, 23);
        net.bias(net.layer_count() - 1).array() += 2.0;
        const ForceModel f = ForceModel::neural(net);
        VectorXd x(3);
        x << 1.2, 0.8, 1.5;
        for (const bool conc : {false, true}) {
            const NoiseModel nm = NoiseModel::cle(1.3, 0.5, conc ? 4.0 : 1.0, conc);
            REQUIRE(noise_diffusion(nm, f, x, 0.0).diagonal().minCoeff() > 0.05);
            const VectorXd exact = noise_divergence(nm, f, x, 0.0);
            const VectorXd fd = noise_divergence(nm, f, x, 0.0, true);
            CHECK((exact - fd).norm() < 1e-6 * (1.0 + exact.norm()));
        }
    }
    SUBCASE("sqrt-state divergence is piecewise constant") {
        const ForceModel f = ForceModel::linear(MatrixXd::Identity(2, 2));
        const NoiseModel nm = NoiseModel::sqrt_state(0.8);
        VectorXd x(2);
        x << 0.5, -0.3;
        const VectorXd div = noise_divergence(nm, f, x, 0.0);
        CHECK(div[0] == doctest::Approx(0.32).epsilon(1e-14));
        CHECK(div[1] == 0.0);
        CHECK((div - noise_divergence(nm, f, x, 0.0, true)).norm() < 1e-8);
    }
    SUBCASE("state-independent priors have zero divergence") {
        const ForceModel f = ForceModel::linear(MatrixXd::Identity(2, 2));
        VectorXd x(2);
        x << 0.3, -0.9;
        CHECK(noise_divergence(NoiseModel::additive(0.7), f, x, 0.0).norm() == 0.0);
        MatrixXd dh(2, 2);
        dh << 0.4, 0.1, 0.1, 0.3;
        CHECK(noise_divergence(NoiseModel::constant_tensor(dh), f, x, 0.0).norm() == 0.0);
    }
}

TEST_CASE("score adapters agree with their closed forms") {
    SUBCASE("gaussian path") {
        const OuParams p = make_ou();
        const ScoreFunction sc = ou_score(p);
        const double t = 0.6;
        const GaussianState g = ou_propagate(p, t);
        Rng rng(9);
        MatrixXd x = rng.normal_matrix(2, 3);
        const MatrixXd s = sc.eval(x, t);
        for (int c = 0; c < 3; ++c)
            CHECK((s.col(c) - gaussian_score(g, x.col(c))).norm() < 1e-13);

        const MatrixXd adj = rng.normal_matrix(2, 3);
        const MatrixXd pulled = sc.vjp(x, t, adj);
        for (int c = 0; c < 3; ++c) {
            const VectorXd a = adj.col(c);
            const VectorXd fd = oracle::fd_gradient(
                [&](const VectorXd& xe) {
                    return a.dot(sc.eval(xe, t).col(0));
                },
                VectorXd(x.col(c)));
            CHECK((pulled.col(c) - fd).norm() < 1e-6 * (1.0 + fd.norm()));
        }
    }
    SUBCASE("score net over state and time") {
        Mlp net = random_net({3, 7, 2}, 41);
        const ScoreFunction sc = score_from_net(net);
        Rng rng(10);
        MatrixXd x = rng.normal_matrix(2, 3);
        MatrixXd aug(3, 3);
        aug.topRows(2) = x;
        aug.row(2).setConstant(0.45);
        CHECK((sc.eval(x, 0.45) - net.forward(aug)).norm() == 0.0);

        const MatrixXd adj = rng.normal_matrix(2, 3);
        const MatrixXd pulled = sc.vjp(x, 0.45, adj);
        for (int c = 0; c < 3; ++c) {
            const VectorXd a = adj.col(c);
            const VectorXd fd = oracle::fd_gradient(
                [&](const VectorXd& xe) {
                    return a.dot(sc.eval(xe, 0.45).col(0));
                },
                VectorXd(x.col(c)));
            CHECK((pulled.col(c) - fd).norm() < 1e-6 * (1.0 + fd.norm()));
        }
    }
    SUBCASE("input width must be state plus time") {
        CHECK_THROWS_AS(score_from_net(random_net({3, 7, 3}, 2)), std::invalid_argument);
    }
}

TEST_CASE("single Euler step on a linear model is the exact affine update") {
    const OuParams p = make_ou();
    const ForceModel f = ForceModel::linear(p.omega);
    const NoiseModel nm = NoiseModel::constant_tensor(p.diffusion);
    const ScoreFunction sc = ou_score(p);
    const double dt = 0.15;
    Rng rng(13);
    const MatrixXd cloud = sampled_cloud(rng, 6, p.initial.mean, p.initial.cov);
    const MatrixXd out = push_samples(f, nm, sc, cloud, 0.0, dt, 1, Integrator::Euler);
    const Eigen::LLT<MatrixXd> llt(p.initial.cov);
    for (int i = 0; i < cloud.rows(); ++i) {
        const VectorXd x = cloud.row(i).transpose();
        const VectorXd want =
            x + dt * (p.omega * x + p.diffusion * llt.solve(x - p.initial.mean));
        CHECK((out.row(i).transpose() - want).norm() < 1e-12 * (1.0 + want.norm()));
    }
}

TEST_CASE("zero drift and zero noise push is the identity") {
    const ForceModel f = ForceModel::linear(MatrixXd::Zero(2, 2));
    Rng rng(14);
    const MatrixXd cloud = rng.normal_matrix(5, 2);
    const MatrixXd out =
        push_samples(f, NoiseModel::deterministic(), ScoreFunction{}, cloud, 0.0, 1.0, 7);
    CHECK((out - cloud).norm() == 0.0);
}

TEST_CASE("RK4 push transports OU marginals onto the propagated moments") {
    const OuParams p = make_ou();
    const ForceModel f = ForceModel::linear(p.omega);
    const NoiseModel nm = NoiseModel::constant_tensor(p.diffusion);
    const ScoreFunction sc = ou_score(p);
    const double t1 = 0.7;
    const GaussianState want = ou_propagate(p, t1);

    SUBCASE("exact-moment cloud pins the affine map to integrator accuracy") {
        const MatrixXd cloud = exact_moment_cloud(40, p.initial.mean, p.initial.cov, 77);
        const MatrixXd out = push_samples(f, nm, sc, cloud, 0.0, t1, 64);
        const GaussianFit fit = fit_gaussian(out);
        CHECK((fit.state.mean - want.mean).norm() < 1e-6);
        CHECK((fit.state.cov - want.cov).norm() < 1e-6);
    }
    SUBCASE("sampled cloud lands within sampling error") {
        const int n = 4000;
        Rng rng(78);
        const MatrixXd cloud = sampled_cloud(rng, n, p.initial.mean, p.initial.cov);
        const MatrixXd out = push_samples(f, nm, sc, cloud, 0.0, t1, 64);
        const GaussianFit fit = fit_gaussian(out);
        for (int i = 0; i < 2; ++i) {
            const double se = std::sqrt(want.cov(i, i) / n);
            CHECK(std::abs(fit.state.mean[i] - want.mean[i]) < 4.0 * se);
            for (int j = 0; j < 2; ++j) {
                const double sec = std::sqrt(
                    (want.cov(i, i) * want.cov(j, j) + want.cov(i, j) * want.cov(i, j)) /
                    (n - 1.0));
                CHECK(std::abs(fit.state.cov(i, j) - want.cov(i, j)) < 4.0 * sec);
            }
        }
    }
}

TEST_CASE("autonomous pushes are invariant to time translation") {
    Rng rng(15);
    const MatrixXd cloud = rng.normal_matrix(6, 2);
    const NoiseModel nm = NoiseModel::deterministic();
    const ForceModel f = ForceModel::neural(random_net({2, 6, 2}, 51), 0.2);
    const MatrixXd a = push_samples(f, nm, ScoreFunction{}, cloud, 0.0, 0.5, 3);
    const MatrixXd b = push_samples(f, nm, ScoreFunction{}, cloud, 7.25, 7.75, 3);
    CHECK((a - b).norm() == 0.0);

    const ForceModel ft = ForceModel::neural_time(random_net({3, 6, 2}, 52), 0.2);
    const MatrixXd at = push_samples(ft, nm, ScoreFunction{}, cloud, 0.0, 0.5, 3);
    const MatrixXd bt = push_samples(ft, nm, ScoreFunction{}, cloud, 7.25, 7.75, 3);
    CHECK((at - bt).norm() > 1e-10);
}

TEST_CASE("push aborts on divergent states naming the sample") {
    // RK4 amplification is polynomial in h * Omega, so the matrix has to be
    // genuinely absurd before a substep overflows.
    const ForceModel f = ForceModel::linear(1e200 * MatrixXd::Identity(2, 2));
    Rng rng(16);
    const MatrixXd cloud = rng.normal_matrix(3, 2).array() + 2.0;
    try {
        push_samples(f, NoiseModel::deterministic(), ScoreFunction{}, cloud, 0.0, 1.0, 1);
        FAIL("expected a runtime_error");
    } catch (const std::runtime_error& e) {
        CHECK(std::string(e.what()).find("sample") != std::string::npos);
    }
}

TEST_CASE("push and rhs validation") {
    const ForceModel f = ForceModel::linear(MatrixXd::Identity(2, 2));
    Rng rng(18);
    const MatrixXd cloud = rng.normal_matrix(4, 2);
    const NoiseModel add = NoiseModel::additive(0.5);
    const ScoreFunction none{};
    const OuParams p = make_ou();
    const ScoreFunction good = ou_score(p);
    CHECK_THROWS_AS(push_samples(f, add, good, cloud, 0.0, 1.0, 0), std::invalid_argument);
    CHECK_THROWS_AS(push_samples(f, add, good, cloud, 1.0, 1.0, 4), std::invalid_argument);
    CHECK_THROWS_AS(push_samples(f, add, none, cloud, 0.0, 1.0, 4), std::invalid_argument);
    CHECK_THROWS_AS(push_samples(f, add, good, MatrixXd(0, 2), 0.0, 1.0, 4),
                    std::invalid_argument);
    CHECK_THROWS_AS(push_samples(f, add, good, rng.normal_matrix(4, 3), 0.0, 1.0, 4),
                    std::invalid_argument);
    CHECK_THROWS_AS(NoiseModel::cle(1.0, 0.0, 0.0, true), std::invalid_argument);
    CHECK_THROWS_AS(NoiseModel::additive(-0.1), std::invalid_argument);
    CHECK_THROWS_AS(NoiseModel::constant_tensor((MatrixXd(2, 2) << 1, 0.5, 0, 1).finished()),
                    std::invalid_argument);
}

TEST_CASE("empirical Gaussian W2 matches moment fits") {
    Rng rng(21);
    VectorXd m = VectorXd::Zero(3);
    const MatrixXd a = sampled_cloud(rng, 40, m, MatrixXd::Identity(3, 3));
    CHECK(gaussian_w2_empirical(a, a) < 1e-10);

    VectorXd m2(3);
    m2 << 0.5, -1.0, 0.75;
    const MatrixXd b = sampled_cloud(rng, 50, m2, MatrixXd::Identity(3, 3));
    const double v = gaussian_w2_empirical(a, b);
    CHECK(v == doctest::Approx(w2_squared(fit_gaussian(a).state, fit_gaussian(b).state))
                   .epsilon(1e-14));

    SUBCASE("separated isotropic clouds recover the squared mean shift") {
        const int n = 100000;
        const MatrixXd big_a = sampled_cloud(rng, n, m, MatrixXd::Identity(3, 3));
        const MatrixXd big_b = sampled_cloud(rng, n, m2, MatrixXd::Identity(3, 3));
        const double got = gaussian_w2_empirical(big_a, big_b);
        CHECK(std::abs(got - m2.squaredNorm()) < 0.05);
    }
    SUBCASE("position gradient matches finite differences") {
        const MatrixXd sa = sampled_cloud(rng, 10, m2, MatrixXd::Identity(3, 3));
        const MatrixXd sb = sampled_cloud(rng, 12, m, MatrixXd::Identity(3, 3));
        MatrixXd ga;
        gaussian_w2_empirical(sa, sb, nullptr, &ga);
        const VectorXd fd = oracle::fd_gradient(
            [&](const VectorXd& v2) {
                return gaussian_w2_empirical(unflatten_rows(v2, 10, 3), sb);
            },
            flatten_rows(sa));
        CHECK((flatten_rows(ga) - fd).norm() < 1e-6 * (1.0 + fd.norm()));
    }
    SUBCASE("needs more samples than dimensions") {
        CHECK_THROWS_AS(gaussian_w2_empirical(rng.normal_matrix(3, 3), rng.normal_matrix(8, 3)),
                        std::invalid_argument);
    }
}

TEST_CASE("Jacobian penalty") {
    Rng rng(25);
    const MatrixXd cloud = rng.normal_matrix(12, 2);

    SUBCASE("linear force gives the exact Frobenius norm, cloud-independent") {
        MatrixXd om(2, 2);
        om << 0.8, -0.3, 0.5, 1.1;
        const ForceModel f = ForceModel::linear(om, 0.4);
        const MatrixXd shifted = om - 0.4 * MatrixXd::Identity(2, 2);
        Rng r1(1), r2(2);
        const double p1 = jacobian_penalty_cloud(f, cloud, 0, r1);
        const double p2 = jacobian_penalty_cloud(f, 5.0 * cloud, 0, r2);
        CHECK(p1 == doctest::Approx(shifted.squaredNorm()).epsilon(1e-14));
        CHECK(p1 == p2);

        VectorXd gp;
        Rng r3(3);
        jacobian_penalty_cloud(f, cloud, 0, r3, 0.0, &gp);
        const MatrixXd want = 2.0 * shifted;
        CHECK((gp - flatten_rows(want)).norm() < 1e-13);
    }
    SUBCASE("constant output has zero penalty") {
        Mlp net = random_net({2, 4, 2}, 61);
        net.weight(net.layer_count() - 1).setZero();
        const ForceModel f = ForceModel::neural(net);
        Rng r(4);
        CHECK(jacobian_penalty_cloud(f, cloud, 0, r) == 0.0);
    }
    SUBCASE("neural force matches a finite-difference Jacobian") {
        const ForceModel f = ForceModel::neural(random_net({2, 6, 2}, 62), 0.3);
        const double h = 1e-5;
        double want = 0.0;
        for (int i = 0; i < cloud.rows(); ++i) {
            const VectorXd x = cloud.row(i).transpose();
            MatrixXd jac(2, 2);
            for (int j = 0; j < 2; ++j) {
                VectorXd xp = x, xm = x;
                xp[j] += h;
                xm[j] -= h;
                jac.col(j) = (f.force_at(xp, 0.0) - f.force_at(xm, 0.0)) / (2.0 * h);
            }
            want += jac.squaredNorm();
        }
        want /= double(cloud.rows());
        Rng r(5);
        CHECK(jacobian_penalty_cloud(f, cloud, 0, r) == doctest::Approx(want).epsilon(1e-4));

        VectorXd gp;
        Rng r2(6);
        jacobian_penalty_cloud(f, cloud, 0, r2, 0.0, &gp);
        const VectorXd fd = oracle::fd_gradient(
            [&](const VectorXd& th) {
                ForceModel ft = f;
                ft.set_parameters(th);
                Rng r3(7);
                return jacobian_penalty_cloud(ft, cloud, 0, r3);
            },
            f.parameters());
        CHECK((gp - fd).norm() < 1e-5 * (1.0 + fd.norm()));
    }
    SUBCASE("potential force: value only, gradients refused") {
        const ForceModel f = ForceModel::potential(random_net({2, 5, 1}, 63), 0.2);
        const double h = 1e-5;
        double want = 0.0;
        for (int i = 0; i < 4; ++i) {
            const VectorXd x = cloud.row(i).transpose();
            MatrixXd jac(2, 2);
            for (int j = 0; j < 2; ++j) {
                VectorXd xp = x, xm = x;
                xp[j] += h;
                xm[j] -= h;
                jac.col(j) = (f.force_at(xp, 0.0) - f.force_at(xm, 0.0)) / (2.0 * h);
            }
            want += jac.squaredNorm();
        }
        want /= 4.0;
        Rng r(8);
        CHECK(jacobian_penalty_cloud(f, cloud.topRows(4), 0, r) ==
              doctest::Approx(want).epsilon(1e-5));
        VectorXd gp;
        Rng r2(9);
        CHECK_THROWS_AS(jacobian_penalty_cloud(f, cloud.topRows(4), 0, r2, 0.0, &gp),
                        std::invalid_argument);
    }
    SUBCASE("time-integrated penalty uses right-endpoint quadrature") {
        MatrixXd om(2, 2);
        om << 0.8, -0.3, 0.5, 1.1;
        const ForceModel f = ForceModel::linear(om);
        std::vector<MatrixXd> clouds = {cloud, cloud, cloud};
        VectorXd times(3);
        times << 0.0, 0.5, 1.25;
        Rng r(10);
        CHECK(jacobian_penalty(f, clouds, times, 0, r) ==
              doctest::Approx(1.25 * om.squaredNorm()).epsilon(1e-13));
        VectorXd bad(3);
        bad << 0.0, 0.5, 0.5;
        Rng r2(11);
        CHECK_THROWS_AS(jacobian_penalty(f, clouds, bad, 0, r2), std::invalid_argument);
    }
}

TEST_CASE("inferred interaction structure") {
    Rng rng(27);
    const MatrixXd cloud = rng.normal_matrix(9, 2);

    SUBCASE("linear force returns its matrix, degradation excluded") {
        MatrixXd om(2, 2);
        om << -0.8, 0.3, 0.6, -1.1;
        const ForceModel f = ForceModel::linear(om, 0.5);
        CHECK((infer_jacobian(f, cloud) - om).norm() < 1e-13);
    }
    SUBCASE("neural force matches mean finite-difference Jacobians of the raw part") {
        const ForceModel f = ForceModel::neural(random_net({2, 6, 2}, 64), 0.5);
        const double h = 1e-5;
        MatrixXd want = MatrixXd::Zero(2, 2);
        for (int i = 0; i < cloud.rows(); ++i) {
            const VectorXd x = cloud.row(i).transpose();
            for (int j = 0; j < 2; ++j) {
                VectorXd xp = x, xm = x;
                xp[j] += h;
                xm[j] -= h;
                want.col(j) += (f.raw(xp, 0.0) - f.raw(xm, 0.0)) / (2.0 * h);
            }
        }
        want /= double(cloud.rows());
        CHECK((infer_jacobian(f, cloud) - want).norm() < 1e-6);
    }
    SUBCASE("potential force yields a symmetric matrix") {
        const ForceModel f = ForceModel::potential(random_net({2, 6, 1}, 65));
        const MatrixXd j = infer_jacobian(f, cloud);
        CHECK((j - j.transpose()).cwiseAbs().maxCoeff() < 1e-8);
    }
}

TEST_CASE("total loss bookkeeping: restarts from data, totals add up") {
    SnapshotDataset ds = toy_dataset(16, 333, 0.0);
    InferenceProblem prob;
    prob.data = ds;
    prob.force = ForceModel::neural(random_net({2, 5, 2}, 71), 0.1);
    prob.noise = NoiseModel::additive(0.5);
    prob.score = score_from_net(random_net({3, 6, 2}, 72, 0.3, 0.1));
    prob.config.lambda = 0.07;
    prob.config.steps = 2;
    prob.config.reg_samples = 0;

    const LossBreakdown lb = total_loss(prob);
    REQUIRE(lb.distances.size() == 2);

    double sum = 0.0;
    for (int k = 0; k < 2; ++k) {
        const MatrixXd pushed =
            push_samples(prob.force, prob.noise, prob.score, ds.snapshots[std::size_t(k)],
                         ds.times[k], ds.times[k + 1], prob.config.steps);
        const double want = gaussian_w2_empirical(pushed, ds.snapshots[std::size_t(k + 1)]);
        CHECK(lb.distances[std::size_t(k)] == doctest::Approx(want).epsilon(1e-14));
        sum += lb.distances[std::size_t(k)];
    }
    Rng r(12);
    const double pen = 0.3 * jacobian_penalty_cloud(prob.force, ds.snapshots[1], 0, r, ds.times[1]) +
                       0.25 * jacobian_penalty_cloud(prob.force, ds.snapshots[2], 0, r, ds.times[2]);
    CHECK(lb.penalty == doctest::Approx(pen).epsilon(1e-13));
    CHECK(lb.total == doctest::Approx(sum + 0.07 * pen).epsilon(1e-13));
    CHECK(lb.diffusion_clamped == 0);
    CHECK(lb.covariance_floored == 0);
}

TEST_CASE("total loss counts clamped diffusion entries") {
    SnapshotDataset ds = toy_dataset(12, 433, 1.5);
    Mlp net = random_net({2, 5, 2}, 73);
    net.bias(net.layer_count() - 1).array() -= 4.0;  // production net pinned negative
    InferenceProblem prob;
    prob.data = ds;
    prob.force = ForceModel::neural(net);
    prob.noise = NoiseModel::cle(1.0, 0.0, 1.0, false);
    prob.score = score_from_net(random_net({3, 6, 2}, 74, 0.3, 0.1));
    prob.config.steps = 2;
    prob.config.lambda = 0.0;
    const LossBreakdown lb = total_loss(prob);
    CHECK(lb.diffusion_clamped > 0);
}

TEST_CASE("total loss gradients match finite differences across priors and models") {
    // Positive data with margin so the chemical-Langevin clamp never flips
    // inside the finite-difference stencil.
    SnapshotDataset pos = toy_dataset(8, 501, 1.5);
    SnapshotDataset free_ds = toy_dataset(8, 502, 0.0);
    const ScoreFunction sc = score_from_net(random_net({3, 6, 2}, 503, 0.3, 0.1));

    Mlp prod = random_net({2, 6, 2}, 504);
    prod.bias(prod.layer_count() - 1).array() += 2.0;

    InferenceProblem base;
    base.score = sc;
    base.config.steps = 2;
    base.config.reg_samples = 0;

    SUBCASE("chemical Langevin + neural force + W2 + penalty") {
        InferenceProblem p = base;
        p.data = pos;
        p.force = ForceModel::neural(prod, 0.4);
        p.noise = NoiseModel::cle(1.0, 0.4, 3.0, true);
        p.config.lambda = 0.05;
        REQUIRE(total_loss(p).diffusion_clamped == 0);
        const double rel = grad_rel_error(p);
        MESSAGE("cle+neural rel grad err = " << rel);
        CHECK(rel < 1e-3);
    }
    SUBCASE("chemical Langevin + neural force, Euler") {
        InferenceProblem p = base;
        p.data = pos;
        p.force = ForceModel::neural(prod, 0.4);
        p.noise = NoiseModel::cle(1.0, 0.4, 3.0, true);
        p.config.lambda = 0.05;
        p.config.integrator = Integrator::Euler;
        p.config.steps = 3;
        const double rel = grad_rel_error(p);
        MESSAGE("cle+euler rel grad err = " << rel);
        CHECK(rel < 1e-3);
    }
    SUBCASE("chemical Langevin + linear force") {
        InferenceProblem p = base;
        p.data = pos;
        MatrixXd om(2, 2);
        om << 0.9, -0.1, 0.2, 0.8;  // production part stays positive on the data
        p.force = ForceModel::linear(om, 0.4);
        p.noise = NoiseModel::cle(1.0, 0.4, 3.0, true);
        p.config.lambda = 0.05;
        REQUIRE(total_loss(p).diffusion_clamped == 0);
        const double rel = grad_rel_error(p);
        MESSAGE("cle+linear rel grad err = " << rel);
        CHECK(rel < 5e-4);
    }
    SUBCASE("additive noise + neural force") {
        InferenceProblem p = base;
        p.data = free_ds;
        p.force = ForceModel::neural(random_net({2, 6, 2}, 505), 0.1);
        p.noise = NoiseModel::additive(0.5);
        p.config.lambda = 0.08;
        CHECK(grad_rel_error(p) < 1e-4);
    }
    SUBCASE("sqrt-state noise + neural force") {
        InferenceProblem p = base;
        p.data = pos;
        p.force = ForceModel::neural(prod, 0.2);
        p.noise = NoiseModel::sqrt_state(0.6);
        const LossBreakdown lb = total_loss(p);
        REQUIRE(lb.diffusion_clamped == 0);  // all states positive, no kinks
        CHECK(grad_rel_error(p) < 1e-4);
    }
    SUBCASE("constant tensor + neural force") {
        InferenceProblem p = base;
        p.data = free_ds;
        p.force = ForceModel::neural(random_net({2, 6, 2}, 506), 0.1);
        MatrixXd dh(2, 2);
        dh << 0.4, 0.1, 0.1, 0.3;
        p.noise = NoiseModel::constant_tensor(dh);
        CHECK(grad_rel_error(p) < 1e-4);
    }
    SUBCASE("constant tensor + potential force") {
        InferenceProblem p = base;
        p.data = free_ds;
        p.force = ForceModel::potential(random_net({2, 6, 1}, 507), 0.1);
        MatrixXd dh(2, 2);
        dh << 0.4, 0.1, 0.1, 0.3;
        p.noise = NoiseModel::constant_tensor(dh);
        p.config.lambda = 0.0;
        const double rel = grad_rel_error(p);
        MESSAGE("potential rel grad err = " << rel);
        CHECK(rel < 1e-4);
    }
    SUBCASE("additive noise + time-dependent force") {
        InferenceProblem p = base;
        p.data = free_ds;
        p.force = ForceModel::neural_time(random_net({3, 6, 2}, 508), 0.1);
        p.noise = NoiseModel::additive(0.5);
        p.config.lambda = 0.08;
        CHECK(grad_rel_error(p) < 1e-4);
    }
    SUBCASE("entropic distance, envelope gradients") {
        InferenceProblem p = base;
        p.data = free_ds;
        p.force = ForceModel::neural(random_net({2, 6, 2}, 509), 0.1);
        p.noise = NoiseModel::additive(0.5);
        p.config.distance = DistanceKind::Sinkhorn;
        p.config.sinkhorn_eps = 0.5;
        p.config.lambda = 0.05;
        const double rel = grad_rel_error(p);
        MESSAGE("sinkhorn envelope rel grad err = " << rel);
        CHECK(rel < 1e-3);
    }
    SUBCASE("entropic distance, unrolled gradients") {
        InferenceProblem p = base;
        p.data = free_ds;
        p.force = ForceModel::neural(random_net({2, 6, 2}, 509), 0.1);
        p.noise = NoiseModel::additive(0.5);
        p.config.distance = DistanceKind::Sinkhorn;
        p.config.sinkhorn_eps = 0.5;
        p.config.sinkhorn_unroll = 10;
        CHECK(grad_rel_error(p) < 1e-3);
    }
}

TEST_CASE("total loss validation") {
    SnapshotDataset ds = toy_dataset(8, 601, 0.0);
    InferenceProblem p;
    p.data = ds;
    p.force = ForceModel::neural(random_net({2, 5, 2}, 602), 0.1);
    p.noise = NoiseModel::additive(0.5);
    p.score = score_from_net(random_net({3, 5, 2}, 603, 0.3, 0.1));

    SUBCASE("shape and config errors") {
        InferenceProblem q = p;
        q.data.snapshots.resize(1);
        q.data.times = VectorXd::Zero(1);
        CHECK_THROWS_AS(total_loss(q), std::invalid_argument);
        q = p;
        q.data.times = VectorXd::Zero(2);
        CHECK_THROWS_AS(total_loss(q), std::invalid_argument);
        q = p;
        q.data.times[2] = q.data.times[1];
        CHECK_THROWS_AS(total_loss(q), std::invalid_argument);
        q = p;
        q.config.steps = 0;
        CHECK_THROWS_AS(total_loss(q), std::invalid_argument);
        q = p;
        q.config.lambda = -0.1;
        CHECK_THROWS_AS(total_loss(q), std::invalid_argument);
        q = p;
        q.config.batch_size = 2;  // must exceed dim for a covariance fit
        CHECK_THROWS_AS(total_loss(q), std::invalid_argument);
        q = p;
        q.score = ScoreFunction{};
        CHECK_THROWS_AS(total_loss(q), std::invalid_argument);
    }
    SUBCASE("potential force gradient guards") {
        InferenceProblem q = p;
        q.force = ForceModel::potential(random_net({2, 5, 1}, 604));
        q.noise = NoiseModel::cle(1.0, 0.0, 1.0, false);
        VectorXd g;
        CHECK_THROWS_AS(total_loss(q, &g), std::invalid_argument);
        q.noise = NoiseModel::additive(0.5);
        q.config.lambda = 0.1;
        CHECK_THROWS_AS(total_loss(q, &g), std::invalid_argument);
        q.config.lambda = 0.0;
        CHECK_NOTHROW(total_loss(q, &g));
    }
    SUBCASE("trainer config errors") {
        InferenceProblem q = p;
        q.config.learning_rate = 0.0;
        CHECK_THROWS_AS(train_force(q), std::invalid_argument);
        q = p;
        q.config.max_steps = 0;
        CHECK_THROWS_AS(train_force(q), std::invalid_argument);
    }
}

TEST_CASE("training aborts to the last good iterate on divergence") {
    SnapshotDataset ds;
    ds.network = "blowup";
    ds.species = {"x"};
    ds.times = VectorXd(2);
    ds.times << 0.0, 1.0;
    Rng rng(701);
    ds.snapshots.push_back(rng.normal_matrix(8, 1));
    ds.snapshots.push_back(rng.normal_matrix(8, 1));

    InferenceProblem p;
    p.data = ds;
    p.force = ForceModel::linear((MatrixXd(1, 1) << 1e200).finished());
    p.noise = NoiseModel::deterministic();
    p.config.max_steps = 50;
    p.config.learning_rate = 1e-3;

    CHECK_THROWS_AS(total_loss(p), std::runtime_error);

    const FitResult fit = train_force(p);
    CHECK(fit.report.aborted);
    CHECK(fit.report.stop_reason == "nan_abort");
    CHECK(fit.report.steps_taken == 0);
    CHECK(fit.force.parameters()[0] == 1e200);
}

TEST_CASE("discrete minimizers approach the continuous-theory minimizer as snapshots refine") {
    MatrixXd oa(2, 2);
    oa << 0.0, 0.7, -0.7, 0.0;
    VectorXd m0(2);
    m0 << 1.2, -0.6;
    const double horizon = 0.656;
    const double lam_c = 0.25;
    const MatrixXd dhat = 0.4 * MatrixXd::Identity(2, 2);
    const IsotropicOUSpec ispec(-1.0, oa, 0.4, 0.5, m0, horizon, 16);
    const MatrixXd omega_star = analytic_minimizer(ispec, lam_c, dhat);
    const OuParams params = ispec.to_params();
    const ScoreFunction sc = ou_score(params);

    std::vector<double> gaps;
    for (const int K : {4, 8, 16}) {
        const double dt = horizon / K;
        SnapshotDataset ds;
        ds.network = "ou";
        ds.species = {"x1", "x2"};
        ds.space = SpaceTag::concentration;
        ds.times = VectorXd(K + 1);
        for (int k = 0; k <= K; ++k) {
            ds.times[k] = dt * k;
            const GaussianState g = ou_propagate(params, ds.times[k]);
            ds.snapshots.push_back(
                exact_moment_cloud(32, g.mean, g.cov, 900 + 10 * std::uint64_t(K) + k));
        }
        InferenceProblem prob;
        prob.data = ds;
        prob.score = sc;
        prob.noise = NoiseModel::constant_tensor(dhat);
        prob.force = ForceModel::linear(MatrixXd::Zero(2, 2));
        // Discrete regularization lambda * dt keeps lambda-tilde = lambda_c * T
        // fixed across refinements.
        prob.config.lambda = lam_c * dt;
        prob.config.steps = 2;
        prob.config.reg_samples = 0;
        prob.config.stop_rel_change = 1e-12;
        prob.config.stop_window = 100;
        for (const double lr : {2e-2, 2e-3, 3e-4}) {
            prob.config.learning_rate = lr;
            prob.config.max_steps = 2500;
            FitResult fit = train_force(prob);
            REQUIRE(!fit.report.aborted);
            REQUIRE(fit.report.steps_taken > 0);
            prob.force = fit.force;
        }
        gaps.push_back((prob.force.omega - omega_star).norm());
        MESSAGE("K = " << K << " gap = " << gaps.back());
    }
    CHECK(gaps[1] < gaps[0]);
    CHECK(gaps[2] < gaps[1]);
    CHECK(gaps[2] < 0.6 * gaps[0]);
}

TEST_CASE("stationary skew perturbations of the drift are indistinguishable") {
    // Stationary isotropic OU: N(0, s2 I) with s2 = D / |omega_s|. Adding
    // K Sigma0^{-1} x with K skew leaves every transported marginal fixed;
    // a symmetric perturbation of equal size does not.
    MatrixXd omega(2, 2);
    omega << -1.0, 0.8, -0.8, -1.0;
    const MatrixXd dmat = 0.5 * MatrixXd::Identity(2, 2);
    const MatrixXd sig0 = ou_stationary_cov(omega, dmat);
    REQUIRE((sig0 - 0.5 * MatrixXd::Identity(2, 2)).norm() < 1e-12);

    OuParams params;
    params.omega = omega;
    params.diffusion = dmat;
    params.initial.mean = VectorXd::Zero(2);
    params.initial.cov = sig0;
    const ScoreFunction sc = ou_score(params);

    MatrixXd skew(2, 2), sym(2, 2);
    skew << 0.0, 0.5, -0.5, 0.0;
    sym << 0.0, 0.5, 0.5, 0.0;
    const MatrixXd sig0_inv = sig0.inverse();

    const auto loss_for = [&](const MatrixXd& om, const std::vector<MatrixXd>& clouds,
                              const VectorXd& times) {
        InferenceProblem prob;
        prob.data.network = "stationary";
        prob.data.species = {"x1", "x2"};
        prob.data.space = SpaceTag::concentration;
        prob.data.times = times;
        prob.data.snapshots = clouds;
        prob.score = sc;
        prob.noise = NoiseModel::constant_tensor(dmat);
        prob.force = ForceModel::linear(om);
        prob.config.steps = 4;
        prob.config.lambda = 0.0;
        return total_loss(prob).total;
    };

    const int K = 5;
    VectorXd times(K + 1);
    for (int k = 0; k <= K; ++k) times[k] = 0.06 * k;

    SUBCASE("exact-moment clouds: both losses vanish, symmetric control does not") {
        std::vector<MatrixXd> clouds;
        for (int k = 0; k <= K; ++k)
            clouds.push_back(exact_moment_cloud(64, params.initial.mean, sig0, 1200 + k));
        const double l_base = loss_for(omega, clouds, times);
        const double l_skew = loss_for(omega + skew * sig0_inv, clouds, times);
        const double l_sym = loss_for(omega + sym * sig0_inv, clouds, times);
        MESSAGE("exact: base " << l_base << " skew " << l_skew << " sym " << l_sym);
        CHECK(l_base < 1e-10);
        CHECK(l_skew < 1e-10);
        CHECK(l_sym > 1e-3);
    }
    SUBCASE("sampled clouds: the gap hides inside Monte-Carlo noise") {
        Rng rng(1300);
        std::vector<MatrixXd> clouds;
        for (int k = 0; k <= K; ++k)
            clouds.push_back(sampled_cloud(rng, 1500, params.initial.mean, sig0));
        const double l_base = loss_for(omega, clouds, times);
        const double l_skew = loss_for(omega + skew * sig0_inv, clouds, times);
        const double l_sym = loss_for(omega + sym * sig0_inv, clouds, times);
        MESSAGE("sampled: base " << l_base << " skew " << l_skew << " sym " << l_sym);
        CHECK(std::abs(l_skew - l_base) < 0.3 * (l_sym - l_base));
        CHECK(l_sym > 2.0 * l_base);
    }
}
