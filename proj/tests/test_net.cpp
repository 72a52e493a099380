#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <fstream>

#include "oracles.hpp"
#include "pfi/net.hpp"
#include "pfi/rng.hpp"

using namespace pfi;
using Eigen::MatrixXd;
using Eigen::VectorXd;

namespace {

Mlp random_net(std::vector<int> dims, std::uint64_t seed) {
    Rng rng(seed);
    Mlp net(std::move(dims), rng);
    // Push weights off the near-zero init so ELU kinks and curvature are
    // exercised on O(1) pre-activations.
    Rng jitter(seed + 1);
    for (int l = 0; l < net.layer_count(); ++l) {
        net.weight(l) += 0.4 * jitter.normal_matrix(net.weight(l).rows(), net.weight(l).cols());
        net.bias(l) += 0.2 * jitter.normal_vector(net.bias(l).size());
    }
    return net;
}

double half_sq_loss(const Mlp& net, const MatrixXd& x, const MatrixXd& target) {
    return 0.5 * (net.forward(x) - target).squaredNorm();
}

double elu(double z) { return z > 0.0 ? z : std::expm1(z); }

}  // namespace

TEST_CASE("forward matches a hand-rolled two-layer evaluation") {
    Rng rng(3);
    Mlp net({2, 3, 1}, rng);
    net.weight(0) << 0.5, -1.0, 1.5, 0.25, -0.75, 2.0;
    net.bias(0) << 0.1, -0.2, 0.3;
    net.weight(1) << 1.0, -2.0, 0.5;
    net.bias(1) << -0.4;

    VectorXd x(2);
    x << 0.7, -1.3;
    VectorXd h(3);
    for (int i = 0; i < 3; ++i)
        h[i] = elu(net.weight(0).row(i).dot(x) + net.bias(0)[i]);
    const double want = net.weight(1).row(0).dot(h) + net.bias(1)[0];

    MatrixXd batch(2, 3);
    batch.col(0) = x;
    batch.col(1) = -x;
    batch.col(2) = 2.0 * x;
    MatrixXd y = net.forward(batch);
    CHECK(y(0, 0) == doctest::Approx(want).epsilon(1e-14));
    CHECK(y(0, 0) == doctest::Approx(net.forward(MatrixXd(x))(0, 0)).epsilon(1e-15));
    CHECK(net.output_dim() == 1);
    CHECK(net.input_dim() == 2);
    CHECK(net.parameter_count() == 2 * 3 + 3 + 3 + 1);
}

TEST_CASE("initialisation is bounded by fan-in and leaves biases at zero") {
    Rng rng(11);
    Mlp net({7, 40, 40, 3}, rng);
    for (int l = 0; l < net.layer_count(); ++l) {
        const double bound = 1.0 / std::sqrt(double(net.weight(l).cols()));
        CHECK(net.weight(l).cwiseAbs().maxCoeff() <= bound + 1e-15);
        CHECK(net.bias(l).cwiseAbs().maxCoeff() == 0.0);
    }
    CHECK(net.weight(0).cwiseAbs().maxCoeff() > 0.0);
}

TEST_CASE("single linear layer reproduces the least-squares gradient") {
    Rng rng(7);
    Mlp net({3, 2}, rng);  // no hidden layer: y = Wx + b
    MatrixXd x = rng.normal_matrix(3, 5);
    MatrixXd target = rng.normal_matrix(2, 5);

    Mlp::Workspace ws;
    MatrixXd y = net.forward(x, ws);
    MlpGrads grads = net.zero_grads();
    MatrixXd xbar = net.backward(ws, y - target, &grads);

    MatrixXd resid = y - target;
    CHECK((grads.w[0] - resid * x.transpose()).cwiseAbs().maxCoeff() < 1e-13);
    CHECK((grads.b[0] - resid.rowwise().sum()).cwiseAbs().maxCoeff() < 1e-13);
    CHECK((xbar - net.weight(0).transpose() * resid).cwiseAbs().maxCoeff() < 1e-13);
}

TEST_CASE("reverse-mode parameter gradient matches finite differences") {
    Mlp net = random_net({4, 6, 5, 3}, 21);
    Rng rng(22);
    MatrixXd x = rng.normal_matrix(4, 7);
    MatrixXd target = rng.normal_matrix(3, 7);

    Mlp::Workspace ws;
    MatrixXd y = net.forward(x, ws);
    MlpGrads grads = net.zero_grads();
    net.backward(ws, y - target, &grads);
    VectorXd g_ad = net.flatten(grads);

    VectorXd g_fd = oracle::fd_gradient(
        [&](const VectorXd& p) {
            Mlp m = net;
            m.unflatten(p);
            return half_sq_loss(m, x, target);
        },
        net.flatten());
    CHECK((g_ad - g_fd).norm() < 1e-5 * (1.0 + g_fd.norm()));
}

TEST_CASE("input adjoint and jvp agree with the explicit Jacobian") {
    Mlp net = random_net({3, 8, 8, 4}, 31);
    Rng rng(32);
    VectorXd x = rng.normal_vector(3);
    MatrixXd jac = net.input_jacobian(x);
    CHECK(jac.rows() == 4);
    CHECK(jac.cols() == 3);

    // FD check of the Jacobian itself.
    for (int j = 0; j < 3; ++j) {
        VectorXd col = oracle::fd_gradient(
            [&](const VectorXd& xi) { return net.forward(MatrixXd(xi))(j % 4, 0); }, x);
        CHECK((jac.row(j % 4).transpose() - col).norm() < 1e-6 * (1.0 + col.norm()));
    }

    // jvp = J v, batched with distinct tangents per column.
    MatrixXd xb(3, 2);
    xb.col(0) = x;
    xb.col(1) = rng.normal_vector(3);
    Mlp::Workspace ws;
    net.forward(xb, ws);
    MatrixXd v = rng.normal_matrix(3, 2);
    Mlp::Tangent tan;
    MatrixXd u = net.jvp(ws, v, tan);
    CHECK((u.col(0) - jac * v.col(0)).norm() < 1e-12);
    CHECK((u.col(1) - net.input_jacobian(xb.col(1)) * v.col(1)).norm() < 1e-12);

    // backward's input adjoint = J^T ybar.
    MatrixXd ybar = rng.normal_matrix(4, 2);
    MatrixXd xbar = net.backward(ws, ybar);
    CHECK((xbar.col(0) - jac.transpose() * ybar.col(0)).norm() < 1e-12);
}

TEST_CASE("joint reverse pass differentiates a functional of value and tangent") {
    // g(theta) = a . y(x) + b . J(x) v at fixed x, v. The parameter gradient
    // needs reverse mode through both strands, including the ELU curvature.
    Mlp net = random_net({3, 6, 6, 2}, 41);
    Rng rng(42);
    MatrixXd x = rng.normal_matrix(3, 4);
    MatrixXd v = rng.normal_matrix(3, 4);
    MatrixXd a = rng.normal_matrix(2, 4);
    MatrixXd b = rng.normal_matrix(2, 4);

    Mlp::Workspace ws;
    net.forward(x, ws);
    Mlp::Tangent tan;
    net.jvp(ws, v, tan);
    MlpGrads grads = net.zero_grads();
    MatrixXd vbar;
    net.backward_dual(ws, tan, a, b, &grads, &vbar);
    VectorXd g_ad = net.flatten(grads);

    VectorXd g_fd = oracle::fd_gradient(
        [&](const VectorXd& p) {
            Mlp m = net;
            m.unflatten(p);
            Mlp::Workspace w2;
            MatrixXd y = m.forward(x, w2);
            Mlp::Tangent t2;
            MatrixXd u = m.jvp(w2, v, t2);
            return (a.array() * y.array()).sum() + (b.array() * u.array()).sum();
        },
        net.flatten());
    CHECK((g_ad - g_fd).norm() < 1e-5 * (1.0 + g_fd.norm()));

    // vbar is the tangent-input adjoint: J^T b, column by column.
    for (int c = 0; c < 4; ++c) {
        MatrixXd jac = net.input_jacobian(x.col(c));
        CHECK((vbar.col(c) - jac.transpose() * b.col(c)).norm() < 1e-12);
    }
}

TEST_CASE("joint reverse pass yields the input gradient of v . J v") {
    // c(x) = v . J(x) v is the curvature term of sliced score matching; its
    // x-gradient is the primal-input adjoint with ybar = 0, ubar = v.
    Mlp net = random_net({4, 7, 7, 4}, 51);
    Rng rng(52);
    VectorXd x = rng.normal_vector(4);
    VectorXd v = rng.normal_vector(4);

    Mlp::Workspace ws;
    net.forward(MatrixXd(x), ws);
    Mlp::Tangent tan;
    net.jvp(ws, MatrixXd(v), tan);
    MatrixXd xbar = net.backward_dual(ws, tan, MatrixXd::Zero(4, 1), MatrixXd(v));

    VectorXd g_fd = oracle::fd_gradient(
        [&](const VectorXd& xi) {
            Mlp::Workspace w2;
            net.forward(MatrixXd(xi), w2);
            Mlp::Tangent t2;
            return v.dot(net.jvp(w2, MatrixXd(v), t2).col(0));
        },
        x, 1e-5);
    CHECK((xbar.col(0) - g_fd).norm() < 1e-5 * (1.0 + g_fd.norm()));
}

TEST_CASE("checkpoints round-trip bit-identically and validate shapes") {
    Mlp net = random_net({3, 5, 2}, 61);
    CheckpointMeta meta;
    meta.kind = "score";
    meta.seed = 77;
    meta.dataset_hash = 0xdeadbeefULL;
    const std::string path = "test_net_checkpoint.json";
    save_checkpoint(net, meta, path);

    CheckpointMeta back;
    Mlp loaded = load_checkpoint(path, &back);
    CHECK(back.kind == meta.kind);
    CHECK(back.seed == meta.seed);
    CHECK(back.dataset_hash == meta.dataset_hash);
    REQUIRE(loaded.dims() == net.dims());
    CHECK((loaded.flatten().array() == net.flatten().array()).all());

    Rng rng(62);
    MatrixXd x = rng.normal_matrix(3, 4);
    CHECK((loaded.forward(x).array() == net.forward(x).array()).all());

    std::ofstream bad(path);
    bad << "{\"kind\":\"score\",\"seed\":0,\"dataset_hash\":0,\"dims\":[3,5,2],"
           "\"weights\":[[[1.0]]],\"biases\":[[0.0]]}";
    bad.close();
    CHECK_THROWS(load_checkpoint(path));
    CHECK_THROWS(load_checkpoint("no_such_checkpoint.json"));
    std::remove(path.c_str());
}

TEST_CASE("adam takes lr-sized first steps and minimises a quadratic") {
    VectorXd c(3);
    c << 1.0, 4.0, 0.25;
    VectorXd p = VectorXd::Ones(3);
    Adam adam;
    adam.lr = 0.05;

    VectorXd p0 = p;
    adam.step(p, VectorXd(c.asDiagonal() * p));
    // Bias-corrected Adam: first update is lr * g / (|g| + eps) = lr * sign(g).
    CHECK((p0 - p - adam.lr * VectorXd::Ones(3)).cwiseAbs().maxCoeff() < 1e-6);

    for (int i = 0; i < 3000; ++i) adam.step(p, VectorXd(c.asDiagonal() * p));
    CHECK(p.cwiseAbs().maxCoeff() < 1e-4);
    CHECK(adam.t == 3001);
}

TEST_CASE("flatten and unflatten are inverse and validate lengths") {
    Mlp net = random_net({2, 4, 3}, 71);
    VectorXd p = net.flatten();
    CHECK(p.size() == net.parameter_count());
    Mlp other = net;
    other.unflatten(VectorXd(2.0 * p));
    CHECK((other.flatten() - 2.0 * p).cwiseAbs().maxCoeff() == 0.0);
    CHECK_THROWS(net.unflatten(VectorXd::Zero(p.size() + 1)));

    MlpGrads g = net.zero_grads();
    CHECK(net.flatten(g).cwiseAbs().maxCoeff() == 0.0);
    CHECK(net.flatten(g).size() == p.size());
}
