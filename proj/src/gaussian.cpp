#include "pfi/gaussian.hpp"

#include <cmath>
#include <stdexcept>

#include <unsupported/Eigen/MatrixFunctions>

#include "pfi/quadrature.hpp"

namespace pfi {

namespace {

void require_square(const Eigen::MatrixXd& m, const char* what) {
    if (m.rows() != m.cols()) throw std::invalid_argument(std::string(what) + ": matrix must be square");
}

void require_symmetric(const Eigen::MatrixXd& m, const char* what, double rel_tol = 1e-12) {
    require_square(m, what);
    const double scale = std::max(1.0, m.cwiseAbs().maxCoeff());
    if ((m - m.transpose()).cwiseAbs().maxCoeff() > rel_tol * scale)
        throw std::invalid_argument(std::string(what) + ": matrix must be symmetric");
}

}  // namespace

GaussianState::GaussianState(Eigen::VectorXd m, Eigen::MatrixXd c) : mean(std::move(m)), cov(std::move(c)) {
    require_symmetric(cov, "GaussianState covariance");
    if (cov.rows() != mean.size())
        throw std::invalid_argument("GaussianState: mean/covariance dimension mismatch");
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(cov, Eigen::EigenvaluesOnly);
    if (es.eigenvalues().minCoeff() <= 0.0)
        throw std::invalid_argument("GaussianState: covariance must be positive definite");
}

OuParams::OuParams(Eigen::MatrixXd omega_, Eigen::MatrixXd diffusion_, GaussianState initial_)
    : omega(std::move(omega_)), diffusion(std::move(diffusion_)), initial(std::move(initial_)) {
    require_square(omega, "OuParams omega");
    require_symmetric(diffusion, "OuParams diffusion");
    if (omega.rows() != diffusion.rows() || omega.rows() != initial.dim())
        throw std::invalid_argument("OuParams: dimension mismatch");
    Eigen::EigenSolver<Eigen::MatrixXd> es(omega, /*computeEigenvectors=*/false);
    if (es.eigenvalues().real().maxCoeff() >= 0.0)
        throw std::invalid_argument("OuParams: omega eigenvalues must have negative real part");
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> ds(diffusion, Eigen::EigenvaluesOnly);
    const double scale = std::max(1.0, diffusion.cwiseAbs().maxCoeff());
    if (ds.eigenvalues().minCoeff() < -1e-12 * scale)
        throw std::invalid_argument("OuParams: diffusion must be positive semidefinite");
}

Eigen::MatrixXd solve_lyapunov(const Eigen::MatrixXd& a, const Eigen::MatrixXd& q) {
    require_square(a, "solve_lyapunov");
    const Eigen::Index d = a.rows();
    // vec(A X + X A^T) = (I (x) A + A (x) I) vec(X)  (column-major vec).
    Eigen::MatrixXd sys = Eigen::MatrixXd::Zero(d * d, d * d);
    for (Eigen::Index j = 0; j < d; ++j) {
        sys.block(j * d, j * d, d, d) += a;
        for (Eigen::Index k = 0; k < d; ++k) sys.block(j * d, k * d, d, d).diagonal().array() += a(j, k);
    }
    Eigen::VectorXd rhs = Eigen::Map<const Eigen::VectorXd>(q.data(), d * d);
    Eigen::VectorXd x = sys.partialPivLu().solve(-rhs);
    Eigen::MatrixXd out = Eigen::Map<const Eigen::MatrixXd>(x.data(), d, d);
    return 0.5 * (out + out.transpose());  // symmetrize roundoff
}

Eigen::MatrixXd ou_stationary_cov(const Eigen::MatrixXd& omega, const Eigen::MatrixXd& diffusion) {
    return solve_lyapunov(omega, 2.0 * diffusion);
}

GaussianState ou_propagate(const OuParams& p, double t, PropagationMethod method) {
    if (t < 0.0) throw std::invalid_argument("ou_propagate: t must be >= 0");
    const Eigen::MatrixXd et = (p.omega * t).exp();
    Eigen::VectorXd mean = et * p.initial.mean;
    Eigen::MatrixXd noise;
    if (method == PropagationMethod::lyapunov) {
        // \int_0^t e^{Omega s} 2D e^{Omega^T s} ds = S_inf - e^{Omega t} S_inf e^{Omega^T t}
        // with Omega S_inf + S_inf Omega^T + 2D = 0.
        const Eigen::MatrixXd sinf = ou_stationary_cov(p.omega, p.diffusion);
        noise = sinf - et * sinf * et.transpose();
    } else {
        noise = integrate(
            [&](double s) -> Eigen::MatrixXd {
                const Eigen::MatrixXd es = (p.omega * s).exp();
                return 2.0 * es * p.diffusion * es.transpose();
            },
            0.0, t, 1e-10);
    }
    Eigen::MatrixXd cov = et * p.initial.cov * et.transpose() + noise;
    cov = 0.5 * (cov + cov.transpose());
    return GaussianState(std::move(mean), std::move(cov));
}

Eigen::MatrixXd matrix_sqrt_psd(const Eigen::MatrixXd& m) {
    require_symmetric(m, "matrix_sqrt_psd", 1e-10);
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(0.5 * (m + m.transpose()));
    const double top = es.eigenvalues().cwiseAbs().maxCoeff();
    if (es.eigenvalues().minCoeff() < -1e-9 * std::max(top, 1.0))
        throw std::invalid_argument("matrix_sqrt_psd: matrix has a negative eigenvalue");
    Eigen::VectorXd lam = es.eigenvalues().cwiseMax(0.0).cwiseSqrt();
    return es.eigenvectors() * lam.asDiagonal() * es.eigenvectors().transpose();
}

double w2_squared(const GaussianState& a, const GaussianState& b) {
    if (a.dim() != b.dim()) throw std::invalid_argument("w2_squared: dimension mismatch");
    const Eigen::MatrixXd rb = matrix_sqrt_psd(b.cov);
    const Eigen::MatrixXd cross = matrix_sqrt_psd(rb * a.cov * rb);
    const double val = (a.mean - b.mean).squaredNorm() + a.cov.trace() + b.cov.trace() - 2.0 * cross.trace();
    return std::max(val, 0.0);
}

Eigen::MatrixXd entropic_cross_operator(const Eigen::MatrixXd& cov_a, const Eigen::MatrixXd& cov_b,
                                        double eps) {
    if (eps <= 0.0) throw std::invalid_argument("entropic_cross_operator: eps must be positive");
    const Eigen::Index d = cov_a.rows();
    const Eigen::MatrixXd rb = matrix_sqrt_psd(cov_b);
    const Eigen::MatrixXd inner =
        Eigen::MatrixXd::Identity(d, d) + (16.0 / (eps * eps)) * rb * cov_a * rb;
    return matrix_sqrt_psd(inner) - Eigen::MatrixXd::Identity(d, d);
}

double entropic_w2_gaussian(const GaussianState& a, const GaussianState& b, double eps) {
    if (a.dim() != b.dim()) throw std::invalid_argument("entropic_w2_gaussian: dimension mismatch");
    if (eps < 0.0) throw std::invalid_argument("entropic_w2_gaussian: eps must be >= 0");
    if (eps == 0.0) return w2_squared(a, b);
    const Eigen::Index d = a.dim();
    const Eigen::MatrixXd meps = entropic_cross_operator(a.cov, b.cov, eps);
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(Eigen::MatrixXd::Identity(d, d) + 0.5 * meps,
                                                      Eigen::EigenvaluesOnly);
    const double logdet = es.eigenvalues().array().log().sum();
    return (a.mean - b.mean).squaredNorm() + a.cov.trace() + b.cov.trace() +
           0.5 * eps * (logdet - meps.trace());
}

double sinkhorn_divergence_gaussian(const GaussianState& a, const GaussianState& b, double eps) {
    if (eps == 0.0) return w2_squared(a, b);
    return entropic_w2_gaussian(a, b, eps) -
           0.5 * (entropic_w2_gaussian(a, a, eps) + entropic_w2_gaussian(b, b, eps));
}

Eigen::VectorXd gaussian_score(const GaussianState& g, const Eigen::VectorXd& x) {
    return g.cov.ldlt().solve(g.mean - x);
}

Eigen::MatrixXd gaussian_score_batch(const GaussianState& g, const Eigen::MatrixXd& x) {
    return g.cov.ldlt().solve((-x).colwise() + g.mean);
}

GaussianFit fit_gaussian(const Eigen::MatrixXd& samples) {
    const Eigen::Index n = samples.rows(), d = samples.cols();
    if (n < d + 1) throw std::invalid_argument("fit_gaussian: need at least d+1 samples");
    Eigen::VectorXd mean = samples.colwise().mean();
    Eigen::MatrixXd centered = samples.rowwise() - mean.transpose();
    Eigen::MatrixXd cov = centered.transpose() * centered / double(n - 1);
    cov = 0.5 * (cov + cov.transpose());

    GaussianFit fit;
    // Trace-zero clouds (all points identical) fall back to an absolute floor
    // so the fit is still a valid state, just flagged.
    const double floor = 1e-12 * (cov.trace() > 0.0 ? cov.trace() : 1.0);
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(cov);
    if (es.eigenvalues().minCoeff() < floor) {
        Eigen::VectorXd lam = es.eigenvalues().cwiseMax(floor);
        cov = es.eigenvectors() * lam.asDiagonal() * es.eigenvectors().transpose();
        fit.floored = true;
        fit.floor_value = floor;
    }
    fit.state = GaussianState(std::move(mean), std::move(cov));
    return fit;
}

}  // namespace pfi
