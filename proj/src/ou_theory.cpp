#include "pfi/ou_theory.hpp"

#include <cmath>
#include <stdexcept>

#include <unsupported/Eigen/MatrixFunctions>

#include "pfi/quadrature.hpp"

namespace pfi {

using Eigen::MatrixXd;
using Eigen::VectorXd;

IsotropicOUSpec::IsotropicOUSpec(double omega_s_, MatrixXd omega_a_, double diffusion_,
                                 double sigma0_sq_, VectorXd m0_, double horizon_, int snapshots_)
    : omega_s(omega_s_),
      omega_a(std::move(omega_a_)),
      diffusion(diffusion_),
      sigma0_sq(sigma0_sq_),
      m0(std::move(m0_)),
      horizon(horizon_),
      snapshots(snapshots_) {
    if (omega_a.rows() != omega_a.cols() || omega_a.rows() != m0.size())
        throw std::invalid_argument("IsotropicOUSpec: omega_a must be d x d matching m0");
    const double scale = std::max(omega_a.cwiseAbs().maxCoeff(), 1.0);
    if ((omega_a + omega_a.transpose()).cwiseAbs().maxCoeff() > 1e-12 * scale)
        throw std::invalid_argument("IsotropicOUSpec: omega_a must be skew-symmetric");
    if (!(omega_s < 0.0)) throw std::invalid_argument("IsotropicOUSpec: omega_s must be negative");
    if (!(sigma0_sq > 0.0)) throw std::invalid_argument("IsotropicOUSpec: sigma0_sq must be positive");
    if (diffusion < 0.0) throw std::invalid_argument("IsotropicOUSpec: diffusion must be nonnegative");
    if (!(horizon > 0.0)) throw std::invalid_argument("IsotropicOUSpec: horizon must be positive");
    if (snapshots < 1) throw std::invalid_argument("IsotropicOUSpec: snapshots must be >= 1");
}

MatrixXd IsotropicOUSpec::omega() const {
    return omega_s * MatrixXd::Identity(dim(), dim()) + omega_a;
}

double IsotropicOUSpec::sigma_sq(double t) const {
    const double e = std::exp(2.0 * omega_s * t);
    return sigma0_sq * e + diffusion / omega_s * (e - 1.0);
}

OuParams IsotropicOUSpec::to_params() const {
    const int d = dim();
    return OuParams(omega(), diffusion * MatrixXd::Identity(d, d),
                    GaussianState(m0, sigma0_sq * MatrixXd::Identity(d, d)));
}

namespace {

// Sort descending and fix each eigenvector's sign by its first component
// exceeding the noise floor, so repeated runs produce identical bases.
PDecomposition decompose_psd(MatrixXd p) {
    p = ((p + p.transpose()) / 2.0).eval();
    Eigen::SelfAdjointEigenSolver<MatrixXd> es(p);
    if (es.info() != Eigen::Success) throw std::runtime_error("compute_P: eigensolver failed");
    const int d = int(p.rows());
    PDecomposition out;
    out.P = p;
    out.gamma = es.eigenvalues().reverse();
    out.U = es.eigenvectors().rowwise().reverse();
    for (int i = 0; i < d; ++i) {
        if (out.gamma[i] < 0.0) out.gamma[i] = 0.0;  // clamp quadrature jitter
        for (int k = 0; k < d; ++k) {
            if (std::abs(out.U(k, i)) > 1e-12) {
                if (out.U(k, i) < 0.0) out.U.col(i) *= -1.0;
                break;
            }
        }
    }
    return out;
}

}  // namespace

PDecomposition compute_P(const MatrixXd& omega, const VectorXd& m0, double horizon, double tol) {
    const auto integrand = [&](double t) -> MatrixXd {
        const VectorXd m = (omega * t).exp() * m0;
        return m * m.transpose();
    };
    return decompose_psd(integrate(integrand, 0.0, horizon, tol));
}

PDecomposition compute_P(const IsotropicOUSpec& spec, double tol) {
    return compute_P(spec.omega(), spec.m0, spec.horizon, tol);
}

namespace {

double xi_of(double sigma_sq, double eps) {
    return std::sqrt(eps * eps / 16.0 + sigma_sq * sigma_sq);
}

}  // namespace

CovarianceWeights covariance_weights(const IsotropicOUSpec& spec, double eps, double tol) {
    if (eps < 0.0) throw std::invalid_argument("covariance_weights: eps must be >= 0");
    CovarianceWeights w;
    w.q = integrate([&](double t) { const double s2 = spec.sigma_sq(t); return s2 * s2 / xi_of(s2, eps); },
                    0.0, spec.horizon, tol);
    w.r = integrate([&](double t) { const double s2 = spec.sigma_sq(t); return s2 / xi_of(s2, eps); },
                    0.0, spec.horizon, tol);
    w.s = integrate([&](double t) { return 1.0 / xi_of(spec.sigma_sq(t), eps); }, 0.0, spec.horizon,
                    tol);
    return w;
}

double continuous_loss(const MatrixXd& omega_hat, const MatrixXd& d_hat,
                       const IsotropicOUSpec& spec, double lambda, double eps) {
    if (lambda < 0.0) throw std::invalid_argument("continuous_loss: lambda must be >= 0");
    const int d = spec.dim();
    const MatrixXd delta = omega_hat - spec.omega();
    const MatrixXd sym = omega_hat + omega_hat.transpose()
                         - 2.0 * spec.omega_s * MatrixXd::Identity(d, d);
    const MatrixXd dd = d_hat - spec.diffusion * MatrixXd::Identity(d, d);
    const PDecomposition pd = compute_P(spec);
    const CovarianceWeights w = covariance_weights(spec, eps);
    return (delta * pd.P * delta.transpose()).trace() + w.q / 4.0 * (sym * sym).trace()
           + w.r * (sym * dd).trace() + w.s * dd.squaredNorm()
           + lambda * spec.horizon * omega_hat.squaredNorm();
}

double continuous_loss(const MatrixXd& omega_hat, const MatrixXd& d_hat, const OuParams& params,
                       double horizon, double lambda, double eps) {
    if (lambda < 0.0) throw std::invalid_argument("continuous_loss: lambda must be >= 0");
    if (!(horizon > 0.0)) throw std::invalid_argument("continuous_loss: horizon must be positive");
    const int d = int(params.omega.rows());
    const MatrixXd delta = omega_hat - params.omega;
    const MatrixXd dd = d_hat - params.diffusion;
    const PDecomposition pd = compute_P(params.omega, params.initial.mean, horizon);

    const auto covariance_term = [&](double t) -> double {
        const GaussianState st = ou_propagate(params, t);
        Eigen::SelfAdjointEigenSolver<MatrixXd> es(st.cov);
        const VectorXd s2 = es.eigenvalues();
        const MatrixXd& w = es.eigenvectors();
        const MatrixXd g = w.transpose() * delta * w;
        const MatrixXd h = w.transpose() * dd * w;
        double acc = 0.0;
        for (int i = 0; i < d; ++i) {
            const double xi_i = xi_of(s2[i], eps);
            for (int p = 0; p < d; ++p) {
                const double xi_p = xi_of(s2[p], eps);
                const double bracket = s2[p] * g(i, p) + s2[i] * g(p, i) + 2.0 * h(i, p);
                const double denom = (xi_i + xi_p) * (xi_i + xi_p);
                acc += xi_i / denom * bracket * bracket;
            }
        }
        return acc;
    };

    return (delta * pd.P * delta.transpose()).trace() + integrate(covariance_term, 0.0, horizon)
           + lambda * horizon * omega_hat.squaredNorm();
}

namespace {

// Shared response map of the first-order optimality condition: given the
// symmetric source S and skew source A (in state coordinates), returns
// sum_ij [lt/qt S'_ij (1 + g_i/lt) + A'_ij (1 + g_i/qt)] / denom_ij u_i u_j^T.
MatrixXd response_sum(const PDecomposition& pd, double lambda_tilde, double q, const MatrixXd& s_src,
                      const MatrixXd& a_src) {
    const int d = int(pd.gamma.size());
    const double qt = q + lambda_tilde;
    const double gamma_plus = 0.5 * (1.0 / lambda_tilde + 1.0 / qt);
    const MatrixXd e = pd.U.transpose() * s_src * pd.U;
    const MatrixXd o = pd.U.transpose() * a_src * pd.U;
    MatrixXd c(d, d);
    for (int i = 0; i < d; ++i) {
        const double gi = pd.gamma[i];
        for (int j = 0; j < d; ++j) {
            const double gj = pd.gamma[j];
            const double num = lambda_tilde / qt * e(i, j) * (1.0 + gi / lambda_tilde)
                               + o(i, j) * (1.0 + gi / qt);
            const double den = gi * gj / (qt * lambda_tilde) + gamma_plus * (gi + gj) + 1.0;
            c(i, j) = num / den;
        }
    }
    return pd.U * c * pd.U.transpose();
}

int numerical_rank(const VectorXd& gamma) {
    const double cutoff = 1e-10 * std::max(gamma.maxCoeff(), 0.0);
    int l = 0;
    while (l < gamma.size() && gamma[l] > cutoff) ++l;
    return l;
}

}  // namespace

MatrixXd analytic_minimizer(const IsotropicOUSpec& spec, double lambda, const MatrixXd& d_hat,
                            double eps) {
    if (!(lambda > 0.0))
        throw std::invalid_argument(
            "analytic_minimizer: lambda must be > 0; use no_regularization_family at lambda = 0");
    const int d = spec.dim();
    const double lt = spec.lambda_tilde_continuous(lambda);
    const PDecomposition pd = compute_P(spec);
    const CovarianceWeights w = covariance_weights(spec, eps);
    const MatrixXd dd = d_hat - spec.diffusion * MatrixXd::Identity(d, d);
    const MatrixXd s_src = spec.omega_s * MatrixXd::Identity(d, d) + (w.r / lt) * dd;
    return spec.omega() - response_sum(pd, lt, w.q, s_src, spec.omega_a);
}

MatrixXd approx_minimizer(const IsotropicOUSpec& spec, double lambda, bool* regime_ok) {
    const double lt = spec.lambda_tilde_continuous(lambda);
    const PDecomposition pd = compute_P(spec);
    if (regime_ok) {
        // Valid when the cutoff sits well inside a spectral gap of P and well
        // below the covariance weight q; 10x separation on both counts.
        const double separation = 10.0;
        const double q = covariance_weights(spec, 0.0).q;
        bool ok = separation * lt < q;
        for (int i = 0; i < pd.gamma.size(); ++i)
            ok = ok && (pd.gamma[i] > separation * lt || separation * pd.gamma[i] < lt);
        *regime_ok = ok;
    }
    const int d = spec.dim();
    MatrixXd proj = MatrixXd::Zero(d, d);
    for (int i = 0; i < d; ++i)
        if (pd.gamma[i] < lt) proj += pd.U.col(i) * pd.U.col(i).transpose();
    return spec.omega() - proj * spec.omega_a * proj;
}

namespace {

// The lambda -> 0 response: full skew removal plus diffusion-mismatch terms
// on ker(P), and the rank-coupled diffusion correction on range(P).
MatrixXd zero_limit_corrections(const IsotropicOUSpec& spec, const PDecomposition& pd,
                                const CovarianceWeights& w, const MatrixXd& d_hat, int rank,
                                bool include_kernel_skew) {
    const int d = spec.dim();
    const MatrixXd dd = d_hat - spec.diffusion * MatrixXd::Identity(d, d);
    MatrixXd ker = MatrixXd::Zero(d, d);
    for (int i = rank; i < d; ++i) ker += pd.U.col(i) * pd.U.col(i).transpose();
    MatrixXd corr = include_kernel_skew ? (ker * (spec.omega_a + w.r / w.q * dd) * ker).eval()
                                        : (w.r / w.q * ker * dd * ker).eval();
    const MatrixXd mu = pd.U.transpose() * dd * pd.U;
    MatrixXd c = MatrixXd::Zero(d, d);
    for (int i = 0; i < rank; ++i) {
        const double gi = pd.gamma[i];
        for (int j = 0; j < d; ++j) {
            const double gj = pd.gamma[j];
            c(i, j) = 2.0 * gi * (w.r / w.q) * mu(i, j) / (2.0 * gi * gj / w.q + gi + gj);
        }
    }
    return corr + pd.U * c * pd.U.transpose();
}

}  // namespace

MatrixXd limit_lambda_zero(const IsotropicOUSpec& spec, const MatrixXd& d_hat, double eps) {
    const PDecomposition pd = compute_P(spec);
    const CovarianceWeights w = covariance_weights(spec, eps);
    return spec.omega()
           - zero_limit_corrections(spec, pd, w, d_hat, numerical_rank(pd.gamma), true);
}

ZeroRegFamily no_regularization_family(const IsotropicOUSpec& spec, const MatrixXd& d_hat,
                                       double eps) {
    const int d = spec.dim();
    const PDecomposition pd = compute_P(spec);
    const CovarianceWeights w = covariance_weights(spec, eps);
    ZeroRegFamily fam;
    fam.rank = numerical_rank(pd.gamma);
    fam.unique = fam.rank >= d - 1;
    fam.particular = spec.omega() - zero_limit_corrections(spec, pd, w, d_hat, fam.rank, false);
    for (int a = fam.rank; a < d; ++a)
        for (int b = a + 1; b < d; ++b)
            fam.kernel_basis.push_back(pd.U.col(a) * pd.U.col(b).transpose()
                                       - pd.U.col(b) * pd.U.col(a).transpose());
    return fam;
}

MatrixXd goe_matrix(int d, Rng& rng) {
    MatrixXd h(d, d);
    for (int i = 0; i < d; ++i) {
        h(i, i) = std::sqrt(2.0) * rng.normal();
        for (int j = i + 1; j < d; ++j) h(i, j) = h(j, i) = rng.normal();
    }
    return h;
}

MatrixXd finite_sample_correction(const IsotropicOUSpec& spec, double lambda, int n, double dt,
                                  Rng& rng, double eps) {
    if (!(lambda > 0.0)) throw std::invalid_argument("finite_sample_correction: lambda must be > 0");
    if (n <= spec.dim()) throw std::invalid_argument("finite_sample_correction: need n > d");
    if (!(dt > 0.0)) throw std::invalid_argument("finite_sample_correction: dt must be positive");
    const int d = spec.dim();
    const double lt = spec.lambda_tilde_continuous(lambda);
    const PDecomposition pd = compute_P(spec);
    const CovarianceWeights w = covariance_weights(spec, eps);

    const double sig0 = std::sqrt(spec.sigma0_sq);
    const double sig_t_sq = spec.sigma_sq(spec.horizon);
    const double sig_t = std::sqrt(sig_t_sq);
    const VectorXd m_t = (spec.omega() * spec.horizon).exp() * spec.m0;

    const MatrixXd y = sig0 * rng.normal_vector(d) * spec.m0.transpose()
                       - sig_t * rng.normal_vector(d) * m_t.transpose();
    const MatrixXd big_w = spec.sigma0_sq * goe_matrix(d, rng) - sig_t_sq * goe_matrix(d, rng);
    const MatrixXd z = (y + big_w / 2.0) / (lt * std::sqrt(double(n)) * dt);
    const MatrixXd z_sym = (z + z.transpose()) / 2.0;
    const MatrixXd z_skew = (z - z.transpose()) / 2.0;
    return -response_sum(pd, lt, w.q, z_sym, z_skew);
}

double variance_estimate(const IsotropicOUSpec& spec, double lambda, int n, double dt, int n_draws,
                         Rng& rng, double eps) {
    if (n_draws < 1) throw std::invalid_argument("variance_estimate: need n_draws >= 1");
    double acc = 0.0;
    for (int k = 0; k < n_draws; ++k) {
        Rng sub = rng.substream("variance-draw", std::uint64_t(k));
        acc += finite_sample_correction(spec, lambda, n, dt, sub, eps).squaredNorm();
    }
    return acc / n_draws;
}

MatrixXd random_skew_matrix(int d, Rng& rng) {
    if (d < 2) throw std::invalid_argument("random_skew_matrix: need d >= 2");
    MatrixXd u(d, d);
    for (int j = 0; j < d; ++j)
        for (int i = 0; i < d; ++i) u(i, j) = rng.uniform();
    MatrixXd a = u - u.transpose();
    // Skew matrices are normal, so the spectral radius equals the largest
    // singular value, read off A^T A without complex arithmetic.
    Eigen::SelfAdjointEigenSolver<MatrixXd> es(a.transpose() * a, Eigen::EigenvaluesOnly);
    const double rho = std::sqrt(es.eigenvalues().maxCoeff());
    if (!(rho > 0.0)) throw std::runtime_error("random_skew_matrix: degenerate draw");
    return a / rho;
}

MatrixXd random_symmetric_psd_matrix(int d, Rng& rng) {
    if (d < 2) throw std::invalid_argument("random_symmetric_psd_matrix: need d >= 2");
    MatrixXd u(d, d);
    for (int j = 0; j < d; ++j)
        for (int i = 0; i < d; ++i) u(i, j) = rng.uniform();
    Eigen::SelfAdjointEigenSolver<MatrixXd> es(u + u.transpose());
    VectorXd e(d);
    for (int i = 0; i < d; ++i) e[i] = rng.uniform(0.9, 1.0);
    e /= e.maxCoeff();
    return es.eigenvectors() * e.asDiagonal() * es.eigenvectors().transpose();
}

TheoryReport theory_report(const IsotropicOUSpec& spec, double lambda, const MatrixXd& d_hat,
                           double eps, int n, double dt, int n_draws, Rng* rng) {
    TheoryReport rep;
    const PDecomposition pd = compute_P(spec);
    const CovarianceWeights w = covariance_weights(spec, eps);
    rep.P = pd.P;
    rep.gamma = pd.gamma;
    rep.eigvecs = pd.U;
    rep.q = w.q;
    rep.r = w.r;
    rep.lambda_tilde = spec.lambda_tilde_continuous(lambda);
    rep.lambda_tilde_discrete = spec.lambda_tilde_discrete(lambda);
    rep.q_tilde = w.q + rep.lambda_tilde;
    rep.Gamma_plus = 0.5 * (1.0 / rep.lambda_tilde + 1.0 / rep.q_tilde);
    rep.Gamma_minus = 0.5 * (1.0 / rep.lambda_tilde - 1.0 / rep.q_tilde);
    rep.omega_hat = lambda > 0.0 ? analytic_minimizer(spec, lambda, d_hat, eps)
                                 : limit_lambda_zero(spec, d_hat, eps);
    rep.bias = (rep.omega_hat - spec.omega()).squaredNorm() / spec.omega().squaredNorm();
    if (n_draws > 0) {
        if (!rng) throw std::invalid_argument("theory_report: n_draws > 0 requires an rng");
        rep.variance = variance_estimate(spec, lambda, n, dt, n_draws, *rng, eps);
    }
    return rep;
}

}  // namespace pfi
