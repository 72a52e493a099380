#pragma once

#include <Eigen/Dense>

namespace pfi {

/// Mean/covariance pair. Covariance must be symmetric positive definite.
struct GaussianState {
    Eigen::VectorXd mean;
    Eigen::MatrixXd cov;

    GaussianState() = default;
    GaussianState(Eigen::VectorXd m, Eigen::MatrixXd c);

    Eigen::Index dim() const { return mean.size(); }
};

/// Linear drift/diffusion process dx = Omega x dt + sqrt(2 D) dW started from
/// a Gaussian. Omega eigenvalues must have strictly negative real part; D is
/// symmetric PSD. Both are validated at construction.
struct OuParams {
    Eigen::MatrixXd omega;
    Eigen::MatrixXd diffusion;
    GaussianState initial;

    OuParams() = default;
    OuParams(Eigen::MatrixXd omega_, Eigen::MatrixXd diffusion_, GaussianState initial_);

    Eigen::Index dim() const { return omega.rows(); }
};

enum class PropagationMethod {
    lyapunov,    // stationary Lyapunov solve + exponential correction (exact)
    quadrature,  // adaptive integration of the noise convolution (tol 1e-10)
};

/// Marginal law at time t >= 0:
///   m_t = e^{Omega t} m_0,
///   Sigma_t = e^{Omega t} Sigma_0 e^{Omega^T t} + \int_0^t e^{Omega s} 2D e^{Omega^T s} ds.
GaussianState ou_propagate(const OuParams& p, double t,
                           PropagationMethod method = PropagationMethod::lyapunov);

/// Stationary covariance: unique solution of Omega X + X Omega^T + 2D = 0.
Eigen::MatrixXd ou_stationary_cov(const Eigen::MatrixXd& omega, const Eigen::MatrixXd& diffusion);

/// Solve A X + X A^T = -Q via the Kronecker-sum linear system.
Eigen::MatrixXd solve_lyapunov(const Eigen::MatrixXd& a, const Eigen::MatrixXd& q);

/// Symmetric PSD principal square root (eigendecomposition; tiny negative
/// eigenvalues from roundoff are clamped to zero).
Eigen::MatrixXd matrix_sqrt_psd(const Eigen::MatrixXd& m);

/// Squared 2-Wasserstein distance between Gaussians (Bures form):
///   |m_a - m_b|^2 + tr(S_a) + tr(S_b) - 2 tr((S_b^{1/2} S_a S_b^{1/2})^{1/2}).
double w2_squared(const GaussianState& a, const GaussianState& b);

/// Spectral operator of the entropic cross term:
///   M_eps = -I + (I + (16/eps^2) S_b^{1/2} S_a S_b^{1/2})^{1/2}.
/// Exposed so its spectrum can be checked independently.
Eigen::MatrixXd entropic_cross_operator(const Eigen::MatrixXd& cov_a, const Eigen::MatrixXd& cov_b,
                                        double eps);

/// Entropy-regularized squared W2 between Gaussians:
///   |m_a - m_b|^2 + tr(S_a) + tr(S_b)
///     + (eps/2) [log det(I + M_eps/2) - tr(M_eps)].
/// eps == 0 routes to w2_squared exactly.
double entropic_w2_gaussian(const GaussianState& a, const GaussianState& b, double eps);

/// Debiased divergence: W_eps(a,b) - (W_eps(a,a) + W_eps(b,b)) / 2.
double sinkhorn_divergence_gaussian(const GaussianState& a, const GaussianState& b, double eps);

/// grad_x log N(x; m, S) = -S^{-1} (x - m).
Eigen::VectorXd gaussian_score(const GaussianState& g, const Eigen::VectorXd& x);

/// Batched version; columns of x are evaluation points.
Eigen::MatrixXd gaussian_score_batch(const GaussianState& g, const Eigen::MatrixXd& x);

struct GaussianFit {
    GaussianState state;
    bool floored = false;     // true when covariance eigenvalues were lifted
    double floor_value = 0.0; // the eigenvalue floor that was applied
};

/// Sample mean and unbiased (1/(n-1)) covariance from rows-as-samples data.
/// Requires n >= d + 1. Covariance eigenvalues below 1e-12 * trace are lifted
/// to that floor and the fit is flagged.
GaussianFit fit_gaussian(const Eigen::MatrixXd& samples);

}  // namespace pfi
