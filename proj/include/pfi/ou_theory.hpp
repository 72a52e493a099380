#pragma once

#include <vector>

#include <Eigen/Dense>

#include "pfi/gaussian.hpp"
#include "pfi/rng.hpp"

namespace pfi {

/// Isotropic Ornstein-Uhlenbeck process: drift (omega_s I + omega_a) x with
/// omega_a skew-symmetric, diffusion tensor D I, initial law N(m0, sigma0_sq I).
/// omega_s is stored signed (< 0); figure captions quote its magnitude.
struct IsotropicOUSpec {
    double omega_s;
    Eigen::MatrixXd omega_a;
    double diffusion;
    double sigma0_sq;
    Eigen::VectorXd m0;
    double horizon;
    int snapshots;

    IsotropicOUSpec(double omega_s, Eigen::MatrixXd omega_a, double diffusion, double sigma0_sq,
                    Eigen::VectorXd m0, double horizon, int snapshots);

    int dim() const { return int(m0.size()); }
    Eigen::MatrixXd omega() const;

    /// Marginal variance at time t; the skew part drops out of the covariance
    /// evolution, leaving the scalar ODE d(s2)/dt = 2 omega_s s2 + 2 D.
    double sigma_sq(double t) const;

    /// Regularization strength in natural units: lambda * T in the
    /// continuous-time formulas, lambda * K when comparing discrete sweeps.
    double lambda_tilde_continuous(double lambda) const { return lambda * horizon; }
    double lambda_tilde_discrete(double lambda) const { return lambda * snapshots; }

    OuParams to_params() const;
};

/// Mean-path Gram matrix P = int_0^T m_t m_t^T dt with its eigensystem,
/// eigenvalues descending, eigenvector signs canonicalized (first nonzero
/// component positive) so reports are reproducible.
struct PDecomposition {
    Eigen::MatrixXd P;
    Eigen::VectorXd gamma;
    Eigen::MatrixXd U;
};

PDecomposition compute_P(const Eigen::MatrixXd& omega, const Eigen::VectorXd& m0, double horizon,
                         double tol = 1e-10);
PDecomposition compute_P(const IsotropicOUSpec& spec, double tol = 1e-10);

/// Time-integrated covariance weights of the entropic loss:
///   q = int sigma_t^4 / xi_t,  r = int sigma_t^2 / xi_t,  s = int 1 / xi_t,
/// with xi_t = sqrt(eps^2/16 + sigma_t^4). At eps = 0 these reduce to
/// q = int sigma_t^2, r = T, s = int 1/sigma_t^2.
struct CovarianceWeights {
    double q, r, s;
};

CovarianceWeights covariance_weights(const IsotropicOUSpec& spec, double eps, double tol = 1e-10);

/// Population loss for an isotropic process (fast path via q, r, s).
double continuous_loss(const Eigen::MatrixXd& omega_hat, const Eigen::MatrixXd& d_hat,
                       const IsotropicOUSpec& spec, double lambda, double eps = 0.0);

/// Population loss for a general OU process, by time quadrature over the
/// eigenpairs of Sigma_t. Agrees with the isotropic path on isotropic input.
double continuous_loss(const Eigen::MatrixXd& omega_hat, const Eigen::MatrixXd& d_hat,
                       const OuParams& params, double horizon, double lambda, double eps = 0.0);

/// Closed-form global minimizer of the loss for lambda > 0.
Eigen::MatrixXd analytic_minimizer(const IsotropicOUSpec& spec, double lambda,
                                   const Eigen::MatrixXd& d_hat, double eps = 0.0);

/// Spectral-cutoff approximation: Omega - Q Omega_a Q with Q the projector
/// onto eigenvectors of P with gamma_i < lambda_tilde. Valid when
/// lambda_tilde << q and |gamma_i / lambda_tilde - 1| >> 1 for all i;
/// `regime_ok`, if given, reports that check instead of failing.
Eigen::MatrixXd approx_minimizer(const IsotropicOUSpec& spec, double lambda,
                                 bool* regime_ok = nullptr);

/// lambda -> 0+ limit of the minimizer at assumed diffusion d_hat.
Eigen::MatrixXd limit_lambda_zero(const IsotropicOUSpec& spec, const Eigen::MatrixXd& d_hat,
                                  double eps = 0.0);

/// Minimizer family at lambda = 0: particular solution plus the kernel of
/// skew-symmetric matrices K with K P = 0. Unique iff rank(P) >= d - 1.
struct ZeroRegFamily {
    Eigen::MatrixXd particular;
    std::vector<Eigen::MatrixXd> kernel_basis;
    int rank;
    bool unique;
};

ZeroRegFamily no_regularization_family(const IsotropicOUSpec& spec, const Eigen::MatrixXd& d_hat,
                                       double eps = 0.0);

/// Symmetric Gaussian ensemble draw: Var(H_ii) = 2, Var(H_ij) = 1 for i != j.
Eigen::MatrixXd goe_matrix(int d, Rng& rng);

/// One draw of the first-order finite-sample correction to the minimizer:
/// the linear response of the optimality condition to sampling noise in the
/// endpoint moments, Z = (Y + W/2) / (lambda_tilde sqrt(n) dt).
Eigen::MatrixXd finite_sample_correction(const IsotropicOUSpec& spec, double lambda, int n,
                                         double dt, Rng& rng, double eps = 0.0);

/// Mean of |correction|_F^2 over n_draws independent draws.
double variance_estimate(const IsotropicOUSpec& spec, double lambda, int n, double dt,
                         int n_draws, Rng& rng, double eps = 0.0);

/// Random skew-symmetric matrix with unit spectral radius, and random
/// symmetric PSD matrix with unit maximum eigenvalue (eigenbasis of U + U^T,
/// eigenvalues uniform in [0.9, 1] rescaled by their maximum).
Eigen::MatrixXd random_skew_matrix(int d, Rng& rng);
Eigen::MatrixXd random_symmetric_psd_matrix(int d, Rng& rng);

/// Everything the analyze subcommand serializes. lambda_tilde is the
/// continuous-formula value lambda * T (consistent with q_tilde and the
/// Gammas); lambda_tilde_discrete = lambda * K is carried for reporting.
struct TheoryReport {
    Eigen::MatrixXd P;
    Eigen::VectorXd gamma;
    Eigen::MatrixXd eigvecs;
    double q = 0.0;
    double r = 0.0;
    double q_tilde = 0.0;
    double lambda_tilde = 0.0;
    double lambda_tilde_discrete = 0.0;
    double Gamma_plus = 0.0;
    double Gamma_minus = 0.0;
    Eigen::MatrixXd omega_hat;
    double bias = 0.0;
    double variance = 0.0;
};

/// Assembles the full report; variance is computed only when n_draws > 0.
TheoryReport theory_report(const IsotropicOUSpec& spec, double lambda,
                           const Eigen::MatrixXd& d_hat, double eps = 0.0, int n = 0,
                           double dt = 0.0, int n_draws = 0, Rng* rng = nullptr);

}  // namespace pfi
