#pragma once

#include <Eigen/Dense>

namespace pfi {

struct SinkhornOptions {
    double eps = 0.1;            // entropic regularization, > 0
    double marginal_tol = 1e-9;  // stop when max marginal violation drops below
    int max_iters = 10000;
    int unroll_steps = 0;  // 0: envelope gradients at the fixed point; k > 0:
                           // also backpropagate through the last k updates
};

struct SinkhornResult {
    double value = 0.0;  // entropic OT cost W_eps between uniform empiricals
    int iterations = 0;
    double marginal_violation = 0.0;
    bool converged = false;
};

/// Entropic optimal-transport cost between the uniform empirical measures on
/// the rows of a and b, squared-Euclidean ground cost, log-domain iterations.
/// When grad_a / grad_b are given they receive dW/d(positions). Envelope mode
/// differentiates the converged dual; unroll mode additionally propagates
/// through the stored tail of the iteration and reports how far the two
/// disagree via the returned potentials' residual (see tests).
SinkhornResult sinkhorn_cost(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b,
                             const SinkhornOptions& opt, Eigen::MatrixXd* grad_a = nullptr,
                             Eigen::MatrixXd* grad_b = nullptr);

struct SinkhornDivergence {
    double value = 0.0;  // S_eps = W(a,b) - (W(a,a) + W(b,b)) / 2
    SinkhornResult cross, self_a, self_b;
    bool converged() const { return cross.converged && self_a.converged && self_b.converged; }
};

/// Debiased Sinkhorn divergence; grad_a, when given, receives dS/da with the
/// self-term differentiated through both of its argument slots.
SinkhornDivergence sinkhorn_divergence_empirical(const Eigen::MatrixXd& a,
                                                 const Eigen::MatrixXd& b,
                                                 const SinkhornOptions& opt,
                                                 Eigen::MatrixXd* grad_a = nullptr);

}  // namespace pfi
