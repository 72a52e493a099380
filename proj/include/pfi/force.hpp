#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "pfi/dataset.hpp"
#include "pfi/gaussian.hpp"
#include "pfi/net.hpp"
#include "pfi/rng.hpp"

namespace pfi {

/// Score field s(x, t) with a vector-Jacobian product for reverse mode.
/// eval takes states as columns; vjp returns the input adjoint of
/// <adj, s(x, t)> with the same shape as x. The score itself is frozen:
/// only the x dependence is differentiated.
struct ScoreFunction {
    int dim = 0;
    std::function<Eigen::MatrixXd(const Eigen::MatrixXd&, double)> eval;
    std::function<Eigen::MatrixXd(const Eigen::MatrixXd&, double, const Eigen::MatrixXd&)> vjp;

    bool valid() const { return dim > 0 && eval && vjp; }
};

/// Wraps a trained score net over [x; t]; the time-channel adjoint is
/// dropped since time is never differentiated.
ScoreFunction score_from_net(Mlp net);

/// Closed-form Gaussian score along a mean/covariance path t -> N(m_t, S_t).
ScoreFunction score_from_gaussian_path(int dim, std::function<GaussianState(double)> path);

enum class ForceKind { Linear, Neural, NeuralTimeDependent, PotentialGradient };

/// Drift model f(x) = raw(x) - degradation * x. The raw part carries the
/// trainable parameters: Omega x for Linear, the net output for the neural
/// kinds, -grad Psi for PotentialGradient (scalar-output net). degradation
/// is fixed data, zero unless the system has first-order decay.
struct ForceModel {
    ForceKind kind = ForceKind::Linear;
    Eigen::MatrixXd omega;  // Linear
    Mlp net;                // the other kinds
    double degradation = 0.0;

    static ForceModel linear(Eigen::MatrixXd omega_hat, double ell = 0.0);
    static ForceModel neural(Mlp net, double ell = 0.0);
    static ForceModel neural_time(Mlp net, double ell = 0.0);  // net input [x; t]
    static ForceModel potential(Mlp net, double ell = 0.0);    // scalar output

    int dim() const;
    bool time_dependent() const { return kind == ForceKind::NeuralTimeDependent; }

    /// Raw (production) part, states as columns.
    Eigen::MatrixXd raw(const Eigen::MatrixXd& x, double t) const;
    /// Full drift raw(x) - degradation * x.
    Eigen::MatrixXd force(const Eigen::MatrixXd& x, double t) const;
    Eigen::VectorXd force_at(const Eigen::VectorXd& x, double t) const;

    /// Jacobian of the raw part at one state. The -degradation * I diagonal
    /// is excluded on purpose: this is the interaction structure.
    Eigen::MatrixXd raw_jacobian(const Eigen::VectorXd& x, double t) const;

    Eigen::VectorXd parameters() const;
    void set_parameters(const Eigen::VectorXd& p);
    int parameter_count() const;
};

/// Mean raw-part Jacobian over an evaluation cloud (rows are samples).
Eigen::MatrixXd infer_jacobian(const ForceModel& force, const Eigen::MatrixXd& cloud,
                               double t = 0.0);

/// Diffusion prior D(x) in the convention dx = f dt + sqrt(2) G dW with
/// D = G G^T. The chemical-Langevin kind ties D to the force model's raw
/// part (production + decay both contribute shot noise):
///   counts          D = diag(m * raw(x) + ell * x) / 2
///   concentration   D = diag(m * raw(x) + ell * x) / (2 V)
/// Diagonal entries are clamped at zero (counted) so D stays PSD when the
/// fitted raw part dips negative.
struct NoiseModel {
    enum class Kind { Cle, Additive, SqrtState, Deterministic, ConstantTensor };
    Kind kind = Kind::Deterministic;
    double m = 1.0;       // Cle: production scale
    double ell = 0.0;     // Cle: degradation rate
    double volume = 1.0;  // Cle
    bool concentration_units = true;
    double sigma = 0.0;       // Additive / SqrtState: dW coefficient
    Eigen::MatrixXd tensor;   // ConstantTensor

    static NoiseModel cle(double m, double ell, double volume, bool concentration_units = true);
    static NoiseModel additive(double sigma);
    static NoiseModel sqrt_state(double sigma);
    static NoiseModel deterministic();
    static NoiseModel constant_tensor(Eigen::MatrixXd d_hat);

    bool depends_on_force() const { return kind == Kind::Cle; }
};

/// D(x) as a full d x d matrix at one state.
Eigen::MatrixXd noise_diffusion(const NoiseModel& noise, const ForceModel& force,
                                const Eigen::VectorXd& x, double t);

/// Row-wise divergence (nabla . D)_i = sum_j dD_ij/dx_j. The exact path
/// differentiates the force net; finite_difference switches to central
/// differences on D (diagnostic fallback).
Eigen::VectorXd noise_divergence(const NoiseModel& noise, const ForceModel& force,
                                 const Eigen::VectorXd& x, double t,
                                 bool finite_difference = false);

/// Probability-flow velocity f(x) - (nabla . D)(x) - D(x) s(x, t).
Eigen::VectorXd pf_rhs(const ForceModel& force, const NoiseModel& noise,
                       const ScoreFunction& score, const Eigen::VectorXd& x, double t);

enum class Integrator { Rk4, Euler };

struct PushStats {
    long diffusion_clamped = 0;  // stage evaluations with clamped D entries
};

/// Integrates every sample of `cloud` (rows) from t0 to t1 with `steps`
/// fixed substeps of the chosen scheme. Throws on non-finite states,
/// naming the first offending sample.
Eigen::MatrixXd push_samples(const ForceModel& force, const NoiseModel& noise,
                             const ScoreFunction& score, const Eigen::MatrixXd& cloud,
                             double t0, double t1, int steps,
                             Integrator method = Integrator::Rk4, PushStats* stats = nullptr);

/// Squared Gaussian W2 between moment fits of two clouds (rows are
/// samples). grad_a receives d(value)/d(positions of A). Degenerate
/// covariances are floored by the fit and flagged.
double gaussian_w2_empirical(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b,
                             bool* floored = nullptr, Eigen::MatrixXd* grad_a = nullptr);

/// Monte-Carlo E ||df/dx||_F^2 of the full force over one cloud;
/// reg_samples caps the subsample (<= 0 or >= n keeps every row).
/// grad_params is aligned with ForceModel::parameters(); unsupported for
/// PotentialGradient (needs third derivatives of the net).
double jacobian_penalty_cloud(const ForceModel& force, const Eigen::MatrixXd& cloud,
                              int reg_samples, Rng& rng, double t = 0.0,
                              Eigen::VectorXd* grad_params = nullptr);

/// Time-integrated penalty: sum over intervals of dt_k times the cloud
/// penalty at the right-endpoint snapshot.
double jacobian_penalty(const ForceModel& force, const std::vector<Eigen::MatrixXd>& clouds,
                        const Eigen::VectorXd& times, int reg_samples, Rng& rng);

enum class DistanceKind { GaussianW2, Sinkhorn };

struct PFIConfig {
    double lambda = 0.0;
    DistanceKind distance = DistanceKind::GaussianW2;
    double sinkhorn_eps = 0.1;
    int sinkhorn_unroll = 0;  // 0: envelope gradients
    int steps = 1;            // integrator substeps per snapshot interval
    Integrator integrator = Integrator::Rk4;
    double learning_rate = 1e-3;
    int max_steps = 5000;
    double stop_rel_change = 1e-6;
    int stop_window = 50;
    int reg_samples = 256;
    int batch_size = 0;  // 0: full clouds every step
    std::uint64_t seed = 0;
};

struct InferenceProblem {
    SnapshotDataset data;
    ScoreFunction score;
    ForceModel force;
    NoiseModel noise;
    PFIConfig config;
};

struct LossBreakdown {
    double total = 0.0;
    std::vector<double> distances;  // one per snapshot interval
    double penalty = 0.0;           // time-integrated, before lambda
    long diffusion_clamped = 0;
    int sinkhorn_nonconverged = 0;
    int covariance_floored = 0;
};

/// Objective value and (optionally) its gradient wrt the force parameters.
/// `step` selects the subsampling substreams, so stochastic training and
/// deterministic evaluation share this entry point (step fixed => the loss
/// is a pure function of the parameters).
LossBreakdown total_loss(const InferenceProblem& problem, Eigen::VectorXd* grad = nullptr,
                         int step = 0);

struct LossReport {
    std::vector<double> history;
    LossBreakdown last;
    int steps_taken = 0;
    std::string stop_reason;  // converged | max_steps | nan_abort
    bool aborted = false;
};

struct FitResult {
    ForceModel force;
    LossReport report;
};

/// Adam on the force parameters; stops when the relative loss change over
/// stop_window steps falls below stop_rel_change. A non-finite loss or
/// gradient aborts and returns the last finite iterate.
FitResult train_force(const InferenceProblem& problem);

}  // namespace pfi
