#pragma once

#include <functional>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "pfi/dataset.hpp"
#include "pfi/reaction_network.hpp"
#include "pfi/rng.hpp"

namespace pfi {

/// One realized path: states.row(k) holds the state at times[k]. SSA paths
/// are right-continuous piecewise constant (states.row(k) applies from
/// times[k] until the next event).
struct Trajectory {
    Eigen::VectorXd times;
    Eigen::MatrixXd states;
};

/// State at time t under the piecewise-constant reading: the row with the
/// largest recorded time <= t.
Eigen::VectorXd state_at(const Trajectory& traj, double t);

/// Exact stochastic simulation (Gillespie direct method): exponential waiting
/// times at the total propensity, categorical reaction choice. Records the
/// initial state, every event, and a final padded state at t_end (also the
/// absorbing case when the total propensity hits zero).
Trajectory gillespie_simulate(const ReactionNetwork& net, const Eigen::VectorXd& x0,
                              double t_end, Rng& rng);

/// Chemical Langevin integration in count space: Euler-Maruyama on
/// dx = S^T a(x) dt + S^T diag(sqrt a(x)) dW, recording every step. Negative
/// propensity inputs cannot occur because counts are clamped at zero after
/// each step; clamp_events, if given, accumulates how many components were
/// clamped. Warns when dt resolves less than a tenth of the fastest initial
/// reaction.
Trajectory cle_simulate(const ReactionNetwork& net, const Eigen::VectorXd& x0, double t_end,
                        double dt, Rng& rng, long* clamp_events = nullptr);

/// Generic Euler-Maruyama for dx = drift(x) dt + diffusion(x) dW, with
/// diffusion returning a d x m matrix applied to an m-dimensional Wiener
/// increment.
Trajectory sde_simulate(const std::function<Eigen::VectorXd(const Eigen::VectorXd&)>& drift,
                        const std::function<Eigen::MatrixXd(const Eigen::VectorXd&)>& diffusion,
                        const Eigen::VectorXd& x0, double t_end, double dt, Rng& rng);

/// Deterministic RK4 for dx/dt = rhs(x) (reference dynamics, large-volume
/// limits).
Trajectory rk4_simulate(const std::function<Eigen::VectorXd(const Eigen::VectorXd&)>& rhs,
                        const Eigen::VectorXd& x0, double t_end, double dt);

/// Draws one trajectory and returns its state at a single requested time;
/// sample_snapshots uses a fresh draw per sample so rows are independent.
struct SnapshotSimulator {
    std::string network;
    std::vector<std::string> species;
    double volume = 1.0;
    std::function<Eigen::VectorXd(double t, Rng& rng)> draw;
};

SnapshotSimulator gillespie_snapshotter(const ReactionNetwork& net, const Eigen::VectorXd& x0);
SnapshotSimulator cle_snapshotter(const ReactionNetwork& net, const Eigen::VectorXd& x0,
                                  double dt);

/// Cross-sectional sampling at t_i = i*dt for i = 0..K: snapshot i holds n
/// rows, and every row of every snapshot comes from its own independent
/// trajectory (samples at different times are never paired). Sample j of
/// snapshot i uses the substream ("snapshot", i*n + j) of the master seed, so
/// any evaluation order yields the identical dataset. K = 0 produces the
/// single t = 0 snapshot.
SnapshotDataset sample_snapshots(const SnapshotSimulator& sim, int n, int K, double dt,
                                 SpaceTag space, std::uint64_t seed);

}  // namespace pfi
