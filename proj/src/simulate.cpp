#include "pfi/simulate.hpp"

#include <cmath>
#include <iostream>
#include <stdexcept>
#include <utility>

namespace pfi {

namespace {

Trajectory assemble(const std::vector<std::pair<double, Eigen::VectorXd>>& records, int dim) {
    Trajectory traj;
    traj.times.resize(int(records.size()));
    traj.states.resize(int(records.size()), dim);
    for (std::size_t i = 0; i < records.size(); ++i) {
        traj.times[int(i)] = records[i].first;
        traj.states.row(int(i)) = records[i].second;
    }
    return traj;
}

void check_counts(const Eigen::VectorXd& x0, int dim) {
    if (x0.size() != dim) throw std::invalid_argument("simulate: state dimension mismatch");
    for (int i = 0; i < x0.size(); ++i) {
        if (x0[i] < 0.0 || x0[i] != std::floor(x0[i]))
            throw std::invalid_argument("simulate: initial counts must be nonnegative integers");
    }
}

/// Direct-method event loop; on_event fires after every executed reaction.
/// Returns the state at t_end. Non-finite propensities end the run early
/// (treated as absorbing), matching the padded-trajectory contract.
template <class OnEvent>
Eigen::VectorXd ssa_core(const ReactionNetwork& net, const Eigen::VectorXd& x0, double t_end,
                         Rng& rng, OnEvent&& on_event) {
    Eigen::VectorXd x = x0;
    double t = 0.0;
    while (true) {
        Eigen::VectorXd a = net.rates(x);
        if (a.size() != net.reactions())
            throw std::runtime_error("gillespie_simulate: propensity size mismatch");
        if (!a.allFinite()) break;
        double a0 = 0.0;
        for (int r = 0; r < a.size(); ++r) {
            if (a[r] < 0.0) throw std::runtime_error("gillespie_simulate: negative propensity");
            a0 += a[r];
        }
        if (a0 <= 0.0) break;
        double tau = rng.exponential(a0);
        if (t + tau > t_end) break;
        t += tau;
        int r = int(rng.categorical(a));
        x += net.stoichiometry.row(r).cast<double>();
        if ((x.array() < 0.0).any())
            throw std::runtime_error("gillespie_simulate: reaction drove a species negative");
        on_event(t, x);
    }
    return x;
}

/// Euler-Maruyama CLE step loop in count space; on_step fires after every
/// step (post clamping). Returns the state at t_end.
template <class OnStep>
Eigen::VectorXd cle_core(const ReactionNetwork& net, const Eigen::VectorXd& x0, double t_end,
                         double dt, Rng& rng, long* clamp_events, OnStep&& on_step) {
    const Eigen::MatrixXd S = net.stoichiometry.cast<double>();
    Eigen::VectorXd x = x0;
    double t = 0.0;
    while (t < t_end) {
        const double h = std::min(dt, t_end - t);
        Eigen::VectorXd a = net.rates(x).cwiseMax(0.0);
        if (!a.allFinite()) throw std::runtime_error("cle_simulate: non-finite propensity");
        Eigen::VectorXd ah = a * h;
        Eigen::VectorXd kick = ah + ah.cwiseSqrt().cwiseProduct(rng.normal_vector(int(a.size())));
        x += S.transpose() * kick;
        for (int i = 0; i < x.size(); ++i) {
            if (x[i] < 0.0) {
                x[i] = 0.0;
                if (clamp_events) ++*clamp_events;
            }
        }
        t += h;
        on_step(t, x);
    }
    return x;
}

void warn_cle_resolution(const ReactionNetwork& net, const Eigen::VectorXd& x0, double dt) {
    const double amax = net.rates(x0).maxCoeff();
    if (dt * amax > 0.1) {
        std::cerr << "cle_simulate: warning: dt " << dt << " exceeds a tenth of the fastest "
                  << "initial reaction time 1/" << amax
                  << "; the diffusion approximation may be poor\n";
    }
}

}  // namespace

Eigen::VectorXd state_at(const Trajectory& traj, double t) {
    if (traj.times.size() == 0) throw std::invalid_argument("state_at: empty trajectory");
    if (t < traj.times[0]) throw std::invalid_argument("state_at: time before trajectory start");
    int lo = 0, hi = int(traj.times.size()) - 1;
    while (lo < hi) {  // largest index with times[idx] <= t
        int mid = (lo + hi + 1) / 2;
        if (traj.times[mid] <= t)
            lo = mid;
        else
            hi = mid - 1;
    }
    return traj.states.row(lo);
}

Trajectory gillespie_simulate(const ReactionNetwork& net, const Eigen::VectorXd& x0, double t_end,
                              Rng& rng) {
    if (t_end < 0.0) throw std::invalid_argument("gillespie_simulate: t_end must be nonnegative");
    check_counts(x0, net.dim());
    std::vector<std::pair<double, Eigen::VectorXd>> records;
    records.emplace_back(0.0, x0);
    Eigen::VectorXd xf = ssa_core(net, x0, t_end, rng,
                                  [&](double t, const Eigen::VectorXd& x) {
                                      records.emplace_back(t, x);
                                  });
    records.emplace_back(t_end, xf);
    return assemble(records, net.dim());
}

Trajectory cle_simulate(const ReactionNetwork& net, const Eigen::VectorXd& x0, double t_end,
                        double dt, Rng& rng, long* clamp_events) {
    if (dt <= 0.0) throw std::invalid_argument("cle_simulate: dt must be positive");
    if (t_end < 0.0) throw std::invalid_argument("cle_simulate: t_end must be nonnegative");
    if (x0.size() != net.dim()) throw std::invalid_argument("cle_simulate: dimension mismatch");
    warn_cle_resolution(net, x0, dt);
    std::vector<std::pair<double, Eigen::VectorXd>> records;
    records.emplace_back(0.0, x0);
    cle_core(net, x0, t_end, dt, rng, clamp_events,
             [&](double t, const Eigen::VectorXd& x) { records.emplace_back(t, x); });
    return assemble(records, net.dim());
}

Trajectory sde_simulate(const std::function<Eigen::VectorXd(const Eigen::VectorXd&)>& drift,
                        const std::function<Eigen::MatrixXd(const Eigen::VectorXd&)>& diffusion,
                        const Eigen::VectorXd& x0, double t_end, double dt, Rng& rng) {
    if (dt <= 0.0) throw std::invalid_argument("sde_simulate: dt must be positive");
    std::vector<std::pair<double, Eigen::VectorXd>> records;
    records.emplace_back(0.0, x0);
    Eigen::VectorXd x = x0;
    double t = 0.0;
    while (t < t_end) {
        const double h = std::min(dt, t_end - t);
        Eigen::MatrixXd g = diffusion(x);
        if (g.rows() != x.size())
            throw std::invalid_argument("sde_simulate: diffusion row count mismatch");
        x += drift(x) * h + std::sqrt(h) * (g * rng.normal_vector(int(g.cols())));
        t += h;
        records.emplace_back(t, x);
    }
    return assemble(records, int(x0.size()));
}

Trajectory rk4_simulate(const std::function<Eigen::VectorXd(const Eigen::VectorXd&)>& rhs,
                        const Eigen::VectorXd& x0, double t_end, double dt) {
    if (dt <= 0.0) throw std::invalid_argument("rk4_simulate: dt must be positive");
    std::vector<std::pair<double, Eigen::VectorXd>> records;
    records.emplace_back(0.0, x0);
    Eigen::VectorXd x = x0;
    double t = 0.0;
    while (t < t_end) {
        const double h = std::min(dt, t_end - t);
        Eigen::VectorXd k1 = rhs(x);
        Eigen::VectorXd k2 = rhs(x + 0.5 * h * k1);
        Eigen::VectorXd k3 = rhs(x + 0.5 * h * k2);
        Eigen::VectorXd k4 = rhs(x + h * k3);
        x += h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
        t += h;
        records.emplace_back(t, x);
    }
    return assemble(records, int(x0.size()));
}

SnapshotSimulator gillespie_snapshotter(const ReactionNetwork& net, const Eigen::VectorXd& x0) {
    check_counts(x0, net.dim());
    SnapshotSimulator sim;
    sim.network = net.name;
    sim.species = net.species;
    sim.volume = net.volume;
    sim.draw = [net, x0](double t, Rng& rng) {
        return ssa_core(net, x0, t, rng, [](double, const Eigen::VectorXd&) {});
    };
    return sim;
}

SnapshotSimulator cle_snapshotter(const ReactionNetwork& net, const Eigen::VectorXd& x0,
                                  double dt) {
    if (dt <= 0.0) throw std::invalid_argument("cle_snapshotter: dt must be positive");
    if (x0.size() != net.dim()) throw std::invalid_argument("cle_snapshotter: dimension mismatch");
    warn_cle_resolution(net, x0, dt);  // once here, not per draw
    SnapshotSimulator sim;
    sim.network = net.name;
    sim.species = net.species;
    sim.volume = net.volume;
    sim.draw = [net, x0, dt](double t, Rng& rng) {
        return cle_core(net, x0, t, dt, rng, nullptr, [](double, const Eigen::VectorXd&) {});
    };
    return sim;
}

SnapshotDataset sample_snapshots(const SnapshotSimulator& sim, int n, int K, double dt,
                                 SpaceTag space, std::uint64_t seed) {
    if (n < 1) throw std::invalid_argument("sample_snapshots: need n >= 1");
    if (K < 0) throw std::invalid_argument("sample_snapshots: need K >= 0");
    if (dt <= 0.0) throw std::invalid_argument("sample_snapshots: dt must be positive");
    const int d = int(sim.species.size());
    SnapshotDataset ds;
    ds.network = sim.network;
    ds.species = sim.species;
    ds.space = space;
    ds.volume = sim.volume;
    ds.seed = seed;
    ds.times.resize(K + 1);
    const Rng base(seed);
    for (int k = 0; k <= K; ++k) {
        ds.times[k] = k * dt;
        Eigen::MatrixXd snap(n, d);
        for (int j = 0; j < n; ++j) {
            Rng draw_rng = base.substream("snapshot", std::uint64_t(k) * n + j);
            snap.row(j) = sim.draw(ds.times[k], draw_rng);
        }
        if (space == SpaceTag::concentration) snap /= sim.volume;
        ds.snapshots.push_back(std::move(snap));
    }
    return ds;
}

}  // namespace pfi
