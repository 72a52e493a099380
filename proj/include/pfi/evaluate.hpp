#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "pfi/force.hpp"
#include "pfi/rng.hpp"

namespace pfi {

/// Energy distance between clouds (rows are samples): the square root of
/// ED^2 = 2 E|X-Y| - E|X-X'| - E|Y-Y'|, estimated over all pairs (subsampled
/// deterministically above ~2e8 pairs).
double energy_distance(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b);

/// Sign-aware edge recovery. Entries of the estimate are ranked by magnitude
/// (ties broken by row-major index); a ranked edge is a true positive when
/// the reference edge exists and the signs agree. Self-edges participate.
/// recall/precision hold one point per ranked prefix; auc integrates the
/// curve by trapezoid from (0, precision[0]).
struct PrCurve {
    Eigen::VectorXd recall;
    Eigen::VectorXd precision;
    double auc = 0.0;
    double prevalence = 0.0;  // existing edges / d^2, the random baseline
    bool degenerate = false;  // all-zero estimate: no ranking, auc = prevalence
};

PrCurve grn_pr_auc(const Eigen::MatrixXd& jacobian, const Eigen::MatrixXd& truth);

struct FixedPoint {
    Eigen::VectorXd x;
    int basin = 0;  // initial samples converging to this point
    bool stable = false;
    Eigen::VectorXcd eigenvalues;  // of the drift Jacobian averaged over the basin endpoints
};

struct FixedPointReport {
    std::vector<FixedPoint> points;  // descending basin size, then lexicographic
    int non_convergent = 0;
    double merge_radius = 0.0;
};

/// Integrates dx/dt = rhs(x) from every row of `cloud` until the speed drops
/// below vel_tol or t_max elapses, then clusters the endpoints with merge
/// radius 1e-3 * max(1, mean initial row norm). Stability comes from the
/// eigenvalues of `jac` (finite differences of rhs when absent) at the basin
/// mean. Results are canonically ordered, so shuffling the cloud rows leaves
/// the report unchanged.
FixedPointReport find_fixed_points(
    const std::function<Eigen::VectorXd(const Eigen::VectorXd&)>& rhs,
    const Eigen::MatrixXd& cloud, double dt = 0.01, double t_max = 200.0, double vel_tol = 1e-8,
    const std::function<Eigen::MatrixXd(const Eigen::VectorXd&)>& jac = nullptr);

/// Fixed points of the full drift raw(x) - degradation * x, with the exact
/// model Jacobian for stability.
FixedPointReport find_fixed_points(const ForceModel& force, const Eigen::MatrixXd& cloud,
                                   double dt = 0.01, double t_max = 200.0,
                                   double vel_tol = 1e-8);

/// Velocity field over states as rows.
using FlowField = std::function<Eigen::MatrixXd(const Eigen::MatrixXd&)>;

/// Probability-flow velocity of a model at a frozen evaluation time. With a
/// potential force and constant tensor kappa^2 I this is the PRESCIENT-style
/// flow -grad Psi - kappa^2 s.
FlowField pf_flow(const ForceModel& force, const NoiseModel& noise, const ScoreFunction& score,
                  double t);

struct CosineReport {
    std::vector<double> mean_cosine;  // one entry per evaluation cloud
    std::vector<int> excluded;        // zero-velocity points skipped per cloud
};

CosineReport flowline_cosine(const FlowField& a, const FlowField& b,
                             const std::vector<Eigen::MatrixXd>& clouds);

struct KMeans {
    Eigen::MatrixXd centers;      // k x d, rows in lexicographic order
    std::vector<int> assignment;  // per input row, into the ordered centers
    double inertia = 0.0;         // sum of squared distances to assigned centers
};

/// Lloyd iterations from k-means++ seeds, best inertia over `restarts`
/// independently seeded runs. Deterministic in (rows, k, seed).
KMeans kmeans(const Eigen::MatrixXd& rows, int k, std::uint64_t seed, int restarts = 8,
              int max_iters = 200);

/// Cell-type reference profiles: k-means centers of a snapshot (one row per
/// type, lexicographic order).
Eigen::MatrixXd type_profiles_from_snapshot(const Eigen::MatrixXd& snapshot, int k,
                                            std::uint64_t seed);

struct KnockdownConfig {
    int gene = -1;  // -1: unperturbed run
    double c_step = 0.1;
    double c_max = 0.9;      // grid 0, c_step, ..., c_max, plus the pure-random 1.0
    double lo = 0.25;        // random-component hypercube bounds
    double hi = 0.5;
    int replicates = 64;     // cells per mixing coefficient
    double dt = 1e-3;
    double horizon_factor = 10.0;  // times the slowest degradation timescale
    double cosine_threshold = 0.95;
    std::uint64_t seed = 0;
};

struct PerturbationOutcome {
    int gene = -1;
    Eigen::VectorXd c_values;
    Eigen::MatrixXd per_c_probability;  // (#c values) x (#types), rows sum <= 1
    Eigen::VectorXd probability;        // mean over the c grid
    double unassigned = 0.0;            // fraction matching no profile
    double stationarity_ed = 0.0;  // relative ED of the last two quarter-windows
    bool stationary = false;
};

/// Initial condition p = (1-c) p* + c U[lo,hi]^d with p* a uniformly drawn
/// row of `marginal`. The row is drawn before the uniforms, so c = 0
/// reproduces dataset rows exactly and c = 1 ignores them.
Eigen::VectorXd knockdown_initial_state(const Eigen::MatrixXd& marginal, double c, double lo,
                                        double hi, Rng& rng);

/// Simulates the inferred SDE dx = f(x) dt + sqrt(2 D(x)) dW to steady state
/// with the knocked gene pinned to zero after every Euler-Maruyama step
/// (states floored at zero for the count-space priors). Cells are assigned
/// to the profile of highest cosine similarity when it reaches the
/// threshold. `timescale` is the slowest degradation time 1/ell; the horizon
/// is horizon_factor * timescale. Stationarity compares the pooled ensembles
/// of the last two quarter-windows by relative energy distance.
PerturbationOutcome knockdown_experiment(const ForceModel& force, const NoiseModel& noise,
                                         const Eigen::MatrixXd& marginal,
                                         const Eigen::MatrixXd& profiles, double timescale,
                                         const KnockdownConfig& cfg);

/// JSON reports and tidy CSV (metric,key,value rows) for external plotting.
std::string json_report(const PrCurve& pr);
std::string json_report(const FixedPointReport& fp);
std::string json_report(const CosineReport& cr);
std::string json_report(const PerturbationOutcome& po);
std::string tidy_csv(const PrCurve& pr);
std::string tidy_csv(const FixedPointReport& fp);
std::string tidy_csv(const CosineReport& cr);
std::string tidy_csv(const PerturbationOutcome& po);

}  // namespace pfi
