#include "pfi/evaluate.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>
#include <stdexcept>

#include <Eigen/Eigenvalues>
#include <json.hpp>

#include "pfi/gaussian.hpp"
#include "pfi/rng.hpp"

namespace pfi {

namespace {

// Mean pairwise distance over all n*m ordered pairs (V-statistic form, so
// identical clouds cancel exactly in the energy distance); the within-cloud
// case skips the zero diagonal but keeps it in the denominator.
double mean_cross_distance(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b, bool same,
                           Rng& rng) {
    const long na = a.rows(), nb = b.rows();
    const long pairs = na * nb;
    const long cap = 200000000;
    double sum = 0.0;
    if (pairs <= cap) {
        if (same) {
            for (long i = 0; i < na; ++i)
                for (long j = i + 1; j < nb; ++j) sum += 2.0 * (a.row(i) - b.row(j)).norm();
        } else {
            for (long i = 0; i < na; ++i)
                for (long j = 0; j < nb; ++j) sum += (a.row(i) - b.row(j)).norm();
        }
        return sum / double(pairs);
    }
    const long draws = cap / 100;  // 2e6 sampled pairs
    for (long k = 0; k < draws; ++k) {
        long i = long(rng.uniform_index(std::size_t(na)));
        long j = long(rng.uniform_index(std::size_t(nb)));
        sum += (a.row(i) - b.row(j)).norm();
    }
    return sum / double(draws);
}

}  // namespace

double energy_distance(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b) {
    if (a.rows() == 0 || b.rows() == 0)
        throw std::invalid_argument("energy_distance: clouds must be nonempty");
    if (a.cols() != b.cols()) throw std::invalid_argument("energy_distance: dimension mismatch");
    Rng rng(hash_bytes(&a(0, 0), sizeof(double)) ^ 0x9e3779b97f4a7c15ULL);
    double cross = mean_cross_distance(a, b, false, rng);
    double within_a = mean_cross_distance(a, a, true, rng);
    double within_b = mean_cross_distance(b, b, true, rng);
    return std::sqrt(std::max(0.0, 2.0 * cross - within_a - within_b));
}

PrCurve grn_pr_auc(const Eigen::MatrixXd& jacobian, const Eigen::MatrixXd& truth) {
    const Eigen::Index d = truth.rows();
    if (truth.cols() != d) throw std::invalid_argument("grn_pr_auc: truth must be square");
    if (jacobian.rows() != d || jacobian.cols() != d)
        throw std::invalid_argument("grn_pr_auc: estimate and truth shapes differ");
    const long n = long(d) * long(d);
    const long positives = (truth.array() != 0.0).count();
    if (positives == 0) throw std::invalid_argument("grn_pr_auc: truth has no edges");

    PrCurve out;
    out.prevalence = double(positives) / double(n);
    if ((jacobian.array() == 0.0).all()) {
        out.degenerate = true;
        out.auc = out.prevalence;  // uninformative ranking scores at the baseline
        return out;
    }

    // Rank all d^2 entries by magnitude; ties resolve by row-major index so
    // the curve is deterministic.
    std::vector<long> order(std::size_t(n), 0L);
    std::iota(order.begin(), order.end(), 0L);
    auto mag = [&](long idx) { return std::abs(jacobian(idx / d, idx % d)); };
    std::stable_sort(order.begin(), order.end(),
                     [&](long p, long q) { return mag(p) > mag(q); });

    out.recall.resize(n);
    out.precision.resize(n);
    long tp = 0;
    for (long k = 0; k < n; ++k) {
        const long i = order[std::size_t(k)] / d, j = order[std::size_t(k)] % d;
        const double tv = truth(i, j), ev = jacobian(i, j);
        if ((tv > 0.0 && ev > 0.0) || (tv < 0.0 && ev < 0.0)) ++tp;
        out.recall[k] = double(tp) / double(positives);
        out.precision[k] = double(tp) / double(k + 1);
    }
    double auc = 0.0, pr = 0.0, pp = out.precision[0];
    for (long k = 0; k < n; ++k) {
        auc += (out.recall[k] - pr) * 0.5 * (out.precision[k] + pp);
        pr = out.recall[k];
        pp = out.precision[k];
    }
    out.auc = auc;
    return out;
}

namespace {

Eigen::MatrixXd fd_jacobian(const std::function<Eigen::VectorXd(const Eigen::VectorXd&)>& rhs,
                            const Eigen::VectorXd& x) {
    const Eigen::Index d = x.size();
    Eigen::MatrixXd j(d, d);
    for (Eigen::Index k = 0; k < d; ++k) {
        const double h = 1e-6 * std::max(1.0, std::abs(x[k]));
        Eigen::VectorXd xp = x, xm = x;
        xp[k] += h;
        xm[k] -= h;
        j.col(k) = (rhs(xp) - rhs(xm)) / (2.0 * h);
    }
    return j;
}

bool lex_less(const Eigen::VectorXd& a, const Eigen::VectorXd& b) {
    for (Eigen::Index i = 0; i < a.size(); ++i) {
        if (a[i] < b[i]) return true;
        if (a[i] > b[i]) return false;
    }
    return false;
}

}  // namespace

FixedPointReport find_fixed_points(
    const std::function<Eigen::VectorXd(const Eigen::VectorXd&)>& rhs,
    const Eigen::MatrixXd& cloud, double dt, double t_max, double vel_tol,
    const std::function<Eigen::MatrixXd(const Eigen::VectorXd&)>& jac) {
    if (cloud.rows() == 0) throw std::invalid_argument("find_fixed_points: empty cloud");
    if (!(dt > 0.0) || !(t_max > 0.0) || !(vel_tol > 0.0))
        throw std::invalid_argument("find_fixed_points: dt, t_max, vel_tol must be positive");

    FixedPointReport rep;
    rep.merge_radius = 1e-3 * std::max(1.0, cloud.rowwise().norm().mean());

    std::vector<Eigen::VectorXd> endpoints;
    for (Eigen::Index r = 0; r < cloud.rows(); ++r) {
        Eigen::VectorXd x = cloud.row(r).transpose();
        bool settled = false;
        for (double t = 0.0; t < t_max; t += dt) {
            const Eigen::VectorXd k1 = rhs(x);
            if (!k1.allFinite()) break;
            if (k1.norm() < vel_tol) {
                settled = true;
                break;
            }
            const Eigen::VectorXd k2 = rhs(x + 0.5 * dt * k1);
            const Eigen::VectorXd k3 = rhs(x + 0.5 * dt * k2);
            const Eigen::VectorXd k4 = rhs(x + dt * k3);
            x += dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
            if (!x.allFinite()) break;
        }
        if (!settled && x.allFinite() && rhs(x).norm() < vel_tol) settled = true;
        if (settled)
            endpoints.push_back(x);
        else
            ++rep.non_convergent;
    }
    // Sorting before the greedy merge makes the clusters independent of the
    // original row order.
    std::sort(endpoints.begin(), endpoints.end(), lex_less);

    std::vector<std::vector<Eigen::VectorXd>> clusters;
    for (const auto& e : endpoints) {
        bool placed = false;
        for (auto& c : clusters) {
            if ((e - c.front()).norm() <= rep.merge_radius) {
                c.push_back(e);
                placed = true;
                break;
            }
        }
        if (!placed) clusters.push_back({e});
    }

    for (const auto& c : clusters) {
        FixedPoint fp;
        fp.x = Eigen::VectorXd::Zero(cloud.cols());
        for (const auto& e : c) fp.x += e;
        fp.x /= double(c.size());
        fp.basin = int(c.size());
        Eigen::MatrixXd j = Eigen::MatrixXd::Zero(cloud.cols(), cloud.cols());
        for (const auto& e : c) j += jac ? jac(e) : fd_jacobian(rhs, e);
        j /= double(c.size());
        Eigen::EigenSolver<Eigen::MatrixXd> es(j);
        fp.eigenvalues = es.eigenvalues();
        fp.stable = (fp.eigenvalues.real().array() < 0.0).all();
        rep.points.push_back(std::move(fp));
    }
    std::sort(rep.points.begin(), rep.points.end(), [](const FixedPoint& a, const FixedPoint& b) {
        if (a.basin != b.basin) return a.basin > b.basin;
        return lex_less(a.x, b.x);
    });
    return rep;
}

FixedPointReport find_fixed_points(const ForceModel& force, const Eigen::MatrixXd& cloud,
                                   double dt, double t_max, double vel_tol) {
    auto rhs = [&force](const Eigen::VectorXd& x) { return force.force_at(x, 0.0); };
    auto jac = [&force](const Eigen::VectorXd& x) {
        Eigen::MatrixXd j = force.raw_jacobian(x, 0.0);
        j.diagonal().array() -= force.degradation;
        return j;
    };
    return find_fixed_points(rhs, cloud, dt, t_max, vel_tol, jac);
}

FlowField pf_flow(const ForceModel& force, const NoiseModel& noise, const ScoreFunction& score,
                  double t) {
    return [force, noise, score, t](const Eigen::MatrixXd& rows) {
        Eigen::MatrixXd out(rows.rows(), rows.cols());
        for (Eigen::Index i = 0; i < rows.rows(); ++i)
            out.row(i) = pf_rhs(force, noise, score, rows.row(i).transpose(), t).transpose();
        return out;
    };
}

CosineReport flowline_cosine(const FlowField& a, const FlowField& b,
                             const std::vector<Eigen::MatrixXd>& clouds) {
    if (clouds.empty()) throw std::invalid_argument("flowline_cosine: no clouds");
    CosineReport rep;
    for (const auto& cloud : clouds) {
        const Eigen::MatrixXd va = a(cloud), vb = b(cloud);
        if (va.rows() != cloud.rows() || vb.rows() != cloud.rows() || va.cols() != cloud.cols() ||
            vb.cols() != cloud.cols())
            throw std::invalid_argument("flowline_cosine: flow output shape mismatch");
        double sum = 0.0;
        int kept = 0, skipped = 0;
        for (Eigen::Index i = 0; i < cloud.rows(); ++i) {
            const double na = va.row(i).norm(), nb = vb.row(i).norm();
            if (na == 0.0 || nb == 0.0) {
                ++skipped;
                continue;
            }
            sum += va.row(i).dot(vb.row(i)) / (na * nb);
            ++kept;
        }
        rep.mean_cosine.push_back(kept > 0 ? sum / kept
                                           : std::numeric_limits<double>::quiet_NaN());
        rep.excluded.push_back(skipped);
    }
    return rep;
}

namespace {

struct LloydResult {
    Eigen::MatrixXd centers;
    std::vector<int> assignment;
    double inertia = 0.0;
};

LloydResult lloyd_once(const Eigen::MatrixXd& rows, int k, Rng& rng, int max_iters) {
    const Eigen::Index n = rows.rows(), d = rows.cols();
    Eigen::MatrixXd centers(k, d);
    // k-means++ seeding: each new center drawn with probability proportional
    // to the squared distance from the ones already chosen.
    centers.row(0) = rows.row(Eigen::Index(rng.uniform_index(std::uint64_t(n))));
    Eigen::VectorXd d2 = (rows.rowwise() - centers.row(0)).rowwise().squaredNorm();
    for (int c = 1; c < k; ++c) {
        Eigen::Index pick;
        if (d2.sum() > 0.0)
            pick = Eigen::Index(rng.categorical(d2));
        else
            pick = Eigen::Index(rng.uniform_index(std::uint64_t(n)));
        centers.row(c) = rows.row(pick);
        const Eigen::VectorXd dc = (rows.rowwise() - centers.row(c)).rowwise().squaredNorm();
        d2 = d2.cwiseMin(dc);
    }

    std::vector<int> assign(std::size_t(n), -1);
    for (int it = 0; it < max_iters; ++it) {
        bool changed = false;
        for (Eigen::Index i = 0; i < n; ++i) {
            int best = 0;
            double bd = (rows.row(i) - centers.row(0)).squaredNorm();
            for (int c = 1; c < k; ++c) {
                const double dc = (rows.row(i) - centers.row(c)).squaredNorm();
                if (dc < bd) {
                    bd = dc;
                    best = c;
                }
            }
            if (assign[std::size_t(i)] != best) {
                assign[std::size_t(i)] = best;
                changed = true;
            }
        }
        if (!changed) break;
        Eigen::MatrixXd sums = Eigen::MatrixXd::Zero(k, d);
        Eigen::VectorXi counts = Eigen::VectorXi::Zero(k);
        for (Eigen::Index i = 0; i < n; ++i) {
            sums.row(assign[std::size_t(i)]) += rows.row(i);
            counts[assign[std::size_t(i)]] += 1;
        }
        for (int c = 0; c < k; ++c) {
            if (counts[c] > 0) {
                centers.row(c) = sums.row(c) / double(counts[c]);
            } else {
                // Re-seed an empty cluster at the point farthest from its
                // current center.
                Eigen::Index far = 0;
                double fd = -1.0;
                for (Eigen::Index i = 0; i < n; ++i) {
                    const double dc =
                        (rows.row(i) - centers.row(assign[std::size_t(i)])).squaredNorm();
                    if (dc > fd) {
                        fd = dc;
                        far = i;
                    }
                }
                centers.row(c) = rows.row(far);
            }
        }
    }
    LloydResult res;
    res.centers = centers;
    res.assignment = assign;
    for (Eigen::Index i = 0; i < n; ++i)
        res.inertia += (rows.row(i) - centers.row(assign[std::size_t(i)])).squaredNorm();
    return res;
}

}  // namespace

KMeans kmeans(const Eigen::MatrixXd& rows, int k, std::uint64_t seed, int restarts,
              int max_iters) {
    if (k < 1) throw std::invalid_argument("kmeans: k must be positive");
    if (rows.rows() < k) throw std::invalid_argument("kmeans: fewer rows than clusters");
    if (restarts < 1) throw std::invalid_argument("kmeans: restarts must be positive");

    Rng master(seed);
    LloydResult best;
    best.inertia = std::numeric_limits<double>::infinity();
    for (int r = 0; r < restarts; ++r) {
        Rng rng = master.substream("kmeans", std::uint64_t(r));
        LloydResult res = lloyd_once(rows, k, rng, max_iters);
        if (res.inertia < best.inertia) best = std::move(res);
    }

    // Canonical output order so results do not depend on seeding history.
    std::vector<int> perm(std::size_t(k), 0);
    std::iota(perm.begin(), perm.end(), 0);
    std::sort(perm.begin(), perm.end(), [&](int p, int q) {
        return lex_less(best.centers.row(p).transpose(), best.centers.row(q).transpose());
    });
    std::vector<int> inv(std::size_t(k), 0);
    KMeans out;
    out.centers.resize(k, rows.cols());
    for (int c = 0; c < k; ++c) {
        out.centers.row(c) = best.centers.row(perm[std::size_t(c)]);
        inv[std::size_t(perm[std::size_t(c)])] = c;
    }
    out.assignment.resize(best.assignment.size());
    for (std::size_t i = 0; i < best.assignment.size(); ++i)
        out.assignment[i] = inv[std::size_t(best.assignment[i])];
    out.inertia = best.inertia;
    return out;
}

Eigen::MatrixXd type_profiles_from_snapshot(const Eigen::MatrixXd& snapshot, int k,
                                            std::uint64_t seed) {
    return kmeans(snapshot, k, seed).centers;
}

Eigen::VectorXd knockdown_initial_state(const Eigen::MatrixXd& marginal, double c, double lo,
                                        double hi, Rng& rng) {
    if (marginal.rows() == 0) throw std::invalid_argument("knockdown_initial_state: empty marginal");
    if (!(c >= 0.0 && c <= 1.0))
        throw std::invalid_argument("knockdown_initial_state: c must be in [0, 1]");
    if (!(lo <= hi)) throw std::invalid_argument("knockdown_initial_state: lo > hi");
    const Eigen::VectorXd p =
        marginal.row(Eigen::Index(rng.uniform_index(std::uint64_t(marginal.rows())))).transpose();
    Eigen::VectorXd u(marginal.cols());
    for (Eigen::Index i = 0; i < u.size(); ++i) u[i] = rng.uniform(lo, hi);
    return (1.0 - c) * p + c * u;
}

PerturbationOutcome knockdown_experiment(const ForceModel& force, const NoiseModel& noise,
                                         const Eigen::MatrixXd& marginal,
                                         const Eigen::MatrixXd& profiles, double timescale,
                                         const KnockdownConfig& cfg) {
    const Eigen::Index d = marginal.cols();
    if (marginal.rows() == 0) throw std::invalid_argument("knockdown_experiment: empty marginal");
    if (profiles.rows() == 0 || profiles.cols() != d)
        throw std::invalid_argument("knockdown_experiment: profile shape mismatch");
    if (cfg.gene < -1 || cfg.gene >= int(d))
        throw std::invalid_argument("knockdown_experiment: gene out of range");
    if (!(timescale > 0.0) || !(cfg.dt > 0.0) || !(cfg.horizon_factor > 0.0))
        throw std::invalid_argument("knockdown_experiment: timescale, dt, horizon must be positive");
    if (cfg.replicates < 1) throw std::invalid_argument("knockdown_experiment: replicates < 1");
    if (!(cfg.c_step > 0.0) || !(cfg.c_max >= 0.0 && cfg.c_max < 1.0))
        throw std::invalid_argument("knockdown_experiment: bad mixing grid");
    if (!(cfg.lo <= cfg.hi)) throw std::invalid_argument("knockdown_experiment: lo > hi");

    PerturbationOutcome out;
    out.gene = cfg.gene;
    std::vector<double> grid;
    for (double c = 0.0; c <= cfg.c_max + 1e-12; c += cfg.c_step) grid.push_back(c);
    grid.push_back(1.0);
    const int nc = int(grid.size());
    out.c_values = Eigen::Map<const Eigen::VectorXd>(grid.data(), nc);

    const double horizon = cfg.horizon_factor * timescale;
    const long steps = std::max<long>(4, long(std::ceil(horizon / cfg.dt)));
    const long stride = std::max<long>(1, steps / 64);
    const bool nonneg =
        noise.kind == NoiseModel::Kind::Cle || noise.kind == NoiseModel::Kind::SqrtState;
    Eigen::MatrixXd chol_const;  // ConstantTensor noise is state independent
    if (noise.kind == NoiseModel::Kind::ConstantTensor)
        chol_const = matrix_sqrt_psd(2.0 * noise.tensor);

    const int k = int(profiles.rows());
    out.per_c_probability = Eigen::MatrixXd::Zero(nc, k);
    long unassigned = 0;
    std::vector<Eigen::RowVectorXd> win_a, win_b;

    Rng master(cfg.seed);
    for (int ci = 0; ci < nc; ++ci) {
        for (int rep = 0; rep < cfg.replicates; ++rep) {
            Rng rng = master.substream("knockdown", std::uint64_t(ci) * cfg.replicates + rep);
            Eigen::VectorXd x = knockdown_initial_state(marginal, grid[ci], cfg.lo, cfg.hi, rng);
            if (cfg.gene >= 0) x[cfg.gene] = 0.0;
            for (long it = 1; it <= steps; ++it) {
                const double t = double(it - 1) * cfg.dt;
                const Eigen::VectorXd f = force.force_at(x, t);
                Eigen::VectorXd dn;
                if (noise.kind == NoiseModel::Kind::ConstantTensor) {
                    dn = std::sqrt(cfg.dt) * (chol_const * rng.normal_vector(d));
                } else {
                    const Eigen::VectorXd dg = noise_diffusion(noise, force, x, t).diagonal();
                    dn = (2.0 * cfg.dt * dg).cwiseMax(0.0).cwiseSqrt().cwiseProduct(
                        rng.normal_vector(d));
                }
                x += cfg.dt * f + dn;
                if (!x.allFinite())
                    throw std::runtime_error("knockdown_experiment: state diverged");
                if (nonneg) x = x.cwiseMax(0.0);
                if (cfg.gene >= 0) x[cfg.gene] = 0.0;
                if (it > steps / 2 && (it % stride == 0 || it == steps)) {
                    if (it > 3 * steps / 4)
                        win_b.push_back(x.transpose());
                    else
                        win_a.push_back(x.transpose());
                }
            }
            const double xn = x.norm();
            int best = -1;
            double bc = -2.0;
            for (int p = 0; p < k; ++p) {
                const double pn = profiles.row(p).norm();
                if (xn == 0.0 || pn == 0.0) continue;
                const double cosv = profiles.row(p).dot(x.transpose()) / (xn * pn);
                if (cosv > bc) {
                    bc = cosv;
                    best = p;
                }
            }
            if (best >= 0 && bc >= cfg.cosine_threshold)
                out.per_c_probability(ci, best) += 1.0;
            else
                ++unassigned;
        }
    }
    out.per_c_probability /= double(cfg.replicates);
    out.probability = out.per_c_probability.colwise().mean().transpose();
    out.unassigned = double(unassigned) / double(nc * cfg.replicates);

    Eigen::MatrixXd wa(Eigen::Index(win_a.size()), d), wb(Eigen::Index(win_b.size()), d);
    for (std::size_t i = 0; i < win_a.size(); ++i) wa.row(Eigen::Index(i)) = win_a[i];
    for (std::size_t i = 0; i < win_b.size(); ++i) wb.row(Eigen::Index(i)) = win_b[i];
    const double scale = std::max(1e-12, wb.rowwise().norm().mean());
    out.stationarity_ed = energy_distance(wa, wb) / scale;
    out.stationary = out.stationarity_ed < 0.05;
    return out;
}

namespace {

using nlohmann::json;

json vec_json(const Eigen::VectorXd& v) {
    json a = json::array();
    for (Eigen::Index i = 0; i < v.size(); ++i) a.push_back(v[i]);
    return a;
}

json mat_json(const Eigen::MatrixXd& m) {
    json a = json::array();
    for (Eigen::Index i = 0; i < m.rows(); ++i) a.push_back(vec_json(m.row(i).transpose()));
    return a;
}

std::string fmt(double v) {
    std::ostringstream os;
    os.precision(17);
    os << v;
    return os.str();
}

void csv_row(std::ostringstream& os, const std::string& metric, const std::string& key,
             const std::string& value) {
    os << metric << ',' << key << ',' << value << '\n';
}

}  // namespace

std::string json_report(const PrCurve& pr) {
    json j;
    j["recall"] = vec_json(pr.recall);
    j["precision"] = vec_json(pr.precision);
    j["auc"] = pr.auc;
    j["prevalence"] = pr.prevalence;
    j["degenerate"] = pr.degenerate;
    return j.dump(2);
}

std::string json_report(const FixedPointReport& fp) {
    json pts = json::array();
    for (const auto& p : fp.points) {
        json e;
        e["x"] = vec_json(p.x);
        e["basin"] = p.basin;
        e["stable"] = p.stable;
        e["eig_real"] = vec_json(p.eigenvalues.real());
        e["eig_imag"] = vec_json(p.eigenvalues.imag());
        pts.push_back(e);
    }
    json j;
    j["points"] = pts;
    j["non_convergent"] = fp.non_convergent;
    j["merge_radius"] = fp.merge_radius;
    return j.dump(2);
}

std::string json_report(const CosineReport& cr) {
    json j;
    j["mean_cosine"] = cr.mean_cosine;
    j["excluded"] = cr.excluded;
    return j.dump(2);
}

std::string json_report(const PerturbationOutcome& po) {
    json j;
    j["gene"] = po.gene;
    j["c_values"] = vec_json(po.c_values);
    j["per_c_probability"] = mat_json(po.per_c_probability);
    j["probability"] = vec_json(po.probability);
    j["unassigned"] = po.unassigned;
    j["stationarity_ed"] = po.stationarity_ed;
    j["stationary"] = po.stationary;
    return j.dump(2);
}

std::string tidy_csv(const PrCurve& pr) {
    std::ostringstream os;
    os << "metric,key,value\n";
    csv_row(os, "auc", "", fmt(pr.auc));
    csv_row(os, "prevalence", "", fmt(pr.prevalence));
    csv_row(os, "degenerate", "", pr.degenerate ? "1" : "0");
    for (Eigen::Index i = 0; i < pr.recall.size(); ++i) {
        csv_row(os, "recall", std::to_string(i), fmt(pr.recall[i]));
        csv_row(os, "precision", std::to_string(i), fmt(pr.precision[i]));
    }
    return os.str();
}

std::string tidy_csv(const FixedPointReport& fp) {
    std::ostringstream os;
    os << "metric,key,value\n";
    csv_row(os, "non_convergent", "", std::to_string(fp.non_convergent));
    csv_row(os, "merge_radius", "", fmt(fp.merge_radius));
    for (std::size_t p = 0; p < fp.points.size(); ++p) {
        const auto& pt = fp.points[p];
        csv_row(os, "basin", std::to_string(p), std::to_string(pt.basin));
        csv_row(os, "stable", std::to_string(p), pt.stable ? "1" : "0");
        for (Eigen::Index i = 0; i < pt.x.size(); ++i)
            csv_row(os, "x", std::to_string(p) + ":" + std::to_string(i), fmt(pt.x[i]));
        for (Eigen::Index i = 0; i < pt.eigenvalues.size(); ++i) {
            const std::string key = std::to_string(p) + ":" + std::to_string(i);
            csv_row(os, "eig_real", key, fmt(pt.eigenvalues[i].real()));
            csv_row(os, "eig_imag", key, fmt(pt.eigenvalues[i].imag()));
        }
    }
    return os.str();
}

std::string tidy_csv(const CosineReport& cr) {
    std::ostringstream os;
    os << "metric,key,value\n";
    for (std::size_t i = 0; i < cr.mean_cosine.size(); ++i) {
        csv_row(os, "mean_cosine", std::to_string(i), fmt(cr.mean_cosine[i]));
        csv_row(os, "excluded", std::to_string(i), std::to_string(cr.excluded[i]));
    }
    return os.str();
}

std::string tidy_csv(const PerturbationOutcome& po) {
    std::ostringstream os;
    os << "metric,key,value\n";
    csv_row(os, "gene", "", std::to_string(po.gene));
    csv_row(os, "unassigned", "", fmt(po.unassigned));
    csv_row(os, "stationarity_ed", "", fmt(po.stationarity_ed));
    csv_row(os, "stationary", "", po.stationary ? "1" : "0");
    for (Eigen::Index t = 0; t < po.probability.size(); ++t)
        csv_row(os, "probability", std::to_string(t), fmt(po.probability[t]));
    for (Eigen::Index c = 0; c < po.per_c_probability.rows(); ++c) {
        csv_row(os, "c", std::to_string(c), fmt(po.c_values[c]));
        for (Eigen::Index t = 0; t < po.per_c_probability.cols(); ++t)
            csv_row(os, "per_c_probability", std::to_string(c) + ":" + std::to_string(t),
                    fmt(po.per_c_probability(c, t)));
    }
    return os.str();
}

}  // namespace pfi
