#include "pfi/force.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <memory>
#include <numeric>
#include <stdexcept>
#include <string>
#include <utility>

#include "pfi/sinkhorn.hpp"

namespace pfi {

namespace {

using Eigen::ArrayXXd;
using Eigen::Index;
using Eigen::MatrixXd;
using Eigen::VectorXd;

MatrixXd with_time_row(const MatrixXd& x, double t) {
    MatrixXd in(x.rows() + 1, x.cols());
    in.topRows(x.rows()) = x;
    in.row(x.rows()).setConstant(t);
    return in;
}

double cle_alpha(const NoiseModel& nm) {
    return nm.concentration_units ? 0.5 / nm.volume : 0.5;
}

/// Everything one velocity evaluation shares with its reverse pass;
/// rebuilt from (x, t) when replaying a tape.
struct StageEval {
    MatrixXd x;
    double t = 0.0;
    Mlp::Workspace ws;  // force-net state (net kinds only)
    MatrixXd raw;
    MatrixXd svals;  // score values (noise kinds that use them)
    ArrayXXd dvec;   // clamped diffusion diagonal
    ArrayXXd mask;   // 1 where unclamped (Cle, SqrtState)
};

void build_stage(const ForceModel& force, const NoiseModel& noise, const ScoreFunction& score,
                 MatrixXd x, double t, StageEval& ev, PushStats* stats) {
    ev.x = std::move(x);
    ev.t = t;
    const Index dd = ev.x.rows();
    const Index n = ev.x.cols();
    switch (force.kind) {
        case ForceKind::Linear:
            ev.raw.noalias() = force.omega * ev.x;
            break;
        case ForceKind::Neural:
            ev.raw = force.net.forward(ev.x, ev.ws);
            break;
        case ForceKind::NeuralTimeDependent:
            ev.raw = force.net.forward(with_time_row(ev.x, t), ev.ws);
            break;
        case ForceKind::PotentialGradient:
            force.net.forward(ev.x, ev.ws);
            ev.raw = -force.net.backward(ev.ws, MatrixXd::Ones(1, n));
            break;
    }
    if (noise.kind == NoiseModel::Kind::Deterministic) return;
    ev.svals = score.eval(ev.x, t);
    switch (noise.kind) {
        case NoiseModel::Kind::Additive:
            ev.dvec = ArrayXXd::Constant(dd, n, 0.5 * noise.sigma * noise.sigma);
            break;
        case NoiseModel::Kind::SqrtState: {
            ev.mask = (ev.x.array() > 0.0).cast<double>();
            ev.dvec = 0.5 * noise.sigma * noise.sigma * ev.x.array() * ev.mask;
            if (stats) stats->diffusion_clamped += long(dd * n - Index(ev.mask.sum()));
            break;
        }
        case NoiseModel::Kind::Cle: {
            const ArrayXXd inner =
                noise.m * ev.raw.array() + noise.ell * ev.x.array();
            ev.mask = (inner > 0.0).cast<double>();
            ev.dvec = cle_alpha(noise) * inner * ev.mask;
            if (stats) stats->diffusion_clamped += long(dd * n - Index(ev.mask.sum()));
            break;
        }
        case NoiseModel::Kind::ConstantTensor:
        case NoiseModel::Kind::Deterministic:
            break;
    }
}

/// Raw-part Jacobian diagonals per sample (d x n), used by the CLE
/// divergence term.
ArrayXXd cle_jdiag(const ForceModel& force, const StageEval& ev) {
    const Index dd = ev.x.rows();
    const Index n = ev.x.cols();
    ArrayXXd jd(dd, n);
    switch (force.kind) {
        case ForceKind::Linear:
            jd = force.omega.diagonal().replicate(1, n).array();
            break;
        case ForceKind::Neural:
        case ForceKind::NeuralTimeDependent: {
            const Index in_rows = force.net.input_dim();
            Mlp::Tangent tan;
            for (Index i = 0; i < dd; ++i) {
                MatrixXd ei = MatrixXd::Zero(in_rows, n);
                ei.row(i).setOnes();
                MatrixXd u = force.net.jvp(ev.ws, ei, tan);
                jd.row(i) = u.row(i).array();
            }
            break;
        }
        case ForceKind::PotentialGradient: {
            Mlp::Tangent tan;
            for (Index i = 0; i < dd; ++i) {
                MatrixXd ei = MatrixXd::Zero(dd, n);
                ei.row(i).setOnes();
                force.net.jvp(ev.ws, ei, tan);
                MatrixXd he = force.net.backward_dual(ev.ws, tan, MatrixXd::Zero(1, n),
                                                      MatrixXd::Ones(1, n));
                jd.row(i) = -he.row(i).array();
            }
            break;
        }
    }
    return jd;
}

MatrixXd stage_velocity(const ForceModel& force, const NoiseModel& noise, const StageEval& ev) {
    MatrixXd vel = ev.raw - force.degradation * ev.x;
    switch (noise.kind) {
        case NoiseModel::Kind::Deterministic:
            return vel;
        case NoiseModel::Kind::ConstantTensor:
            vel.noalias() -= noise.tensor * ev.svals;
            return vel;
        case NoiseModel::Kind::Additive:
            vel.array() -= ev.dvec * ev.svals.array();
            return vel;
        case NoiseModel::Kind::SqrtState:
            vel.array() -= 0.5 * noise.sigma * noise.sigma * ev.mask;
            vel.array() -= ev.dvec * ev.svals.array();
            return vel;
        case NoiseModel::Kind::Cle: {
            const double a = cle_alpha(noise);
            vel.array() -= a * (noise.m * cle_jdiag(force, ev) + noise.ell) * ev.mask;
            vel.array() -= ev.dvec * ev.svals.array();
            return vel;
        }
    }
    return vel;
}

/// Adjoint of <gbar, velocity(x)> wrt x (returned) and the force
/// parameters (accumulated into netg / omegag).
MatrixXd stage_reverse(const ForceModel& force, const NoiseModel& noise,
                       const ScoreFunction& score, const StageEval& ev, const MatrixXd& gbar,
                       MlpGrads* netg, MatrixXd* omegag) {
    const Index dd = ev.x.rows();
    const Index n = ev.x.cols();
    MatrixXd xbar = -force.degradation * gbar;
    MatrixXd ybar = gbar;  // adjoint into the raw part

    if (noise.kind == NoiseModel::Kind::ConstantTensor) {
        MatrixXd sbar = -(noise.tensor.transpose() * gbar);
        xbar += score.vjp(ev.x, ev.t, sbar);
    } else if (noise.kind != NoiseModel::Kind::Deterministic) {
        MatrixXd sbar = (-(ev.dvec * gbar.array())).matrix();
        xbar += score.vjp(ev.x, ev.t, sbar);
        const ArrayXXd inner_bar = -(ev.svals.array() * gbar.array());
        if (noise.kind == NoiseModel::Kind::Cle) {
            const ArrayXXd masked = cle_alpha(noise) * inner_bar * ev.mask;
            ybar.array() += noise.m * masked;
            xbar.array() += noise.ell * masked;
        } else if (noise.kind == NoiseModel::Kind::SqrtState) {
            xbar.array() += 0.5 * noise.sigma * noise.sigma * inner_bar * ev.mask;
        }
        // Additive: dvec constant, nothing flows back.
    }

    if (noise.kind == NoiseModel::Kind::Cle) {
        const double a = cle_alpha(noise);
        switch (force.kind) {
            case ForceKind::Linear: {
                if (omegag) {
                    omegag->noalias() += ybar * ev.x.transpose();
                    const VectorXd diag_adj =
                        (-(a * noise.m) * (gbar.array() * ev.mask)).rowwise().sum().matrix();
                    omegag->diagonal() += diag_adj;
                }
                xbar.noalias() += force.omega.transpose() * ybar;
                break;
            }
            case ForceKind::Neural:
            case ForceKind::NeuralTimeDependent: {
                const bool td = force.kind == ForceKind::NeuralTimeDependent;
                const Index in_rows = force.net.input_dim();
                const MatrixXd zero_y = MatrixXd::Zero(dd, n);
                Mlp::Tangent tan;
                for (Index i = 0; i < dd; ++i) {
                    MatrixXd ei = MatrixXd::Zero(in_rows, n);
                    ei.row(i).setOnes();
                    force.net.jvp(ev.ws, ei, tan);
                    MatrixXd ubar = MatrixXd::Zero(dd, n);
                    ubar.row(i) =
                        (-(a * noise.m) * (gbar.row(i).array() * ev.mask.row(i))).matrix();
                    MatrixXd ib = force.net.backward_dual(ev.ws, tan, i == 0 ? ybar : zero_y,
                                                          ubar, netg);
                    xbar += td ? ib.topRows(dd).eval() : ib;
                }
                break;
            }
            case ForceKind::PotentialGradient:
                throw std::logic_error(
                    "stage_reverse: CLE prior with a potential force is not differentiable");
        }
        return xbar;
    }

    switch (force.kind) {
        case ForceKind::Linear:
            if (omegag) omegag->noalias() += ybar * ev.x.transpose();
            xbar.noalias() += force.omega.transpose() * ybar;
            break;
        case ForceKind::Neural:
            xbar += force.net.backward(ev.ws, ybar, netg);
            break;
        case ForceKind::NeuralTimeDependent:
            xbar += force.net.backward(ev.ws, ybar, netg).topRows(dd).eval();
            break;
        case ForceKind::PotentialGradient: {
            Mlp::Tangent tan;
            force.net.jvp(ev.ws, ybar, tan);
            xbar += force.net.backward_dual(ev.ws, tan, MatrixXd::Zero(1, n),
                                            -MatrixXd::Ones(1, n), netg);
            break;
        }
    }
    return xbar;
}

struct Tape {
    double t0 = 0.0;
    double h = 0.0;
    int steps = 0;
    Integrator method = Integrator::Rk4;
    std::vector<std::array<MatrixXd, 4>> inputs;  // Euler uses [0] only
};

void check_finite(const MatrixXd& x, double t) {
    if (x.allFinite()) return;
    for (Index c = 0; c < x.cols(); ++c)
        if (!x.col(c).allFinite())
            throw std::runtime_error("push_samples: non-finite state in sample " +
                                     std::to_string(long(c)) + " at t=" + std::to_string(t));
}

MatrixXd integrate_cols(const ForceModel& force, const NoiseModel& noise,
                        const ScoreFunction& score, MatrixXd x, double t0, double t1, int steps,
                        Integrator method, PushStats* stats, Tape* tape) {
    const double h = (t1 - t0) / steps;
    if (tape) {
        tape->t0 = t0;
        tape->h = h;
        tape->steps = steps;
        tape->method = method;
        tape->inputs.resize(std::size_t(steps));
    }
    StageEval ev;
    for (int s = 0; s < steps; ++s) {
        const double ts = t0 + s * h;
        if (method == Integrator::Euler) {
            if (tape) tape->inputs[std::size_t(s)][0] = x;
            build_stage(force, noise, score, x, ts, ev, stats);
            x += h * stage_velocity(force, noise, ev);
        } else {
            MatrixXd a1 = x;
            build_stage(force, noise, score, a1, ts, ev, stats);
            MatrixXd k1 = stage_velocity(force, noise, ev);
            MatrixXd a2 = x + (h / 2) * k1;
            build_stage(force, noise, score, a2, ts + h / 2, ev, stats);
            MatrixXd k2 = stage_velocity(force, noise, ev);
            MatrixXd a3 = x + (h / 2) * k2;
            build_stage(force, noise, score, a3, ts + h / 2, ev, stats);
            MatrixXd k3 = stage_velocity(force, noise, ev);
            MatrixXd a4 = x + h * k3;
            build_stage(force, noise, score, a4, ts + h, ev, stats);
            MatrixXd k4 = stage_velocity(force, noise, ev);
            x += (h / 6) * (k1 + 2 * k2 + 2 * k3 + k4);
            if (tape)
                tape->inputs[std::size_t(s)] = {std::move(a1), std::move(a2), std::move(a3),
                                                std::move(a4)};
        }
        check_finite(x, ts + h);
    }
    return x;
}

void integrate_reverse(const ForceModel& force, const NoiseModel& noise,
                       const ScoreFunction& score, const Tape& tape, MatrixXd xbar,
                       MlpGrads* netg, MatrixXd* omegag) {
    const double h = tape.h;
    StageEval ev;
    for (int s = tape.steps - 1; s >= 0; --s) {
        const double ts = tape.t0 + s * h;
        const auto& a = tape.inputs[std::size_t(s)];
        if (tape.method == Integrator::Euler) {
            build_stage(force, noise, score, a[0], ts, ev, nullptr);
            xbar += stage_reverse(force, noise, score, ev, (h * xbar).eval(), netg, omegag);
        } else {
            MatrixXd kb1 = (h / 6) * xbar;
            MatrixXd kb2 = (h / 3) * xbar;
            MatrixXd kb3 = (h / 3) * xbar;
            MatrixXd kb4 = (h / 6) * xbar;
            build_stage(force, noise, score, a[3], ts + h, ev, nullptr);
            MatrixXd ib = stage_reverse(force, noise, score, ev, kb4, netg, omegag);
            xbar += ib;
            kb3 += h * ib;
            build_stage(force, noise, score, a[2], ts + h / 2, ev, nullptr);
            ib = stage_reverse(force, noise, score, ev, kb3, netg, omegag);
            xbar += ib;
            kb2 += (h / 2) * ib;
            build_stage(force, noise, score, a[1], ts + h / 2, ev, nullptr);
            ib = stage_reverse(force, noise, score, ev, kb2, netg, omegag);
            xbar += ib;
            kb1 += (h / 2) * ib;
            build_stage(force, noise, score, a[0], ts, ev, nullptr);
            xbar += stage_reverse(force, noise, score, ev, kb1, netg, omegag);
        }
    }
}

MatrixXd subsample_rows(const MatrixXd& m, Index want, Rng rng) {
    const Index n = m.rows();
    if (want <= 0 || want >= n) return m;
    std::vector<Index> idx(static_cast<std::size_t>(n));
    std::iota(idx.begin(), idx.end(), Index(0));
    for (Index i = 0; i < want; ++i) {
        const Index j = i + Index(rng.uniform_index(std::uint64_t(n - i)));
        std::swap(idx[std::size_t(i)], idx[std::size_t(j)]);
    }
    MatrixXd out(want, m.cols());
    for (Index i = 0; i < want; ++i) out.row(i) = m.row(idx[std::size_t(i)]);
    return out;
}

void require_score(const NoiseModel& noise, const ScoreFunction& score, int d) {
    if (noise.kind == NoiseModel::Kind::Deterministic) return;
    if (!score.valid()) throw std::invalid_argument("pf: score function required for this noise model");
    if (score.dim != d) throw std::invalid_argument("pf: score dimension mismatch");
}

}  // namespace

ScoreFunction score_from_net(Mlp net) {
    if (net.input_dim() < 2 || net.output_dim() != net.input_dim() - 1)
        throw std::invalid_argument("score_from_net: net must map [x; t] to a same-d score");
    auto shared = std::make_shared<const Mlp>(std::move(net));
    ScoreFunction s;
    s.dim = shared->output_dim();
    const int d = s.dim;
    s.eval = [shared, d](const MatrixXd& x, double t) {
        if (x.rows() != d) throw std::invalid_argument("score eval: state dimension mismatch");
        return shared->forward(with_time_row(x, t));
    };
    s.vjp = [shared, d](const MatrixXd& x, double t, const MatrixXd& adj) {
        Mlp::Workspace ws;
        shared->forward(with_time_row(x, t), ws);
        return shared->backward(ws, adj).topRows(d).eval();
    };
    return s;
}

ScoreFunction score_from_gaussian_path(int dim, std::function<GaussianState(double)> path) {
    if (dim <= 0 || !path)
        throw std::invalid_argument("score_from_gaussian_path: need a dimension and a path");
    auto p = std::make_shared<std::function<GaussianState(double)>>(std::move(path));
    ScoreFunction s;
    s.dim = dim;
    s.eval = [p, dim](const MatrixXd& x, double t) {
        if (x.rows() != dim) throw std::invalid_argument("score eval: state dimension mismatch");
        return gaussian_score_batch((*p)(t), x);
    };
    s.vjp = [p, dim](const MatrixXd& x, double t, const MatrixXd& adj) {
        if (x.rows() != dim || adj.rows() != dim)
            throw std::invalid_argument("score vjp: dimension mismatch");
        const GaussianState g = (*p)(t);
        return (-g.cov.llt().solve(adj)).eval();
    };
    return s;
}

ForceModel ForceModel::linear(Eigen::MatrixXd omega_hat, double ell) {
    if (omega_hat.rows() != omega_hat.cols() || omega_hat.rows() == 0)
        throw std::invalid_argument("ForceModel::linear: omega must be square");
    ForceModel f;
    f.kind = ForceKind::Linear;
    f.omega = std::move(omega_hat);
    f.degradation = ell;
    return f;
}

ForceModel ForceModel::neural(Mlp net, double ell) {
    if (net.input_dim() != net.output_dim())
        throw std::invalid_argument("ForceModel::neural: net must map d to d");
    ForceModel f;
    f.kind = ForceKind::Neural;
    f.net = std::move(net);
    f.degradation = ell;
    return f;
}

ForceModel ForceModel::neural_time(Mlp net, double ell) {
    if (net.input_dim() != net.output_dim() + 1)
        throw std::invalid_argument("ForceModel::neural_time: net must map [x; t] to d");
    ForceModel f;
    f.kind = ForceKind::NeuralTimeDependent;
    f.net = std::move(net);
    f.degradation = ell;
    return f;
}

ForceModel ForceModel::potential(Mlp net, double ell) {
    if (net.output_dim() != 1)
        throw std::invalid_argument("ForceModel::potential: net must have scalar output");
    ForceModel f;
    f.kind = ForceKind::PotentialGradient;
    f.net = std::move(net);
    f.degradation = ell;
    return f;
}

int ForceModel::dim() const {
    switch (kind) {
        case ForceKind::Linear: return int(omega.rows());
        case ForceKind::Neural: return net.output_dim();
        case ForceKind::NeuralTimeDependent: return net.output_dim();
        case ForceKind::PotentialGradient: return net.input_dim();
    }
    return 0;
}

Eigen::MatrixXd ForceModel::raw(const Eigen::MatrixXd& x, double t) const {
    if (x.rows() != dim()) throw std::invalid_argument("ForceModel::raw: dimension mismatch");
    switch (kind) {
        case ForceKind::Linear: return omega * x;
        case ForceKind::Neural: return net.forward(x);
        case ForceKind::NeuralTimeDependent: return net.forward(with_time_row(x, t));
        case ForceKind::PotentialGradient: {
            Mlp::Workspace ws;
            net.forward(x, ws);
            return -net.backward(ws, MatrixXd::Ones(1, x.cols()));
        }
    }
    return {};
}

Eigen::MatrixXd ForceModel::force(const Eigen::MatrixXd& x, double t) const {
    return raw(x, t) - degradation * x;
}

Eigen::VectorXd ForceModel::force_at(const Eigen::VectorXd& x, double t) const {
    return force(MatrixXd(x), t).col(0);
}

Eigen::MatrixXd ForceModel::raw_jacobian(const Eigen::VectorXd& x, double t) const {
    const int d = dim();
    if (x.size() != d) throw std::invalid_argument("raw_jacobian: dimension mismatch");
    switch (kind) {
        case ForceKind::Linear: return omega;
        case ForceKind::Neural: return net.input_jacobian(x);
        case ForceKind::NeuralTimeDependent: {
            VectorXd in(d + 1);
            in.head(d) = x;
            in(d) = t;
            return net.input_jacobian(in).leftCols(d);
        }
        case ForceKind::PotentialGradient: {
            Mlp::Workspace ws;
            net.forward(MatrixXd(x), ws);
            MatrixXd hess(d, d);
            Mlp::Tangent tan;
            for (int i = 0; i < d; ++i) {
                MatrixXd ei = MatrixXd::Zero(d, 1);
                ei(i, 0) = 1.0;
                net.jvp(ws, ei, tan);
                hess.col(i) = net.backward_dual(ws, tan, MatrixXd::Zero(1, 1),
                                                MatrixXd::Ones(1, 1))
                                  .col(0);
            }
            return -hess;
        }
    }
    return {};
}

Eigen::VectorXd ForceModel::parameters() const {
    if (kind == ForceKind::Linear)
        return Eigen::Map<const VectorXd>(omega.data(), omega.size());
    return net.flatten();
}

void ForceModel::set_parameters(const Eigen::VectorXd& p) {
    if (kind == ForceKind::Linear) {
        if (p.size() != omega.size())
            throw std::invalid_argument("set_parameters: wrong length");
        omega = Eigen::Map<const MatrixXd>(p.data(), omega.rows(), omega.cols());
        return;
    }
    net.unflatten(p);
}

int ForceModel::parameter_count() const {
    return kind == ForceKind::Linear ? int(omega.size()) : net.parameter_count();
}

Eigen::MatrixXd infer_jacobian(const ForceModel& force, const Eigen::MatrixXd& cloud, double t) {
    const int d = force.dim();
    if (cloud.cols() != d) throw std::invalid_argument("infer_jacobian: dimension mismatch");
    if (cloud.rows() == 0) throw std::invalid_argument("infer_jacobian: empty cloud");
    MatrixXd acc = MatrixXd::Zero(d, d);
    for (Index r = 0; r < cloud.rows(); ++r)
        acc += force.raw_jacobian(cloud.row(r).transpose(), t);
    return acc / double(cloud.rows());
}

NoiseModel NoiseModel::cle(double m, double ell, double volume, bool concentration_units) {
    if (m < 0 || ell < 0 || volume <= 0)
        throw std::invalid_argument("NoiseModel::cle: need m, ell >= 0 and volume > 0");
    NoiseModel nm;
    nm.kind = Kind::Cle;
    nm.m = m;
    nm.ell = ell;
    nm.volume = volume;
    nm.concentration_units = concentration_units;
    return nm;
}

NoiseModel NoiseModel::additive(double sigma) {
    if (sigma < 0) throw std::invalid_argument("NoiseModel::additive: sigma must be >= 0");
    NoiseModel nm;
    nm.kind = Kind::Additive;
    nm.sigma = sigma;
    return nm;
}

NoiseModel NoiseModel::sqrt_state(double sigma) {
    if (sigma < 0) throw std::invalid_argument("NoiseModel::sqrt_state: sigma must be >= 0");
    NoiseModel nm;
    nm.kind = Kind::SqrtState;
    nm.sigma = sigma;
    return nm;
}

NoiseModel NoiseModel::deterministic() { return NoiseModel{}; }

NoiseModel NoiseModel::constant_tensor(Eigen::MatrixXd d_hat) {
    if (d_hat.rows() != d_hat.cols() || d_hat.rows() == 0)
        throw std::invalid_argument("NoiseModel::constant_tensor: matrix must be square");
    if (!d_hat.isApprox(d_hat.transpose(), 1e-12))
        throw std::invalid_argument("NoiseModel::constant_tensor: matrix must be symmetric");
    NoiseModel nm;
    nm.kind = Kind::ConstantTensor;
    nm.tensor = std::move(d_hat);
    return nm;
}

Eigen::MatrixXd noise_diffusion(const NoiseModel& noise, const ForceModel& force,
                                const Eigen::VectorXd& x, double t) {
    const Index d = x.size();
    switch (noise.kind) {
        case NoiseModel::Kind::Deterministic: return MatrixXd::Zero(d, d);
        case NoiseModel::Kind::Additive:
            return 0.5 * noise.sigma * noise.sigma * MatrixXd::Identity(d, d);
        case NoiseModel::Kind::SqrtState:
            return (0.5 * noise.sigma * noise.sigma * x.array().max(0.0)).matrix().asDiagonal();
        case NoiseModel::Kind::ConstantTensor:
            if (noise.tensor.rows() != d)
                throw std::invalid_argument("noise_diffusion: tensor dimension mismatch");
            return noise.tensor;
        case NoiseModel::Kind::Cle: {
            const VectorXd raw = force.raw(MatrixXd(x), t).col(0);
            const VectorXd inner = noise.m * raw + noise.ell * x;
            return (cle_alpha(noise) * inner.array().max(0.0)).matrix().asDiagonal();
        }
    }
    return MatrixXd::Zero(d, d);
}

Eigen::VectorXd noise_divergence(const NoiseModel& noise, const ForceModel& force,
                                 const Eigen::VectorXd& x, double t, bool finite_difference) {
    const Index d = x.size();
    if (finite_difference) {
        VectorXd div = VectorXd::Zero(d);
        for (Index j = 0; j < d; ++j) {
            const double h = 1e-5 * (1.0 + std::abs(x(j)));
            VectorXd xp = x, xm = x;
            xp(j) += h;
            xm(j) -= h;
            div += (noise_diffusion(noise, force, xp, t).col(j) -
                    noise_diffusion(noise, force, xm, t).col(j)) /
                   (2 * h);
        }
        return div;
    }
    switch (noise.kind) {
        case NoiseModel::Kind::Deterministic:
        case NoiseModel::Kind::Additive:
        case NoiseModel::Kind::ConstantTensor:
            return VectorXd::Zero(d);
        case NoiseModel::Kind::SqrtState:
            return (0.5 * noise.sigma * noise.sigma *
                    (x.array() > 0.0).cast<double>())
                .matrix();
        case NoiseModel::Kind::Cle: {
            const VectorXd raw = force.raw(MatrixXd(x), t).col(0);
            const VectorXd jd = force.raw_jacobian(x, t).diagonal();
            const Eigen::ArrayXd inner = noise.m * raw.array() + noise.ell * x.array();
            const Eigen::ArrayXd mask = (inner > 0.0).cast<double>();
            return (cle_alpha(noise) * (noise.m * jd.array() + noise.ell) * mask).matrix();
        }
    }
    return VectorXd::Zero(d);
}

Eigen::VectorXd pf_rhs(const ForceModel& force, const NoiseModel& noise,
                       const ScoreFunction& score, const Eigen::VectorXd& x, double t) {
    if (x.size() != force.dim()) throw std::invalid_argument("pf_rhs: dimension mismatch");
    require_score(noise, score, int(x.size()));
    StageEval ev;
    build_stage(force, noise, score, MatrixXd(x), t, ev, nullptr);
    return stage_velocity(force, noise, ev).col(0);
}

Eigen::MatrixXd push_samples(const ForceModel& force, const NoiseModel& noise,
                             const ScoreFunction& score, const Eigen::MatrixXd& cloud,
                             double t0, double t1, int steps, Integrator method,
                             PushStats* stats) {
    if (steps < 1) throw std::invalid_argument("push_samples: steps must be >= 1");
    if (!(t1 > t0)) throw std::invalid_argument("push_samples: need t1 > t0");
    if (cloud.cols() != force.dim())
        throw std::invalid_argument("push_samples: cloud dimension mismatch");
    if (cloud.rows() == 0) throw std::invalid_argument("push_samples: empty cloud");
    require_score(noise, score, force.dim());
    PushStats local;
    MatrixXd x = integrate_cols(force, noise, score, cloud.transpose(), t0, t1, steps, method,
                                stats ? stats : &local, nullptr);
    return x.transpose();
}

double gaussian_w2_empirical(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b, bool* floored,
                             Eigen::MatrixXd* grad_a) {
    if (a.cols() != b.cols())
        throw std::invalid_argument("gaussian_w2_empirical: dimension mismatch");
    const Index d = a.cols();
    if (a.rows() <= d || b.rows() <= d)
        throw std::invalid_argument("gaussian_w2_empirical: need more samples than dimensions");
    const GaussianFit fa = fit_gaussian(a);
    const GaussianFit fb = fit_gaussian(b);
    if (floored) *floored = fa.floored || fb.floored;
    const double value = w2_squared(fa.state, fb.state);
    if (grad_a) {
        const MatrixXd rb = matrix_sqrt_psd(fb.state.cov);
        const MatrixXd ms = matrix_sqrt_psd(rb * fa.state.cov * rb);
        MatrixXd g = MatrixXd::Identity(d, d) - rb * ms.ldlt().solve(rb);
        g = (0.5 * (g + g.transpose())).eval();
        const Index n = a.rows();
        const VectorXd dm = fa.state.mean - fb.state.mean;
        const MatrixXd centered = a.rowwise() - fa.state.mean.transpose();
        grad_a->resize(n, d);
        grad_a->rowwise() = (2.0 / double(n)) * dm.transpose();
        grad_a->noalias() += (2.0 / double(n - 1)) * centered * g;
    }
    return value;
}

double jacobian_penalty_cloud(const ForceModel& force, const Eigen::MatrixXd& cloud,
                              int reg_samples, Rng& rng, double t,
                              Eigen::VectorXd* grad_params) {
    const int d = force.dim();
    if (cloud.cols() != d) throw std::invalid_argument("jacobian_penalty: dimension mismatch");
    if (cloud.rows() == 0) throw std::invalid_argument("jacobian_penalty: empty cloud");
    const double ell = force.degradation;

    if (force.kind == ForceKind::Linear) {
        const MatrixXd j = force.omega - ell * MatrixXd::Identity(d, d);
        if (grad_params) {
            const MatrixXd g = 2.0 * j;
            *grad_params = Eigen::Map<const VectorXd>(g.data(), g.size());
        }
        return j.squaredNorm();
    }

    const MatrixXd sub = subsample_rows(cloud, reg_samples, rng);
    const Index ns = sub.rows();
    const MatrixXd x = sub.transpose();
    Mlp::Workspace ws;
    Mlp::Tangent tan;

    if (force.kind == ForceKind::PotentialGradient) {
        if (grad_params)
            throw std::invalid_argument(
                "jacobian_penalty: parameter gradients of a potential force need third "
                "derivatives; not supported");
        force.net.forward(x, ws);
        double total = 0.0;
        for (int i = 0; i < d; ++i) {
            MatrixXd ei = MatrixXd::Zero(d, ns);
            ei.row(i).setOnes();
            force.net.jvp(ws, ei, tan);
            MatrixXd col = -force.net.backward_dual(ws, tan, MatrixXd::Zero(1, ns),
                                                    MatrixXd::Ones(1, ns));
            col.row(i).array() -= ell;
            total += col.squaredNorm();
        }
        return total / double(ns);
    }

    const bool td = force.kind == ForceKind::NeuralTimeDependent;
    force.net.forward(td ? with_time_row(x, t) : x, ws);
    MlpGrads acc = force.net.zero_grads();
    const Index in_rows = force.net.input_dim();
    double total = 0.0;
    for (int i = 0; i < d; ++i) {
        MatrixXd ei = MatrixXd::Zero(in_rows, ns);
        ei.row(i).setOnes();
        MatrixXd u = force.net.jvp(ws, ei, tan);
        u.row(i).array() -= ell;
        total += u.squaredNorm();
        if (grad_params) {
            const MatrixXd ubar = (2.0 / double(ns)) * u;
            force.net.backward_dual(ws, tan, MatrixXd::Zero(d, ns), ubar, &acc);
        }
    }
    if (grad_params) *grad_params = force.net.flatten(acc);
    return total / double(ns);
}

double jacobian_penalty(const ForceModel& force, const std::vector<Eigen::MatrixXd>& clouds,
                        const Eigen::VectorXd& times, int reg_samples, Rng& rng) {
    if (Index(clouds.size()) != times.size() || clouds.size() < 2)
        throw std::invalid_argument("jacobian_penalty: need matching clouds and times (>= 2)");
    double total = 0.0;
    for (std::size_t k = 1; k < clouds.size(); ++k) {
        const double dt = times[Index(k)] - times[Index(k - 1)];
        if (dt <= 0) throw std::invalid_argument("jacobian_penalty: times must increase");
        total += dt * jacobian_penalty_cloud(force, clouds[k], reg_samples, rng, times[Index(k)]);
    }
    return total;
}

LossBreakdown total_loss(const InferenceProblem& problem, Eigen::VectorXd* grad, int step) {
    const SnapshotDataset& data = problem.data;
    const PFIConfig& cfg = problem.config;
    const ForceModel& force = problem.force;
    const int d = force.dim();
    const int K = int(data.snapshots.size()) - 1;
    if (K < 1) throw std::invalid_argument("total_loss: need at least two snapshots");
    if (data.times.size() != Index(data.snapshots.size()))
        throw std::invalid_argument("total_loss: times/snapshots mismatch");
    for (const auto& s : data.snapshots)
        if (s.cols() != d) throw std::invalid_argument("total_loss: snapshot dimension mismatch");
    if (cfg.steps < 1) throw std::invalid_argument("total_loss: integrator steps must be >= 1");
    if (cfg.lambda < 0) throw std::invalid_argument("total_loss: lambda must be >= 0");
    require_score(problem.noise, problem.score, d);
    if (grad && force.kind == ForceKind::PotentialGradient) {
        if (problem.noise.kind == NoiseModel::Kind::Cle)
            throw std::invalid_argument(
                "total_loss: CLE prior with a potential force is not differentiable (third "
                "derivatives); use another prior");
        if (cfg.lambda > 0)
            throw std::invalid_argument(
                "total_loss: Jacobian penalty gradients are unsupported for potential forces; "
                "set lambda = 0");
    }
    if (cfg.batch_size > 0 && cfg.distance == DistanceKind::GaussianW2 && cfg.batch_size <= d)
        throw std::invalid_argument("total_loss: batch_size must exceed the dimension");

    Rng base(cfg.seed);
    const bool use_net = force.kind != ForceKind::Linear;
    MlpGrads netg;
    MatrixXd omegag;
    if (grad) {
        if (use_net)
            netg = force.net.zero_grads();
        else
            omegag = MatrixXd::Zero(d, d);
    }

    LossBreakdown out;
    PushStats stats;
    SinkhornOptions sopt;
    sopt.eps = cfg.sinkhorn_eps;
    sopt.unroll_steps = cfg.sinkhorn_unroll;

    for (int k = 1; k <= K; ++k) {
        MatrixXd src = data.snapshots[std::size_t(k - 1)];
        MatrixXd tgt = data.snapshots[std::size_t(k)];
        if (cfg.batch_size > 0) {
            src = subsample_rows(src, cfg.batch_size,
                                 base.substream("push-batch", std::uint64_t(step) * K + k - 1));
            tgt = subsample_rows(tgt, cfg.batch_size,
                                 base.substream("target-batch", std::uint64_t(step) * K + k - 1));
        }
        const double t0 = data.times[k - 1];
        const double t1 = data.times[k];
        if (!(t1 > t0)) throw std::invalid_argument("total_loss: times must increase");
        Tape tape;
        MatrixXd pushed =
            integrate_cols(force, problem.noise, problem.score, src.transpose(), t0, t1,
                           cfg.steps, cfg.integrator, &stats, grad ? &tape : nullptr);
        const MatrixXd arrived = pushed.transpose();

        double dist = 0.0;
        MatrixXd ga;
        if (cfg.distance == DistanceKind::GaussianW2) {
            bool fl = false;
            dist = gaussian_w2_empirical(arrived, tgt, &fl, grad ? &ga : nullptr);
            if (fl) out.covariance_floored++;
        } else {
            const SinkhornDivergence sv =
                sinkhorn_divergence_empirical(arrived, tgt, sopt, grad ? &ga : nullptr);
            if (!sv.converged()) out.sinkhorn_nonconverged++;
            dist = sv.value;
        }
        out.distances.push_back(dist);
        out.total += dist;
        if (grad)
            integrate_reverse(force, problem.noise, problem.score, tape, ga.transpose(),
                              use_net ? &netg : nullptr, use_net ? nullptr : &omegag);
    }

    VectorXd pen_grad;
    const bool want_pen_grad =
        grad && cfg.lambda > 0 && force.kind != ForceKind::PotentialGradient;
    if (want_pen_grad) pen_grad = VectorXd::Zero(force.parameter_count());
    for (int k = 1; k <= K; ++k) {
        Rng sub = base.substream("reg", std::uint64_t(step) * K + k);
        VectorXd gp;
        const double pen =
            jacobian_penalty_cloud(force, data.snapshots[std::size_t(k)], cfg.reg_samples, sub,
                                   data.times[k], want_pen_grad ? &gp : nullptr);
        const double dt = data.times[k] - data.times[k - 1];
        out.penalty += dt * pen;
        if (want_pen_grad) pen_grad += (cfg.lambda * dt) * gp;
    }
    out.total += cfg.lambda * out.penalty;
    out.diffusion_clamped = stats.diffusion_clamped;

    if (grad) {
        VectorXd g = use_net ? force.net.flatten(netg)
                             : VectorXd(Eigen::Map<const VectorXd>(omegag.data(), omegag.size()));
        if (want_pen_grad) g += pen_grad;
        *grad = std::move(g);
    }
    return out;
}

FitResult train_force(const InferenceProblem& problem) {
    InferenceProblem p = problem;
    Adam adam;
    adam.lr = p.config.learning_rate;
    if (adam.lr <= 0) throw std::invalid_argument("train_force: learning rate must be > 0");
    if (p.config.max_steps < 1) throw std::invalid_argument("train_force: max_steps must be >= 1");

    VectorXd params = p.force.parameters();
    VectorXd last_good = params;
    LossReport rep;
    const int window = std::max(1, p.config.stop_window);

    for (int stepi = 0; stepi < p.config.max_steps; ++stepi) {
        VectorXd g;
        LossBreakdown lb;
        // A diverging iterate surfaces as push_samples throwing on a
        // non-finite state; fold that into the same abort path as a NaN
        // loss. Configuration errors (invalid_argument) still propagate.
        bool blew_up = false;
        try {
            lb = total_loss(p, &g, stepi);
        } catch (const std::runtime_error&) {
            blew_up = true;
        }
        if (blew_up || !std::isfinite(lb.total) || !g.allFinite()) {
            rep.aborted = true;
            rep.stop_reason = "nan_abort";
            p.force.set_parameters(last_good);
            break;
        }
        last_good = params;
        rep.history.push_back(lb.total);
        rep.last = lb;
        const int done = int(rep.history.size());
        if (done > window) {
            const double prev = rep.history[std::size_t(done - 1 - window)];
            const double rel =
                std::abs(rep.history.back() - prev) / std::max(std::abs(prev), 1e-300);
            if (rel < p.config.stop_rel_change) {
                rep.stop_reason = "converged";
                break;
            }
        }
        adam.step(params, g);
        p.force.set_parameters(params);
    }
    if (rep.stop_reason.empty()) rep.stop_reason = "max_steps";
    rep.steps_taken = int(rep.history.size());
    return {std::move(p.force), std::move(rep)};
}

}  // namespace pfi
