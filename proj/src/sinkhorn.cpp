#include "pfi/sinkhorn.hpp"

#include <cmath>
#include <deque>
#include <stdexcept>
#include <utility>
#include <vector>

namespace pfi {

namespace {

// All iterations work on scaled potentials u = f/eps, v = g/eps and the
// scaled cost c = C/eps, streamed in row blocks so the n x m kernel is never
// materialized.
struct Problem {
    const Eigen::MatrixXd& a;
    const Eigen::MatrixXd& b;
    Eigen::VectorXd an, bn;  // squared row norms
    double eps;
    double log_mu, log_nu;  // uniform weights
    Eigen::Index block;

    Problem(const Eigen::MatrixXd& a_, const Eigen::MatrixXd& b_, double eps_)
        : a(a_), b(b_), eps(eps_) {
        an = a.rowwise().squaredNorm();
        bn = b.rowwise().squaredNorm();
        log_mu = -std::log(double(a.rows()));
        log_nu = -std::log(double(b.rows()));
        block = std::max<Eigen::Index>(1, Eigen::Index(4e6) / std::max<Eigen::Index>(b.rows(), 1));
    }

    // Scaled cost block for rows [r, r + nr): c_ij = |a_i - b_j|^2 / eps.
    Eigen::MatrixXd cost_block(Eigen::Index r, Eigen::Index nr) const {
        Eigen::MatrixXd c = -2.0 * (a.middleRows(r, nr) * b.transpose());
        c.colwise() += an.segment(r, nr);
        c.rowwise() += bn.transpose();
        return c / eps;
    }
};

// u_i = -lse_j(v_j + log_nu - c_ij) for each row of the block structure.
Eigen::VectorXd update_rows(const Problem& p, const Eigen::VectorXd& v) {
    Eigen::VectorXd u(p.a.rows());
    for (Eigen::Index r = 0; r < p.a.rows(); r += p.block) {
        const Eigen::Index nr = std::min(p.block, p.a.rows() - r);
        Eigen::MatrixXd s = (-p.cost_block(r, nr)).rowwise() + (v.array() + p.log_nu).matrix().transpose();
        for (Eigen::Index i = 0; i < nr; ++i) {
            const double m = s.row(i).maxCoeff();
            u[r + i] = -(m + std::log((s.row(i).array() - m).exp().sum()));
        }
    }
    return u;
}

// v_j = -lse_i(u_i + log_mu - c_ij); accumulated blockwise over rows.
Eigen::VectorXd update_cols(const Problem& p, const Eigen::VectorXd& u) {
    // Stream a running logsumexp per column.
    Eigen::VectorXd vmax = Eigen::VectorXd::Constant(p.b.rows(), -std::numeric_limits<double>::infinity());
    Eigen::VectorXd acc = Eigen::VectorXd::Zero(p.b.rows());
    for (Eigen::Index r = 0; r < p.a.rows(); r += p.block) {
        const Eigen::Index nr = std::min(p.block, p.a.rows() - r);
        Eigen::MatrixXd s = (-p.cost_block(r, nr)).colwise() + (u.segment(r, nr).array() + p.log_mu).matrix();
        for (Eigen::Index j = 0; j < p.b.rows(); ++j) {
            const double m = s.col(j).maxCoeff();
            if (m <= vmax[j]) {
                acc[j] += (s.col(j).array() - vmax[j]).exp().sum();
            } else {
                acc[j] = acc[j] * std::exp(vmax[j] - m) + (s.col(j).array() - m).exp().sum();
                vmax[j] = m;
            }
        }
    }
    return -(vmax.array() + acc.array().log()).matrix();
}

// Accumulates position gradients for a weight field w_ij streamed as
// w_ij = mu nu exp(u_i + v_j - c_ij) * scale (the transport plan when scale=1):
// grad_a_i += 2 scale (sum_j w_ij) (a_i) - 2 (sum_j w_ij b_j), likewise for b.
// Also returns the total mass and per-column sums when requested.
struct PlanPass {
    double mass = 0.0;
    Eigen::VectorXd row_sum, col_sum;
};

PlanPass plan_pass(const Problem& p, const Eigen::VectorXd& u, const Eigen::VectorXd& v,
                   double scale, Eigen::MatrixXd* grad_a, Eigen::MatrixXd* grad_b) {
    PlanPass out;
    out.row_sum = Eigen::VectorXd::Zero(p.a.rows());
    out.col_sum = Eigen::VectorXd::Zero(p.b.rows());
    const double cost_scale = 2.0 * scale;
    for (Eigen::Index r = 0; r < p.a.rows(); r += p.block) {
        const Eigen::Index nr = std::min(p.block, p.a.rows() - r);
        Eigen::MatrixXd w =
            ((-p.cost_block(r, nr)).colwise() + (u.segment(r, nr).array() + p.log_mu).matrix())
                .rowwise() +
            (v.array() + p.log_nu).matrix().transpose();
        w = w.array().exp();
        const Eigen::VectorXd rs = w.rowwise().sum();
        out.row_sum.segment(r, nr) = rs;
        out.col_sum += w.colwise().sum();
        if (grad_a) {
            grad_a->middleRows(r, nr) +=
                cost_scale * (rs.asDiagonal() * p.a.middleRows(r, nr) - w * p.b);
        }
        if (grad_b) {
            *grad_b += cost_scale *
                       (w.colwise().sum().transpose().asDiagonal() * p.b -
                        w.transpose() * p.a.middleRows(r, nr));
        }
    }
    out.mass = out.row_sum.sum();
    return out;
}

// Reverse sweep of one half-update. For ubar given on u = -lse_j(v + log_nu - c):
// sigma_ij = exp(u_i + v_j + log_nu - c_ij) (rows sum to one), then
// vbar_j -= sum_i ubar_i sigma_ij and the cost adjoint cbar_ij = ubar_i sigma_ij
// feeds the position gradients directly.
void reverse_row_update(const Problem& p, const Eigen::VectorXd& u, const Eigen::VectorXd& v,
                        const Eigen::VectorXd& ubar, Eigen::VectorXd& vbar,
                        Eigen::MatrixXd* grad_a, Eigen::MatrixXd* grad_b) {
    for (Eigen::Index r = 0; r < p.a.rows(); r += p.block) {
        const Eigen::Index nr = std::min(p.block, p.a.rows() - r);
        Eigen::MatrixXd sig =
            ((-p.cost_block(r, nr)).colwise() + u.segment(r, nr)).rowwise() +
            (v.array() + p.log_nu).matrix().transpose();
        sig = sig.array().exp();
        // cbar = diag(ubar_block) * sig; chain c = |a - b|^2 / eps.
        Eigen::MatrixXd cbar = ubar.segment(r, nr).asDiagonal() * sig;
        vbar -= cbar.colwise().sum();
        const double cs = 2.0 / p.eps;
        const Eigen::VectorXd rs = cbar.rowwise().sum();
        if (grad_a)
            grad_a->middleRows(r, nr) +=
                cs * (rs.asDiagonal() * p.a.middleRows(r, nr) - cbar * p.b);
        if (grad_b)
            *grad_b += cs * (cbar.colwise().sum().transpose().asDiagonal() * p.b -
                             cbar.transpose() * p.a.middleRows(r, nr));
    }
}

// Same for v = -lse_i(u + log_mu - c): sigma columns sum to one.
void reverse_col_update(const Problem& p, const Eigen::VectorXd& u, const Eigen::VectorXd& v,
                        const Eigen::VectorXd& vbar, Eigen::VectorXd& ubar,
                        Eigen::MatrixXd* grad_a, Eigen::MatrixXd* grad_b) {
    for (Eigen::Index r = 0; r < p.a.rows(); r += p.block) {
        const Eigen::Index nr = std::min(p.block, p.a.rows() - r);
        Eigen::MatrixXd sig =
            ((-p.cost_block(r, nr)).colwise() + (u.segment(r, nr).array() + p.log_mu).matrix())
                .rowwise() +
            v.transpose();
        sig = sig.array().exp();
        Eigen::MatrixXd cbar = sig * vbar.asDiagonal();
        ubar.segment(r, nr) -= cbar.rowwise().sum();
        const double cs = 2.0 / p.eps;
        const Eigen::VectorXd rs = cbar.rowwise().sum();
        if (grad_a)
            grad_a->middleRows(r, nr) +=
                cs * (rs.asDiagonal() * p.a.middleRows(r, nr) - cbar * p.b);
        if (grad_b)
            *grad_b += cs * (cbar.colwise().sum().transpose().asDiagonal() * p.b -
                             cbar.transpose() * p.a.middleRows(r, nr));
    }
}

}  // namespace

SinkhornResult sinkhorn_cost(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b,
                             const SinkhornOptions& opt, Eigen::MatrixXd* grad_a,
                             Eigen::MatrixXd* grad_b) {
    if (a.rows() == 0 || b.rows() == 0)
        throw std::invalid_argument("sinkhorn_cost: clouds must be nonempty");
    if (a.cols() != b.cols()) throw std::invalid_argument("sinkhorn_cost: dimension mismatch");
    if (opt.eps <= 0.0) throw std::invalid_argument("sinkhorn_cost: eps must be positive");

    Problem p(a, b, opt.eps);
    Eigen::VectorXd u = Eigen::VectorXd::Zero(a.rows());
    Eigen::VectorXd v = Eigen::VectorXd::Zero(b.rows());
    // (u_prev, v_prev) pairs entering each of the stored tail updates.
    std::deque<std::pair<Eigen::VectorXd, Eigen::VectorXd>> tail;

    SinkhornResult res;
    for (int it = 0; it < opt.max_iters; ++it) {
        if (opt.unroll_steps > 0) {
            tail.emplace_back(u, v);
            if (int(tail.size()) > opt.unroll_steps) tail.pop_front();
        }
        u = update_rows(p, v);
        Eigen::VectorXd v_next = update_cols(p, u);
        // After the row update the row marginals are exact; the column
        // violation is |nu_j (e^{v_j - v_next_j} - 1)| without an extra pass.
        res.marginal_violation =
            ((v - v_next).array().exp() - 1.0).abs().maxCoeff() * std::exp(p.log_nu);
        v = std::move(v_next);
        res.iterations = it + 1;
        if (res.marginal_violation < opt.marginal_tol) {
            res.converged = true;
            break;
        }
    }

    // Dual value: eps [<mu,u> + <nu,v> - (mass - 1)] in scaled variables.
    PlanPass plan = plan_pass(p, u, v, 1.0, grad_a, grad_b);
    res.value = opt.eps * (u.mean() + v.mean() - (plan.mass - 1.0));

    if (grad_a || grad_b) {
        // plan_pass already accumulated the mass term's cost adjoint: the
        // dual carries -eps(mass - 1) and d(-eps mass)/dC_ij = +pi_ij, which
        // is the envelope gradient. The remaining direct adjoints sit on the
        // potentials and equal eps times the marginal residuals; they vanish
        // at the exact fixed point, and the unrolled tail propagates them.
        Eigen::VectorXd ubar =
            opt.eps * (Eigen::VectorXd::Constant(a.rows(), std::exp(p.log_mu)) - plan.row_sum);
        Eigen::VectorXd vbar =
            opt.eps * (Eigen::VectorXd::Constant(b.rows(), std::exp(p.log_nu)) - plan.col_sum);
        for (auto rit = tail.rbegin(); rit != tail.rend(); ++rit) {
            const Eigen::VectorXd& v_in = rit->second;  // v entering this iteration
            // Forward order was u_new = rows(v_in); v_new = cols(u_new);
            // reverse consumes vbar first, then the combined ubar.
            const Eigen::VectorXd u_new = update_rows(p, v_in);
            Eigen::VectorXd u_acc = Eigen::VectorXd::Zero(a.rows());
            reverse_col_update(p, u_new, update_cols(p, u_new), vbar, u_acc, grad_a, grad_b);
            ubar += u_acc;
            Eigen::VectorXd v_acc = Eigen::VectorXd::Zero(b.rows());
            reverse_row_update(p, u_new, v_in, ubar, v_acc, grad_a, grad_b);
            vbar = std::move(v_acc);
            ubar.setZero();
        }
        // Adjoint mass left on the oldest v is truncated by construction.
    }
    return res;
}

SinkhornDivergence sinkhorn_divergence_empirical(const Eigen::MatrixXd& a,
                                                 const Eigen::MatrixXd& b,
                                                 const SinkhornOptions& opt,
                                                 Eigen::MatrixXd* grad_a) {
    SinkhornDivergence out;
    Eigen::MatrixXd ga, ga1, ga2;
    if (grad_a) {
        ga = Eigen::MatrixXd::Zero(a.rows(), a.cols());
        ga1 = Eigen::MatrixXd::Zero(a.rows(), a.cols());
        ga2 = Eigen::MatrixXd::Zero(a.rows(), a.cols());
    }
    out.cross = sinkhorn_cost(a, b, opt, grad_a ? &ga : nullptr);
    out.self_a = sinkhorn_cost(a, a, opt, grad_a ? &ga1 : nullptr, grad_a ? &ga2 : nullptr);
    out.self_b = sinkhorn_cost(b, b, opt);
    out.value = out.cross.value - 0.5 * (out.self_a.value + out.self_b.value);
    if (grad_a) *grad_a = ga - 0.5 * (ga1 + ga2);
    return out;
}

}  // namespace pfi
