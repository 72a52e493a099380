#include "pfi/score.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>
#include <stdexcept>

#include "pfi/evaluate.hpp"

namespace pfi {

std::vector<int> score_architecture(int d) {
    if (d < 1) throw std::invalid_argument("score_architecture: dimension must be positive");
    int layers = 4, width = 50;
    switch (d) {
        case 10: layers = 3, width = 50; break;
        case 30: layers = 4, width = 100; break;
        case 5: layers = 4, width = 50; break;
        case 11: layers = 6, width = 100; break;
        default: width = d > 15 ? 100 : 50; break;
    }
    std::vector<int> dims{d + 1};
    dims.insert(dims.end(), std::size_t(layers), width);
    dims.push_back(d);
    return dims;
}

Eigen::VectorXd score_eval(const Mlp& net, const Eigen::VectorXd& x, double t) {
    return score_eval(net, Eigen::MatrixXd(x), t).col(0);
}

Eigen::MatrixXd score_eval(const Mlp& net, const Eigen::MatrixXd& x_cols, double t) {
    if (x_cols.rows() + 1 != net.input_dim())
        throw std::invalid_argument("score_eval: net expects a time channel after x");
    Eigen::MatrixXd in(x_cols.rows() + 1, x_cols.cols());
    in.topRows(x_cols.rows()) = x_cols;
    in.row(x_cols.rows()).setConstant(t);
    return net.forward(in);
}

double ssm_loss(const Mlp& net, const Eigen::MatrixXd& x, const Eigen::VectorXd& t,
                const Eigen::VectorXd& weight, int projections, Rng& rng, MlpGrads* grads,
                Eigen::VectorXd* per_sample_raw) {
    const int d = int(x.rows());
    const int n = int(x.cols());
    if (n == 0) throw std::invalid_argument("ssm_loss: empty batch");
    if (t.size() != n || weight.size() != n)
        throw std::invalid_argument("ssm_loss: label length mismatch");
    if (projections < 1) throw std::invalid_argument("ssm_loss: need at least one projection");
    if (net.input_dim() != d + 1 || net.output_dim() != d)
        throw std::invalid_argument("ssm_loss: net shape does not match data");

    Eigen::MatrixXd in(d + 1, n);
    in.topRows(d) = x;
    in.row(d) = t.transpose();
    Mlp::Workspace ws;
    Eigen::MatrixXd y = net.forward(in, ws);

    Eigen::VectorXd raw = 0.5 * y.colwise().squaredNorm().transpose();
    for (int p = 0; p < projections; ++p) {
        Eigen::MatrixXd v = Eigen::MatrixXd::Zero(d + 1, n);
        v.topRows(d) = rng.normal_matrix(d, n);  // no tangent on the time channel
        Mlp::Tangent tan;
        Eigen::MatrixXd u = net.jvp(ws, v, tan);
        raw += (v.topRows(d).array() * u.array()).colwise().sum().transpose().matrix() /
               double(projections);
        if (grads) {
            Eigen::MatrixXd ybar = Eigen::MatrixXd::Zero(d, n);
            if (p == 0) ybar = y * weight.asDiagonal();
            Eigen::MatrixXd ubar =
                v.topRows(d) * (weight / double(projections)).asDiagonal();
            net.backward_dual(ws, tan, ybar, ubar, grads);
        }
    }
    if (per_sample_raw) *per_sample_raw = raw;
    return weight.dot(raw);
}

namespace {

struct PooledData {
    Eigen::MatrixXd x;            // d x N
    Eigen::VectorXd t;            // snapshot time per sample
    std::vector<int> snap;        // snapshot index per sample
};

void pool_split(const SnapshotDataset& ds, double val_fraction, const Rng& base,
                PooledData& train, PooledData& val) {
    const int d = ds.dim();
    std::vector<Eigen::VectorXd> tx, vx;
    std::vector<std::pair<double, int>> tlab, vlab;
    for (int k = 0; k < ds.snapshot_count(); ++k) {
        const Eigen::MatrixXd& snap = ds.snapshots[k];
        std::vector<int> order(snap.rows());
        std::iota(order.begin(), order.end(), 0);
        Rng shuffle = base.substream("split", std::uint64_t(k));
        for (int i = int(order.size()) - 1; i > 0; --i)
            std::swap(order[i], order[shuffle.uniform_index(std::size_t(i) + 1)]);
        const int n_val = int(std::floor(val_fraction * snap.rows()));
        for (int i = 0; i < int(order.size()); ++i) {
            bool to_val = i < n_val;
            (to_val ? vx : tx).push_back(snap.row(order[i]).transpose());
            (to_val ? vlab : tlab).push_back({ds.times[k], k});
        }
    }
    auto fill = [d](const std::vector<Eigen::VectorXd>& xs,
                    const std::vector<std::pair<double, int>>& labs, PooledData& out) {
        out.x.resize(d, int(xs.size()));
        out.t.resize(int(xs.size()));
        out.snap.resize(xs.size());
        for (std::size_t i = 0; i < xs.size(); ++i) {
            out.x.col(int(i)) = xs[i];
            out.t[int(i)] = labs[i].first;
            out.snap[i] = labs[i].second;
        }
    };
    fill(tx, tlab, train);
    fill(vx, vlab, val);
}

}  // namespace

TrainedScore train_score(const SnapshotDataset& ds, const ScoreTrainConfig& cfg) {
    if (ds.snapshot_count() == 0) throw std::invalid_argument("train_score: empty dataset");
    if (cfg.lr <= 0.0) throw std::invalid_argument("train_score: learning rate must be positive");
    if (cfg.projections < 1) throw std::invalid_argument("train_score: projections must be >= 1");
    const int d = ds.dim();
    const int K1 = ds.snapshot_count();
    const Rng base(cfg.seed);

    PooledData train, val;
    pool_split(ds, cfg.validation_fraction, base, train, val);
    const int N = int(train.x.cols());
    if (N == 0) throw std::invalid_argument("train_score: no training samples after split");

    Rng init = base.substream("init");
    TrainedScore out;
    std::vector<int> dims;
    if (cfg.hidden_override.empty()) {
        dims = score_architecture(d);
    } else {
        dims.push_back(d + 1);
        dims.insert(dims.end(), cfg.hidden_override.begin(), cfg.hidden_override.end());
        dims.push_back(d);
    }
    out.net = Mlp(dims, init);
    out.dataset_hash = ds.content_hash();
    out.lambda = Eigen::VectorXd::Ones(K1);
    out.log.notes = cfg.weight_mode == ScoreTrainConfig::WeightMode::variance_normalized
                        ? "lambda: inverse EMA std of per-snapshot loss terms (0.99, floor 1e-6)"
                        : "lambda: fixed at 1";

    Adam adam;
    adam.lr = cfg.lr;
    adam.beta1 = cfg.adam_beta1;
    adam.beta2 = cfg.adam_beta2;
    adam.eps = cfg.adam_eps;
    Eigen::VectorXd params = out.net.flatten();

    Eigen::VectorXd ema_mean = Eigen::VectorXd::Zero(K1), ema_sq = Eigen::VectorXd::Zero(K1);
    Eigen::VectorXd ema_seen = Eigen::VectorXd::Zero(K1);
    const double ema_factor = 0.99, lambda_floor = 1e-6;

    std::vector<int> order(N);
    std::iota(order.begin(), order.end(), 0);
    const int B = std::min(cfg.batch_size, N);
    MlpGrads grads = out.net.zero_grads();

    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        Rng shuffle = base.substream("epoch", std::uint64_t(epoch));
        for (int i = N - 1; i > 0; --i)
            std::swap(order[i], order[shuffle.uniform_index(std::size_t(i) + 1)]);
        Rng proj = base.substream("projections", std::uint64_t(epoch));

        double epoch_loss = 0.0;
        int batches = 0;
        for (int start = 0; start + B <= N; start += B) {
            Eigen::MatrixXd xb(d, B);
            Eigen::VectorXd tb(B), wb(B);
            std::vector<int> kb(B);
            for (int i = 0; i < B; ++i) {
                const int idx = order[start + i];
                xb.col(i) = train.x.col(idx);
                tb[i] = train.t[idx];
                kb[i] = train.snap[idx];
                wb[i] = out.lambda[kb[i]] / double(B);
            }
            grads.set_zero();
            Eigen::VectorXd raw;
            double loss = ssm_loss(out.net, xb, tb, wb, cfg.projections, proj, &grads, &raw);
            if (!std::isfinite(loss)) {
                std::ostringstream msg;
                msg << "train_score: loss diverged at epoch " << epoch << " batch " << batches
                    << " (loss " << loss << ")";
                throw std::runtime_error(msg.str());
            }
            adam.step(params, out.net.flatten(grads));
            out.net.unflatten(params);
            epoch_loss += loss;
            ++batches;

            if (cfg.weight_mode == ScoreTrainConfig::WeightMode::variance_normalized) {
                // Per-snapshot batch means feed the EMA; lambda uses the
                // previous state, so the update order is use-then-update.
                Eigen::VectorXd sum = Eigen::VectorXd::Zero(K1);
                Eigen::VectorXi cnt = Eigen::VectorXi::Zero(K1);
                for (int i = 0; i < B; ++i) {
                    sum[kb[i]] += raw[i];
                    ++cnt[kb[i]];
                }
                for (int k = 0; k < K1; ++k) {
                    if (cnt[k] == 0) continue;
                    const double mk = sum[k] / cnt[k];
                    if (ema_seen[k] == 0.0) {
                        ema_mean[k] = mk;
                        ema_sq[k] = mk * mk;
                        ema_seen[k] = 1.0;
                    } else {
                        ema_mean[k] = ema_factor * ema_mean[k] + (1.0 - ema_factor) * mk;
                        ema_sq[k] = ema_factor * ema_sq[k] + (1.0 - ema_factor) * mk * mk;
                    }
                    const double var = std::max(ema_sq[k] - ema_mean[k] * ema_mean[k], 0.0);
                    out.lambda[k] = 1.0 / std::max(std::sqrt(var), lambda_floor);
                }
            }
        }
        out.log.train_loss.push_back(batches ? epoch_loss / batches : 0.0);
        out.log.lambda_history.push_back(out.lambda);

        if (val.x.cols() > 0) {
            Eigen::VectorXd wv(val.x.cols());
            for (int i = 0; i < wv.size(); ++i)
                wv[i] = out.lambda[val.snap[i]] / double(wv.size());
            Rng vproj = base.substream("val-projections", std::uint64_t(epoch));
            out.log.val_loss.push_back(
                ssm_loss(out.net, val.x, val.t, wv, cfg.projections, vproj));
        }
    }
    return out;
}

Eigen::MatrixXd langevin_sample(
    const std::function<Eigen::MatrixXd(const Eigen::MatrixXd&)>& score_batch,
    Eigen::MatrixXd cloud, int n_steps, double eps_step, Rng& rng) {
    if (eps_step <= 0.0) throw std::invalid_argument("langevin_sample: eps_step must be positive");
    const int n = int(cloud.rows()), d = int(cloud.cols());
    const double root = std::sqrt(eps_step);
    for (int step = 0; step < n_steps; ++step) {
        Eigen::MatrixXd s = score_batch(cloud);
        if (s.rows() != n || s.cols() != d)
            throw std::invalid_argument("langevin_sample: score shape mismatch");
        cloud += 0.5 * eps_step * s + root * rng.normal_matrix(n, d);
    }
    return cloud;
}

ScoreValidation validate_score(const Mlp& net, const SnapshotDataset& ds, int n_steps,
                               double eps_step, std::uint64_t seed) {
    const Rng base(seed);
    ScoreValidation out;
    out.times = ds.times;
    out.ed_generated.resize(ds.snapshot_count());
    out.ed_baseline.resize(ds.snapshot_count());
    for (int k = 0; k < ds.snapshot_count(); ++k) {
        const Eigen::MatrixXd& snap = ds.snapshots[k];
        const int n = int(snap.rows());
        if (n < 4) throw std::invalid_argument("validate_score: snapshot too small");
        std::vector<int> order(n);
        std::iota(order.begin(), order.end(), 0);
        Rng shuffle = base.substream("validate-split", std::uint64_t(k));
        for (int i = n - 1; i > 0; --i)
            std::swap(order[i], order[shuffle.uniform_index(std::size_t(i) + 1)]);
        Eigen::MatrixXd half_a(n / 2, ds.dim()), half_b(n - n / 2, ds.dim());
        for (int i = 0; i < n; ++i) {
            if (i < n / 2)
                half_a.row(i) = snap.row(order[i]);
            else
                half_b.row(i - n / 2) = snap.row(order[i]);
        }
        const double t = ds.times[k];
        std::function<Eigen::MatrixXd(const Eigen::MatrixXd&)> score_batch =
            [&net, t](const Eigen::MatrixXd& cloud) -> Eigen::MatrixXd {
            const Eigen::MatrixXd cols = cloud.transpose();
            return score_eval(net, cols, t).transpose();
        };
        Rng chain = base.substream("validate-chain", std::uint64_t(k));
        Eigen::MatrixXd generated = langevin_sample(score_batch, half_a, n_steps, eps_step,
                                                    chain);
        out.ed_generated[k] = energy_distance(generated, half_b);
        out.ed_baseline[k] = energy_distance(half_a, half_b);
    }
    return out;
}

}  // namespace pfi
