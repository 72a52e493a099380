#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "pfi/dataset.hpp"
#include "pfi/net.hpp"
#include "pfi/rng.hpp"

namespace pfi {

/// Hidden sizes used in the benchmarks, keyed by state dimension
/// (d=10: 3x50, d=30: 4x100, d=5: 4x50, d=11: 6x100); other dimensions get a
/// generic 4-layer default. Returns full dims {d+1, hidden..., d}.
std::vector<int> score_architecture(int d);

/// s(x, t) evaluation for a net over the concatenated input (x, t).
Eigen::VectorXd score_eval(const Mlp& net, const Eigen::VectorXd& x, double t);
Eigen::MatrixXd score_eval(const Mlp& net, const Eigen::MatrixXd& x_cols, double t);

struct ScoreTrainConfig {
    int epochs = 200;
    int batch_size = 128;
    double lr = 1e-3;
    double adam_beta1 = 0.9;
    double adam_beta2 = 0.999;
    double adam_eps = 1e-8;
    int projections = 1;
    enum class WeightMode { fixed, variance_normalized };
    WeightMode weight_mode = WeightMode::variance_normalized;
    double validation_fraction = 0.1;
    std::vector<int> hidden_override;  // empty: use score_architecture(d)
    std::uint64_t seed = 0;
};

/// Sliced score matching over a labeled batch: columns of x are samples,
/// t[i] their snapshot times, weight[i] the per-sample loss weight. Each
/// sample contributes weight * (0.5 ||s||^2 + mean over projections of
/// v . grad_x (v . s)) with v standard normal on the x block only. Gradients
/// accumulate into grads when given; per_sample_raw, when given, receives the
/// unweighted per-sample terms (used for variance normalization).
double ssm_loss(const Mlp& net, const Eigen::MatrixXd& x, const Eigen::VectorXd& t,
                const Eigen::VectorXd& weight, int projections, Rng& rng,
                MlpGrads* grads = nullptr, Eigen::VectorXd* per_sample_raw = nullptr);

struct ScoreTrainLog {
    std::vector<double> train_loss;  // running mean of weighted batch losses, per epoch
    std::vector<double> val_loss;
    std::vector<Eigen::VectorXd> lambda_history;  // per-snapshot weights, per epoch
    std::string notes;
};

struct TrainedScore {
    Mlp net;
    Eigen::VectorXd lambda;
    ScoreTrainLog log;
    std::uint64_t dataset_hash = 0;
};

/// Adam training over minibatches that mix all snapshot times. The
/// variance-normalized mode keeps lambda_k as the inverse EMA standard
/// deviation (factor 0.99, floor 1e-6) of snapshot-k loss contributions; this
/// stand-in scheme is recorded in the log notes. Throws on divergence.
TrainedScore train_score(const SnapshotDataset& ds, const ScoreTrainConfig& cfg);

/// Unadjusted Langevin updates x += (eps/2) s(x) + sqrt(eps) z on a cloud
/// with rows as samples; score_batch maps an n x d cloud to per-row scores.
Eigen::MatrixXd langevin_sample(const std::function<Eigen::MatrixXd(const Eigen::MatrixXd&)>&
                                    score_batch,
                                Eigen::MatrixXd cloud, int n_steps, double eps_step, Rng& rng);

struct ScoreValidation {
    Eigen::VectorXd times;
    Eigen::VectorXd ed_generated;  // energy distance generated-vs-held-out
    Eigen::VectorXd ed_baseline;   // data-vs-data resampling baseline
};

/// Langevin resampling check per snapshot: half the data seeds the chain, the
/// other half is the reference; the baseline is the half-vs-half distance.
ScoreValidation validate_score(const Mlp& net, const SnapshotDataset& ds, int n_steps,
                               double eps_step, std::uint64_t seed);

}  // namespace pfi
