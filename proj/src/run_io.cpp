#include "pfi/run_io.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "pfi/dataset.hpp"
#include "pfi/evaluate.hpp"
#include "pfi/net.hpp"
#include "pfi/ou_theory.hpp"
#include "pfi/reaction_network.hpp"
#include "pfi/score.hpp"
#include "pfi/simulate.hpp"

namespace pfi {

namespace {

namespace fs = std::filesystem;
using nlohmann::json;
using Eigen::MatrixXd;
using Eigen::VectorXd;

void write_file(const std::string& path, const std::string& content) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write " + path);
    out << content;
}

std::string read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot read " + path);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

std::string fmt(double v) {
    std::ostringstream os;
    os.precision(17);
    os << v;
    return os.str();
}

void write_manifest(const std::string& out_dir, const std::string& command, const json& cfg) {
    json m;
    m["command"] = command;
    m["version"] = kCliVersion;
    m["config"] = cfg;
    write_file(out_dir + "/manifest.json", m.dump(2) + "\n");
}

std::string prepare_out(const json& cfg) {
    const std::string out = cfg.at("out").get<std::string>();
    fs::create_directories(out);
    return out;
}

json vec_json(const VectorXd& v) {
    json a = json::array();
    for (Eigen::Index i = 0; i < v.size(); ++i) a.push_back(v[i]);
    return a;
}

json mat_json(const MatrixXd& m) {
    json a = json::array();
    for (Eigen::Index i = 0; i < m.rows(); ++i) a.push_back(vec_json(m.row(i).transpose()));
    return a;
}

void write_matrix_csv(const std::string& path, const MatrixXd& m) {
    std::ostringstream os;
    for (Eigen::Index i = 0; i < m.rows(); ++i) {
        for (Eigen::Index j = 0; j < m.cols(); ++j) {
            if (j) os << ',';
            os << fmt(m(i, j));
        }
        os << '\n';
    }
    write_file(path, os.str());
}

MatrixXd read_matrix_csv(const std::string& path) {
    std::istringstream in(read_file(path));
    std::vector<std::vector<double>> rows;
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        std::vector<double> row;
        std::istringstream ls(line);
        std::string cell;
        while (std::getline(ls, cell, ',')) row.push_back(std::stod(cell));
        if (!rows.empty() && row.size() != rows.front().size())
            throw std::runtime_error(path + ": ragged rows");
        rows.push_back(std::move(row));
    }
    if (rows.empty()) throw std::runtime_error(path + ": empty matrix");
    MatrixXd m(Eigen::Index(rows.size()), Eigen::Index(rows.front().size()));
    for (Eigen::Index i = 0; i < m.rows(); ++i)
        for (Eigen::Index j = 0; j < m.cols(); ++j) m(i, j) = rows[std::size_t(i)][std::size_t(j)];
    return m;
}

ReactionNetwork named_network(const std::string& name, double volume, int cyclic_d) {
    if (name == "toggle") return build_toggle_switch(volume);
    if (name == "mcad") return build_mcad(volume);
    if (name == "hsc") return build_hsc(volume);
    if (name == "cyclic") return build_cyclic_linear(cyclic_d, volume);
    return load_network_file(name);  // anything else is a network spec file
}

MatrixXd named_truth(const std::string& name) {
    if (name == "mcad") return mcad_rules().signed_adjacency();
    if (name == "hsc") return hsc_rules().signed_adjacency();
    if (name == "toggle") {
        MatrixXd t(2, 2);
        t << 1, -1, -1, 1;  // self-activation, cross-repression
        return t;
    }
    return read_matrix_csv(name);
}

NoiseModel noise_from_config(const json& cfg, const SnapshotDataset& ds) {
    const std::string kind = cfg.at("noise").get<std::string>();
    if (kind == "cle")
        return NoiseModel::cle(cfg.at("noise_m").get<double>(), cfg.at("noise_ell").get<double>(),
                               ds.volume, ds.space == SpaceTag::concentration);
    if (kind == "additive") return NoiseModel::additive(cfg.at("sigma").get<double>());
    if (kind == "sqrt-state") return NoiseModel::sqrt_state(cfg.at("sigma").get<double>());
    if (kind == "deterministic") return NoiseModel::deterministic();
    if (kind == "constant") {
        const double k2 = cfg.at("kappa").get<double>();
        return NoiseModel::constant_tensor(k2 * k2 * MatrixXd::Identity(ds.dim(), ds.dim()));
    }
    throw std::invalid_argument("unknown noise prior: " + kind);
}

ScoreFunction score_from_config(const json& cfg, const SnapshotDataset& ds,
                                const NoiseModel& noise) {
    const std::string path = cfg.at("score").get<std::string>();
    if (!path.empty()) {
        CheckpointMeta meta;
        Mlp net = load_checkpoint(path, &meta);
        if (meta.dataset_hash != ds.content_hash())
            throw std::runtime_error("score checkpoint was trained on a different dataset "
                                     "(content hash mismatch): " + path);
        return score_from_net(std::move(net));
    }
    if (noise.kind != NoiseModel::Kind::Deterministic)
        throw std::invalid_argument("--score is required unless --noise deterministic");
    // D = 0 never evaluates the score; this stub only satisfies the interface.
    ScoreFunction s;
    s.dim = ds.dim();
    s.eval = [](const MatrixXd&, double) -> MatrixXd {
        throw std::logic_error("score evaluated on a deterministic run");
    };
    s.vjp = [](const MatrixXd&, double, const MatrixXd&) -> MatrixXd {
        throw std::logic_error("score evaluated on a deterministic run");
    };
    return s;
}

ForceModel force_from_config(const json& cfg, int d, std::uint64_t root_seed) {
    const std::string kind = cfg.at("force_kind").get<std::string>();
    const double ell = cfg.at("ell").get<double>();
    if (kind == "linear") return ForceModel::linear(MatrixXd::Zero(d, d), ell);
    std::vector<int> dims;
    const auto hidden = cfg.at("hidden").get<std::vector<int>>();
    Rng rng(derive_seed(root_seed, "init"));
    if (kind == "neural") {
        dims.push_back(d);
        dims.insert(dims.end(), hidden.begin(), hidden.end());
        dims.push_back(d);
        return ForceModel::neural(Mlp(dims, rng), ell);
    }
    if (kind == "neural-time") {
        dims.push_back(d + 1);
        dims.insert(dims.end(), hidden.begin(), hidden.end());
        dims.push_back(d);
        return ForceModel::neural_time(Mlp(dims, rng), ell);
    }
    if (kind == "potential") {
        dims.push_back(d);
        dims.insert(dims.end(), hidden.begin(), hidden.end());
        dims.push_back(1);
        return ForceModel::potential(Mlp(dims, rng), ell);
    }
    throw std::invalid_argument("unknown force kind: " + kind);
}

ForceModel load_force_checked(const std::string& path, const SnapshotDataset& ds) {
    std::uint64_t hash = 0;
    ForceModel force = load_force(path, &hash);
    if (hash != ds.content_hash())
        throw std::runtime_error("force checkpoint was trained on a different dataset "
                                 "(content hash mismatch): " + path);
    return force;
}

int cmd_simulate(const json& cfg) {
    const std::string out = prepare_out(cfg);
    const double volume = cfg.at("volume").get<double>();
    ReactionNetwork net = named_network(cfg.at("network").get<std::string>(), volume,
                                        cfg.at("cyclic_d").get<int>());
    const int d = int(net.species.size());

    VectorXd x0;
    const auto x0_list = cfg.at("x0").get<std::vector<double>>();
    if (!x0_list.empty()) {
        if (int(x0_list.size()) != d)
            throw std::invalid_argument("--x0 needs one entry per species");
        x0 = Eigen::Map<const VectorXd>(x0_list.data(), d);
    } else if (cfg.at("network").get<std::string>() == "cyclic") {
        x0 = VectorXd::Constant(d, 20.0);  // the conserved chain must start occupied
    } else {
        x0 = VectorXd::Zero(d);
    }

    const std::string method = cfg.at("method").get<std::string>();
    SnapshotSimulator sim;
    if (method == "gillespie")
        sim = gillespie_snapshotter(net, x0);
    else if (method == "cle")
        sim = cle_snapshotter(net, x0, cfg.at("cle_dt").get<double>());
    else
        throw std::invalid_argument("unknown simulation method: " + method);

    SnapshotDataset ds = sample_snapshots(
        sim, cfg.at("n").get<int>(), cfg.at("intervals").get<int>(), cfg.at("dt").get<double>(),
        space_tag_from_string(cfg.at("space").get<std::string>()),
        derive_seed(cfg.at("seed").get<std::uint64_t>(), "dataset"));

    save_dataset(ds, out + "/dataset");
    write_manifest(out, "simulate", cfg);
    for (int k = 0; k < ds.snapshot_count(); ++k)
        std::cout << "snapshot " << k << " at t=" << ds.times[k] << ": "
                  << ds.snapshots[std::size_t(k)].rows() << " rows\n";
    return 0;
}

int cmd_train_score(const json& cfg) {
    const std::string out = prepare_out(cfg);
    SnapshotDataset ds = load_dataset(cfg.at("data").get<std::string>());
    const std::uint64_t seed = cfg.at("seed").get<std::uint64_t>();

    ScoreTrainConfig tc;
    tc.epochs = cfg.at("epochs").get<int>();
    tc.batch_size = cfg.at("batch").get<int>();
    tc.lr = cfg.at("lr").get<double>();
    tc.projections = cfg.at("projections").get<int>();
    tc.weight_mode = cfg.at("weight_mode").get<std::string>() == "fixed"
                         ? ScoreTrainConfig::WeightMode::fixed
                         : ScoreTrainConfig::WeightMode::variance_normalized;
    tc.validation_fraction = cfg.at("val_frac").get<double>();
    tc.hidden_override = cfg.at("hidden").get<std::vector<int>>();
    tc.seed = derive_seed(seed, "training");

    TrainedScore ts = train_score(ds, tc);

    CheckpointMeta meta;
    meta.kind = "score";
    meta.seed = seed;
    meta.dataset_hash = ds.content_hash();
    save_checkpoint(ts.net, meta, out + "/score.json");

    std::ostringstream log;
    log << "epoch,train_loss,val_loss\n";
    for (std::size_t e = 0; e < ts.log.train_loss.size(); ++e)
        log << e << ',' << fmt(ts.log.train_loss[e]) << ',' << fmt(ts.log.val_loss[e]) << '\n';
    write_file(out + "/train_log.csv", log.str());

    std::ostringstream lam;
    lam << "epoch,snapshot,lambda\n";
    for (std::size_t e = 0; e < ts.log.lambda_history.size(); ++e)
        for (Eigen::Index k = 0; k < ts.log.lambda_history[e].size(); ++k)
            lam << e << ',' << k << ',' << fmt(ts.log.lambda_history[e][k]) << '\n';
    write_file(out + "/lambda_history.csv", lam.str());

    write_manifest(out, "train-score", cfg);
    std::cout << "trained score over " << ts.log.train_loss.size()
              << " epochs; final train loss " << ts.log.train_loss.back() << "\n";
    return 0;
}

int cmd_validate_score(const json& cfg) {
    const std::string out = prepare_out(cfg);
    SnapshotDataset ds = load_dataset(cfg.at("data").get<std::string>());

    CheckpointMeta meta;
    Mlp net = load_checkpoint(cfg.at("checkpoint").get<std::string>(), &meta);
    if (meta.dataset_hash != ds.content_hash())
        throw std::runtime_error("score checkpoint was trained on a different dataset "
                                 "(content hash mismatch)");

    ScoreValidation sv =
        validate_score(net, ds, cfg.at("steps").get<int>(), cfg.at("eps").get<double>(),
                       derive_seed(cfg.at("seed").get<std::uint64_t>(), "validation"));

    std::ostringstream os;
    os << "time,ed_generated,ed_baseline\n";
    for (Eigen::Index k = 0; k < sv.times.size(); ++k)
        os << fmt(sv.times[k]) << ',' << fmt(sv.ed_generated[k]) << ','
           << fmt(sv.ed_baseline[k]) << '\n';
    write_file(out + "/validation.csv", os.str());

    json j;
    j["times"] = vec_json(sv.times);
    j["ed_generated"] = vec_json(sv.ed_generated);
    j["ed_baseline"] = vec_json(sv.ed_baseline);
    write_file(out + "/validation.json", j.dump(2) + "\n");
    write_manifest(out, "validate-score", cfg);

    const double worst = (sv.ed_generated.array() / sv.ed_baseline.array()).maxCoeff();
    std::cout << "worst generated/baseline energy-distance ratio: " << worst << "\n";
    const double max_ratio = cfg.at("max_ratio").get<double>();
    if (max_ratio > 0.0 && worst > max_ratio) {
        std::cerr << "error: validation ratio " << worst << " exceeds threshold " << max_ratio
                  << "\n";
        return 3;
    }
    return 0;
}

int cmd_infer(const json& cfg) {
    const std::string out = prepare_out(cfg);
    SnapshotDataset ds = load_dataset(cfg.at("data").get<std::string>());
    const std::uint64_t seed = cfg.at("seed").get<std::uint64_t>();

    InferenceProblem problem;
    problem.noise = noise_from_config(cfg, ds);
    problem.score = score_from_config(cfg, ds, problem.noise);
    problem.force = force_from_config(cfg, ds.dim(), seed);
    problem.data = ds;

    PFIConfig& pc = problem.config;
    pc.lambda = cfg.at("lambda").get<double>();
    pc.distance = cfg.at("distance").get<std::string>() == "sinkhorn" ? DistanceKind::Sinkhorn
                                                                      : DistanceKind::GaussianW2;
    pc.sinkhorn_eps = cfg.at("sinkhorn_eps").get<double>();
    pc.sinkhorn_unroll = cfg.at("sinkhorn_unroll").get<int>();
    pc.steps = cfg.at("steps").get<int>();
    pc.integrator =
        cfg.at("integrator").get<std::string>() == "euler" ? Integrator::Euler : Integrator::Rk4;
    pc.learning_rate = cfg.at("lr").get<double>();
    pc.max_steps = cfg.at("max_steps").get<int>();
    pc.stop_rel_change = cfg.at("stop_rel").get<double>();
    pc.stop_window = cfg.at("stop_window").get<int>();
    pc.reg_samples = cfg.at("reg_samples").get<int>();
    pc.batch_size = cfg.at("batch_size").get<int>();
    pc.seed = derive_seed(seed, "training");

    FitResult fit = train_force(problem);

    save_force(fit.force, out + "/force.json", seed, ds.content_hash());

    std::ostringstream hist;
    hist << "step,total\n";
    for (std::size_t s = 0; s < fit.report.history.size(); ++s)
        hist << s << ',' << fmt(fit.report.history[s]) << '\n';
    write_file(out + "/loss_history.csv", hist.str());

    json j;
    j["total"] = fit.report.last.total;
    j["distances"] = fit.report.last.distances;
    j["penalty"] = fit.report.last.penalty;
    j["diffusion_clamped"] = fit.report.last.diffusion_clamped;
    j["sinkhorn_nonconverged"] = fit.report.last.sinkhorn_nonconverged;
    j["covariance_floored"] = fit.report.last.covariance_floored;
    j["steps_taken"] = fit.report.steps_taken;
    j["stop_reason"] = fit.report.stop_reason;
    j["aborted"] = fit.report.aborted;
    write_file(out + "/loss.json", j.dump(2) + "\n");

    write_matrix_csv(out + "/jacobian.csv",
                     infer_jacobian(fit.force, ds.snapshots.front()));
    write_manifest(out, "infer", cfg);

    std::cout << "stopped after " << fit.report.steps_taken << " steps (" << fit.report.stop_reason
              << "), final loss " << fit.report.last.total << "\n";
    if (fit.report.aborted) {
        std::cerr << "error: optimization aborted (" << fit.report.stop_reason << ")\n";
        return 2;
    }
    const long max_clamped = cfg.at("max_clamped").get<long>();
    if (max_clamped >= 0 && fit.report.last.diffusion_clamped > max_clamped) {
        std::cerr << "error: " << fit.report.last.diffusion_clamped
                  << " clamped diffusion evaluations exceed threshold " << max_clamped << "\n";
        return 3;
    }
    return 0;
}

int cmd_analyze_ou(const json& cfg) {
    const std::string out = prepare_out(cfg);
    const std::uint64_t seed = cfg.at("seed").get<std::uint64_t>();
    const int d = cfg.at("dim").get<int>();
    const double omega_s = cfg.at("omega_s").get<double>();
    const double diffusion = cfg.at("diffusion").get<double>();
    const double horizon = cfg.at("horizon").get<double>();

    Rng init(derive_seed(seed, "init"));
    const MatrixXd skew = cfg.at("skew_scale").get<double>() * random_skew_matrix(d, init);
    const VectorXd m0 = cfg.at("m0_scale").get<double>() * init.normal_vector(d);
    double sigma0 = cfg.at("sigma0").get<double>();
    if (sigma0 <= 0.0) sigma0 = diffusion / std::abs(omega_s);  // stationary marginal

    const IsotropicOUSpec spec(omega_s, skew, diffusion, sigma0, m0, horizon,
                               cfg.at("snapshots").get<int>());
    const double lambda = cfg.at("lambda").get<double>();
    const double eps = cfg.at("eps").get<double>();
    const MatrixXd dhat_true = diffusion * MatrixXd::Identity(d, d);
    const MatrixXd omega_true = spec.omega();

    const auto n_grid = cfg.at("n_grid").get<std::vector<int>>();
    const auto dt_grid = cfg.at("dt_grid").get<std::vector<double>>();
    const int var_draws = cfg.at("var_draws").get<int>();

    Rng var_rng(derive_seed(seed, "variance"));
    TheoryReport rep = theory_report(
        spec, lambda, dhat_true, eps, n_grid.empty() ? 0 : n_grid.front(),
        dt_grid.empty() ? 0.0 : dt_grid.front(),
        (n_grid.empty() || dt_grid.empty()) ? 0 : var_draws, &var_rng);

    json j;
    j["dim"] = d;
    j["omega_s"] = omega_s;
    j["omega"] = mat_json(omega_true);
    j["m0"] = vec_json(m0);
    j["sigma0_sq"] = sigma0;
    j["diffusion"] = diffusion;
    j["horizon"] = horizon;
    j["snapshots"] = spec.snapshots;
    j["P"] = mat_json(rep.P);
    j["gamma"] = vec_json(rep.gamma);
    j["eigvecs"] = mat_json(rep.eigvecs);
    j["q"] = rep.q;
    j["r"] = rep.r;
    j["q_tilde"] = rep.q_tilde;
    j["lambda_tilde"] = rep.lambda_tilde;
    j["lambda_tilde_discrete"] = rep.lambda_tilde_discrete;
    j["Gamma_plus"] = rep.Gamma_plus;
    j["Gamma_minus"] = rep.Gamma_minus;
    j["omega_hat"] = mat_json(rep.omega_hat);
    j["bias"] = rep.bias;
    j["variance"] = rep.variance;
    write_file(out + "/theory.json", j.dump(2) + "\n");

    // Bias against the regularization strength, in natural lambda*T units.
    {
        const double lo = std::log10(cfg.at("lambda_lo").get<double>());
        const double hi = std::log10(cfg.at("lambda_hi").get<double>());
        const int pts = cfg.at("lambda_points").get<int>();
        std::ostringstream os;
        os << "lambda_tilde,lambda,bias,kernel_dim,unique\n";
        if (cfg.at("lambda_zero").get<bool>()) {
            ZeroRegFamily fam = no_regularization_family(spec, dhat_true, eps);
            os << "0,0," << fmt((fam.particular - omega_true).norm()) << ','
               << fam.kernel_basis.size() << ',' << (fam.unique ? 1 : 0) << '\n';
        }
        for (int i = 0; i < pts; ++i) {
            const double lt = std::pow(10.0, lo + (hi - lo) * i / (pts - 1));
            const double lam = lt / horizon;
            const MatrixXd omega_hat = analytic_minimizer(spec, lam, dhat_true, eps);
            os << fmt(lt) << ',' << fmt(lam) << ',' << fmt((omega_hat - omega_true).norm())
               << ",0,1\n";
        }
        write_file(out + "/bias_vs_lambda.csv", os.str());
    }

    // Bias against the assumed diffusion; the grid is centered on the truth.
    {
        const int pts = cfg.at("dhat_points").get<int>();
        const double span = std::log(cfg.at("dhat_span").get<double>());
        std::vector<double> bias(std::size_t(pts), 0.0);
        std::vector<double> dhat(std::size_t(pts), 0.0);
        for (int i = 0; i < pts; ++i) {
            dhat[std::size_t(i)] =
                diffusion * std::exp(-span + 2.0 * span * i / (pts - 1));
            const MatrixXd omega_hat = analytic_minimizer(
                spec, lambda, dhat[std::size_t(i)] * MatrixXd::Identity(d, d), eps);
            bias[std::size_t(i)] = (omega_hat - omega_true).norm();
        }
        const std::size_t argmin =
            std::size_t(std::min_element(bias.begin(), bias.end()) - bias.begin());
        std::ostringstream os;
        os << "dhat,bias,is_argmin\n";
        for (std::size_t i = 0; i < bias.size(); ++i)
            os << fmt(dhat[i]) << ',' << fmt(bias[i]) << ',' << (i == argmin ? 1 : 0) << '\n';
        write_file(out + "/bias_vs_dhat.csv", os.str());
    }

    // Finite-sample variance over the (n, dt) grid.
    {
        std::ostringstream os;
        os << "n,dt,variance\n";
        for (int n : n_grid)
            for (double dtv : dt_grid)
                os << n << ',' << fmt(dtv) << ','
                   << fmt(variance_estimate(spec, lambda, n, dtv, var_draws, var_rng, eps))
                   << '\n';
        write_file(out + "/variance.csv", os.str());
    }

    write_manifest(out, "analyze-ou", cfg);
    std::cout << "theory report written; bias at lambda=" << lambda << ": " << rep.bias << "\n";
    return 0;
}

int cmd_evaluate(const json& cfg) {
    const std::string out = prepare_out(cfg);
    SnapshotDataset ds = load_dataset(cfg.at("data").get<std::string>());
    ForceModel force = load_force_checked(cfg.at("force").get<std::string>(), ds);
    NoiseModel noise = noise_from_config(cfg, ds);

    const MatrixXd jac = infer_jacobian(force, ds.snapshots.front());
    write_matrix_csv(out + "/jacobian.csv", jac);

    const std::string truth_name = cfg.at("truth").get<std::string>();
    if (!truth_name.empty()) {
        PrCurve pr = grn_pr_auc(jac, named_truth(truth_name));
        write_file(out + "/pr.json", json_report(pr) + "\n");
        write_file(out + "/pr.csv", tidy_csv(pr));
        std::cout << "edge-recovery AUC " << pr.auc << " (baseline " << pr.prevalence << ")\n";
    }

    // Fixed points from a deterministic subsample of the initial snapshot.
    {
        const MatrixXd& first = ds.snapshots.front();
        const int want = std::min<int>(cfg.at("fp_samples").get<int>(), int(first.rows()));
        MatrixXd sub(want, first.cols());
        for (int i = 0; i < want; ++i)
            sub.row(i) = first.row(Eigen::Index(i) * first.rows() / want);
        FixedPointReport fp = find_fixed_points(force, sub, cfg.at("fp_dt").get<double>(),
                                                cfg.at("fp_tmax").get<double>());
        write_file(out + "/fixed_points.json", json_report(fp) + "\n");
        write_file(out + "/fixed_points.csv", tidy_csv(fp));
        std::cout << fp.points.size() << " fixed points (" << fp.non_convergent
                  << " non-convergent trajectories)\n";
    }

    // Flow-dependent reports need a score unless the run is deterministic.
    const bool have_flow = !cfg.at("score").get<std::string>().empty() ||
                           noise.kind == NoiseModel::Kind::Deterministic;
    if (have_flow) {
        ScoreFunction score = score_from_config(cfg, ds, noise);
        const int steps = cfg.at("steps").get<int>();

        std::ostringstream os;
        os << "snapshot,time,energy_distance\n";
        for (int k = 1; k < ds.snapshot_count(); ++k) {
            const MatrixXd pushed =
                push_samples(force, noise, score, ds.snapshots[std::size_t(k - 1)],
                             ds.times[k - 1], ds.times[k], steps);
            os << k << ',' << fmt(ds.times[k]) << ','
               << fmt(energy_distance(pushed, ds.snapshots[std::size_t(k)])) << '\n';
        }
        write_file(out + "/ed.csv", os.str());

        const std::string ref_path = cfg.at("reference_force").get<std::string>();
        if (!ref_path.empty()) {
            ForceModel ref = load_force_checked(ref_path, ds);
            CosineReport all;
            std::ostringstream cs;
            cs << "snapshot,time,mean_cosine,excluded\n";
            for (int k = 0; k < ds.snapshot_count(); ++k) {
                CosineReport one = flowline_cosine(
                    pf_flow(force, noise, score, ds.times[k]),
                    pf_flow(ref, noise, score, ds.times[k]), {ds.snapshots[std::size_t(k)]});
                all.mean_cosine.push_back(one.mean_cosine[0]);
                all.excluded.push_back(one.excluded[0]);
                cs << k << ',' << fmt(ds.times[k]) << ',' << fmt(one.mean_cosine[0]) << ','
                   << one.excluded[0] << '\n';
            }
            write_file(out + "/cosine.json", json_report(all) + "\n");
            write_file(out + "/cosine.csv", cs.str());
        }
    } else {
        std::cout << "no score checkpoint: skipping pushforward and flowline reports\n";
    }

    write_manifest(out, "evaluate", cfg);
    return 0;
}

int cmd_perturb(const json& cfg) {
    const std::string out = prepare_out(cfg);
    SnapshotDataset ds = load_dataset(cfg.at("data").get<std::string>());
    ForceModel force = load_force_checked(cfg.at("force").get<std::string>(), ds);
    NoiseModel noise = noise_from_config(cfg, ds);
    const std::uint64_t seed = cfg.at("seed").get<std::uint64_t>();

    const MatrixXd profiles = type_profiles_from_snapshot(
        ds.snapshots.back(), cfg.at("k_profiles").get<int>(), derive_seed(seed, "profiles"));
    write_matrix_csv(out + "/profiles.csv", profiles);

    double timescale = cfg.at("timescale").get<double>();
    if (timescale <= 0.0) {
        if (force.degradation <= 0.0)
            throw std::invalid_argument(
                "--timescale is required when the force has no degradation rate");
        timescale = 1.0 / force.degradation;
    }

    KnockdownConfig kc;
    kc.gene = cfg.at("gene").get<int>();
    kc.c_step = cfg.at("c_step").get<double>();
    kc.c_max = cfg.at("c_max").get<double>();
    kc.lo = cfg.at("lo").get<double>();
    kc.hi = cfg.at("hi").get<double>();
    kc.replicates = cfg.at("replicates").get<int>();
    kc.dt = cfg.at("dt").get<double>();
    kc.horizon_factor = cfg.at("horizon_factor").get<double>();
    kc.cosine_threshold = cfg.at("threshold").get<double>();
    kc.seed = derive_seed(seed, "perturbation");

    PerturbationOutcome po =
        knockdown_experiment(force, noise, ds.snapshots.front(), profiles, timescale, kc);
    write_file(out + "/perturb.json", json_report(po) + "\n");
    write_file(out + "/perturb.csv", tidy_csv(po));
    write_manifest(out, "perturb", cfg);

    std::cout << "knockdown gene " << kc.gene << ": type probabilities";
    for (Eigen::Index t = 0; t < po.probability.size(); ++t) std::cout << ' ' << po.probability[t];
    std::cout << (po.stationary ? " (stationary)" : " (NOT stationary)") << "\n";
    return 0;
}

int dispatch(const std::string& command, const json& cfg) {
    if (command == "simulate") return cmd_simulate(cfg);
    if (command == "train-score") return cmd_train_score(cfg);
    if (command == "validate-score") return cmd_validate_score(cfg);
    if (command == "infer") return cmd_infer(cfg);
    if (command == "analyze-ou") return cmd_analyze_ou(cfg);
    if (command == "evaluate") return cmd_evaluate(cfg);
    if (command == "perturb") return cmd_perturb(cfg);
    throw std::invalid_argument("unknown command in manifest: " + command);
}

}  // namespace

std::uint64_t derive_seed(std::uint64_t base, const std::string& name, std::uint64_t index) {
    std::uint64_t s = base;
    s = mix64(s ^ hash_string(name));
    s = mix64(s ^ index);
    return s;
}

void save_force(const ForceModel& force, const std::string& path, std::uint64_t seed,
                std::uint64_t dataset_hash) {
    json j;
    j["seed"] = seed;
    j["dataset_hash"] = dataset_hash;
    j["degradation"] = force.degradation;
    switch (force.kind) {
        case ForceKind::Linear:
            j["kind"] = "linear";
            j["omega"] = mat_json(force.omega);
            break;
        case ForceKind::Neural:
        case ForceKind::NeuralTimeDependent:
        case ForceKind::PotentialGradient: {
            j["kind"] = force.kind == ForceKind::Neural
                            ? "neural"
                            : (force.kind == ForceKind::NeuralTimeDependent ? "neural-time"
                                                                            : "potential");
            j["dims"] = force.net.dims();
            const VectorXd p = force.net.flatten();
            j["params"] = std::vector<double>(p.data(), p.data() + p.size());
            break;
        }
    }
    write_file(path, j.dump(2) + "\n");
}

ForceModel load_force(const std::string& path, std::uint64_t* dataset_hash, std::uint64_t* seed) {
    const json j = json::parse(read_file(path));
    if (dataset_hash) *dataset_hash = j.at("dataset_hash").get<std::uint64_t>();
    if (seed) *seed = j.at("seed").get<std::uint64_t>();
    const double ell = j.at("degradation").get<double>();
    const std::string kind = j.at("kind").get<std::string>();
    if (kind == "linear") {
        const auto rows = j.at("omega").get<std::vector<std::vector<double>>>();
        MatrixXd omega(Eigen::Index(rows.size()), Eigen::Index(rows.size()));
        for (Eigen::Index i = 0; i < omega.rows(); ++i)
            for (Eigen::Index k = 0; k < omega.cols(); ++k)
                omega(i, k) = rows[std::size_t(i)][std::size_t(k)];
        return ForceModel::linear(omega, ell);
    }
    Rng rng(0);
    Mlp net(j.at("dims").get<std::vector<int>>(), rng);
    const auto params = j.at("params").get<std::vector<double>>();
    net.unflatten(Eigen::Map<const VectorXd>(params.data(), Eigen::Index(params.size())));
    if (kind == "neural") return ForceModel::neural(std::move(net), ell);
    if (kind == "neural-time") return ForceModel::neural_time(std::move(net), ell);
    if (kind == "potential") return ForceModel::potential(std::move(net), ell);
    throw std::runtime_error(path + ": unknown force kind " + kind);
}

int run_cli(const std::vector<std::string>& args) {
    CLI::App app{"probability-flow force inference pipeline"};
    app.require_subcommand(1);

    json cfg;
    std::string pending;

    // simulate
    {
        auto* c = app.add_subcommand("simulate", "sample cross-sectional snapshots of a network");
        auto network = std::make_shared<std::string>("toggle");
        auto volume = std::make_shared<double>(1.0);
        auto n = std::make_shared<int>(1000);
        auto intervals = std::make_shared<int>(3);
        auto dt = std::make_shared<double>(0.5);
        auto method = std::make_shared<std::string>("gillespie");
        auto cle_dt = std::make_shared<double>(0.01);
        auto space = std::make_shared<std::string>("counts");
        auto x0 = std::make_shared<std::vector<double>>();
        auto cyclic_d = std::make_shared<int>(30);
        auto seed = std::make_shared<std::uint64_t>(0);
        auto out_dir = std::make_shared<std::string>("runs/simulate");
        c->add_option("--network", *network, "toggle|mcad|hsc|cyclic or a network JSON file");
        c->add_option("--V,--volume", *volume, "system volume");
        c->add_option("--n", *n, "samples per snapshot");
        c->add_option("--K", *intervals, "snapshot intervals (K+1 snapshots incl. t=0)");
        c->add_option("--dt", *dt, "snapshot spacing");
        c->add_option("--method", *method, "gillespie|cle");
        c->add_option("--cle-dt", *cle_dt, "CLE integration substep");
        c->add_option("--space", *space, "counts|concentration");
        c->add_option("--x0", *x0, "initial counts (default zeros; cyclic: 20 per species)")
            ->delimiter(',');
        c->add_option("--cyclic-d", *cyclic_d, "cyclic chain length");
        c->add_option("--seed", *seed, "manifest seed");
        c->add_option("--out", *out_dir, "output directory");
        c->callback([=, &cfg, &pending]() {
            cfg = {{"network", *network}, {"volume", *volume},   {"n", *n},
                   {"intervals", *intervals}, {"dt", *dt},       {"method", *method},
                   {"cle_dt", *cle_dt},   {"space", *space},     {"x0", *x0},
                   {"cyclic_d", *cyclic_d}, {"seed", *seed},     {"out", *out_dir}};
            pending = "simulate";
        });
    }

    // train-score
    {
        auto* c = app.add_subcommand("train-score", "fit the time-dependent score net");
        auto data = std::make_shared<std::string>();
        auto epochs = std::make_shared<int>(200);
        auto batch = std::make_shared<int>(128);
        auto lr = std::make_shared<double>(1e-3);
        auto projections = std::make_shared<int>(1);
        auto weight_mode = std::make_shared<std::string>("variance");
        auto val_frac = std::make_shared<double>(0.1);
        auto hidden = std::make_shared<std::vector<int>>();
        auto seed = std::make_shared<std::uint64_t>(0);
        auto out_dir = std::make_shared<std::string>("runs/score");
        c->add_option("--data", *data, "dataset path stem")->required();
        c->add_option("--epochs", *epochs);
        c->add_option("--batch", *batch);
        c->add_option("--lr", *lr);
        c->add_option("--projections", *projections, "slicing directions per sample");
        c->add_option("--weight-mode", *weight_mode, "fixed|variance");
        c->add_option("--val-frac", *val_frac);
        c->add_option("--hidden", *hidden, "hidden sizes (default: benchmark table)")
            ->delimiter(',');
        c->add_option("--seed", *seed, "manifest seed");
        c->add_option("--out", *out_dir, "output directory");
        c->callback([=, &cfg, &pending]() {
            cfg = {{"data", *data},     {"epochs", *epochs},   {"batch", *batch},
                   {"lr", *lr},         {"projections", *projections},
                   {"weight_mode", *weight_mode}, {"val_frac", *val_frac},
                   {"hidden", *hidden}, {"seed", *seed},       {"out", *out_dir}};
            pending = "train-score";
        });
    }

    // validate-score
    {
        auto* c = app.add_subcommand("validate-score", "Langevin resampling check per snapshot");
        auto data = std::make_shared<std::string>();
        auto checkpoint = std::make_shared<std::string>();
        auto steps = std::make_shared<int>(200);
        auto eps = std::make_shared<double>(1e-3);
        auto max_ratio = std::make_shared<double>(-1.0);
        auto seed = std::make_shared<std::uint64_t>(0);
        auto out_dir = std::make_shared<std::string>("runs/validate");
        c->add_option("--data", *data)->required();
        c->add_option("--checkpoint", *checkpoint, "score checkpoint")->required();
        c->add_option("--steps", *steps, "Langevin steps");
        c->add_option("--eps", *eps, "Langevin step size");
        c->add_option("--max-ratio", *max_ratio,
                      "fail when generated/baseline exceeds this (<=0: report only)");
        c->add_option("--seed", *seed);
        c->add_option("--out", *out_dir);
        c->callback([=, &cfg, &pending]() {
            cfg = {{"data", *data}, {"checkpoint", *checkpoint}, {"steps", *steps},
                   {"eps", *eps},   {"max_ratio", *max_ratio},   {"seed", *seed},
                   {"out", *out_dir}};
            pending = "validate-score";
        });
    }

    // infer
    {
        auto* c = app.add_subcommand("infer", "fit the force field to snapshots");
        auto data = std::make_shared<std::string>();
        auto score = std::make_shared<std::string>();
        auto force_kind = std::make_shared<std::string>("linear");
        auto hidden = std::make_shared<std::vector<int>>(std::vector<int>{64, 64});
        auto ell = std::make_shared<double>(0.0);
        auto noise = std::make_shared<std::string>("deterministic");
        auto sigma = std::make_shared<double>(0.1);
        auto noise_m = std::make_shared<double>(1.0);
        auto noise_ell = std::make_shared<double>(-1.0);
        auto kappa = std::make_shared<double>(0.1);
        auto distance = std::make_shared<std::string>("gaussian");
        auto sinkhorn_eps = std::make_shared<double>(0.1);
        auto sinkhorn_unroll = std::make_shared<int>(0);
        auto steps = std::make_shared<int>(1);
        auto integrator = std::make_shared<std::string>("rk4");
        auto lambda = std::make_shared<double>(0.0);
        auto lr = std::make_shared<double>(1e-3);
        auto max_steps = std::make_shared<int>(5000);
        auto stop_rel = std::make_shared<double>(1e-6);
        auto stop_window = std::make_shared<int>(50);
        auto reg_samples = std::make_shared<int>(256);
        auto batch_size = std::make_shared<int>(0);
        auto max_clamped = std::make_shared<long>(-1);
        auto seed = std::make_shared<std::uint64_t>(0);
        auto out_dir = std::make_shared<std::string>("runs/infer");
        c->add_option("--data", *data)->required();
        c->add_option("--score", *score, "score checkpoint (optional for deterministic noise)");
        c->add_option("--force-kind", *force_kind, "linear|neural|neural-time|potential");
        c->add_option("--hidden", *hidden, "force net hidden sizes")->delimiter(',');
        c->add_option("--ell", *ell, "degradation rate carried by the force");
        c->add_option("--noise", *noise, "cle|additive|sqrt-state|deterministic|constant");
        c->add_option("--sigma", *sigma, "additive/sqrt-state noise scale");
        c->add_option("--m", *noise_m, "CLE production scale");
        c->add_option("--noise-ell", *noise_ell, "CLE degradation (default: --ell)");
        c->add_option("--kappa", *kappa, "constant-tensor scale (D = kappa^2 I)");
        c->add_option("--distance", *distance, "gaussian|sinkhorn");
        c->add_option("--sinkhorn-eps", *sinkhorn_eps);
        c->add_option("--sinkhorn-unroll", *sinkhorn_unroll);
        c->add_option("--steps", *steps, "integrator substeps per interval");
        c->add_option("--integrator", *integrator, "rk4|euler");
        c->add_option("--lambda", *lambda, "Jacobian penalty weight");
        c->add_option("--lr", *lr);
        c->add_option("--max-steps", *max_steps);
        c->add_option("--stop-rel", *stop_rel);
        c->add_option("--stop-window", *stop_window);
        c->add_option("--reg-samples", *reg_samples);
        c->add_option("--batch-size", *batch_size, "cloud subsample per step (0: full)");
        c->add_option("--max-clamped", *max_clamped,
                      "fail when clamped diffusion count exceeds this (<0: report only)");
        c->add_option("--seed", *seed);
        c->add_option("--out", *out_dir);
        c->callback([=, &cfg, &pending]() {
            cfg = {{"data", *data},       {"score", *score},
                   {"force_kind", *force_kind}, {"hidden", *hidden},
                   {"ell", *ell},         {"noise", *noise},
                   {"sigma", *sigma},     {"noise_m", *noise_m},
                   {"noise_ell", *noise_ell < 0 ? *ell : *noise_ell},
                   {"kappa", *kappa},     {"distance", *distance},
                   {"sinkhorn_eps", *sinkhorn_eps}, {"sinkhorn_unroll", *sinkhorn_unroll},
                   {"steps", *steps},     {"integrator", *integrator},
                   {"lambda", *lambda},   {"lr", *lr},
                   {"max_steps", *max_steps}, {"stop_rel", *stop_rel},
                   {"stop_window", *stop_window}, {"reg_samples", *reg_samples},
                   {"batch_size", *batch_size}, {"max_clamped", *max_clamped},
                   {"seed", *seed},       {"out", *out_dir}};
            pending = "infer";
        });
    }

    // analyze-ou
    {
        auto* c = app.add_subcommand("analyze-ou", "closed-form bias/variance sweep tables");
        auto dim = std::make_shared<int>(10);
        auto omega_s = std::make_shared<double>(-1.0);
        auto skew_scale = std::make_shared<double>(1.0);
        auto diffusion = std::make_shared<double>(1.0);
        auto sigma0 = std::make_shared<double>(-1.0);
        auto m0_scale = std::make_shared<double>(1.0);
        auto horizon = std::make_shared<double>(1.0);
        auto snapshots = std::make_shared<int>(10);
        auto lambda = std::make_shared<double>(0.1);
        auto eps = std::make_shared<double>(0.0);
        auto lambda_lo = std::make_shared<double>(1e-3);
        auto lambda_hi = std::make_shared<double>(1e2);
        auto lambda_points = std::make_shared<int>(40);
        auto lambda_zero = std::make_shared<bool>(true);
        auto dhat_points = std::make_shared<int>(21);
        auto dhat_span = std::make_shared<double>(4.0);
        auto n_grid = std::make_shared<std::vector<int>>(std::vector<int>{250, 500, 1000, 2000});
        auto dt_grid = std::make_shared<std::vector<double>>(std::vector<double>{0.1});
        auto var_draws = std::make_shared<int>(100);
        auto seed = std::make_shared<std::uint64_t>(0);
        auto out_dir = std::make_shared<std::string>("runs/analyze");
        c->add_option("--d,--dim", *dim);
        c->add_option("--omega-s", *omega_s, "symmetric rate (must be negative)");
        c->add_option("--skew-scale", *skew_scale, "scale of the random skew part");
        c->add_option("--D,--diffusion", *diffusion, "true diffusion");
        c->add_option("--sigma0", *sigma0, "initial variance (<=0: stationary D/|omega_s|)");
        c->add_option("--m0-scale", *m0_scale, "scale of the random initial mean");
        c->add_option("--T,--horizon", *horizon);
        c->add_option("--snapshots", *snapshots);
        c->add_option("--lambda", *lambda, "regularization for the point report");
        c->add_option("--eps", *eps, "entropic smoothing");
        c->add_option("--lambda-lo", *lambda_lo);
        c->add_option("--lambda-hi", *lambda_hi);
        c->add_option("--lambda-points", *lambda_points);
        c->add_flag("--lambda-zero,!--no-lambda-zero", *lambda_zero,
                    "include the unregularized row with its kernel dimension");
        c->add_option("--dhat-points", *dhat_points);
        c->add_option("--dhat-span", *dhat_span, "grid covers D/span .. D*span");
        c->add_option("--n-grid", *n_grid)->delimiter(',');
        c->add_option("--dt-grid", *dt_grid)->delimiter(',');
        c->add_option("--var-draws", *var_draws);
        c->add_option("--seed", *seed);
        c->add_option("--out", *out_dir);
        c->callback([=, &cfg, &pending]() {
            cfg = {{"dim", *dim},         {"omega_s", *omega_s},
                   {"skew_scale", *skew_scale}, {"diffusion", *diffusion},
                   {"sigma0", *sigma0},   {"m0_scale", *m0_scale},
                   {"horizon", *horizon}, {"snapshots", *snapshots},
                   {"lambda", *lambda},   {"eps", *eps},
                   {"lambda_lo", *lambda_lo}, {"lambda_hi", *lambda_hi},
                   {"lambda_points", *lambda_points}, {"lambda_zero", *lambda_zero},
                   {"dhat_points", *dhat_points}, {"dhat_span", *dhat_span},
                   {"n_grid", *n_grid},   {"dt_grid", *dt_grid},
                   {"var_draws", *var_draws}, {"seed", *seed},
                   {"out", *out_dir}};
            pending = "analyze-ou";
        });
    }

    // evaluate
    {
        auto* c = app.add_subcommand("evaluate", "edge recovery, fixed points, fit distances");
        auto data = std::make_shared<std::string>();
        auto force = std::make_shared<std::string>();
        auto score = std::make_shared<std::string>();
        auto reference_force = std::make_shared<std::string>();
        auto truth = std::make_shared<std::string>();
        auto noise = std::make_shared<std::string>("deterministic");
        auto sigma = std::make_shared<double>(0.1);
        auto noise_m = std::make_shared<double>(1.0);
        auto noise_ell = std::make_shared<double>(0.0);
        auto kappa = std::make_shared<double>(0.1);
        auto steps = std::make_shared<int>(1);
        auto fp_samples = std::make_shared<int>(64);
        auto fp_dt = std::make_shared<double>(0.01);
        auto fp_tmax = std::make_shared<double>(200.0);
        auto seed = std::make_shared<std::uint64_t>(0);
        auto out_dir = std::make_shared<std::string>("runs/evaluate");
        c->add_option("--data", *data)->required();
        c->add_option("--force", *force, "force checkpoint")->required();
        c->add_option("--score", *score, "score checkpoint for flow reports");
        c->add_option("--reference-force", *reference_force,
                      "second checkpoint for flowline cosines");
        c->add_option("--truth", *truth, "toggle|mcad|hsc or adjacency CSV");
        c->add_option("--noise", *noise, "cle|additive|sqrt-state|deterministic|constant");
        c->add_option("--sigma", *sigma);
        c->add_option("--m", *noise_m);
        c->add_option("--noise-ell", *noise_ell);
        c->add_option("--kappa", *kappa);
        c->add_option("--steps", *steps, "pushforward substeps per interval");
        c->add_option("--fp-samples", *fp_samples);
        c->add_option("--fp-dt", *fp_dt);
        c->add_option("--fp-tmax", *fp_tmax);
        c->add_option("--seed", *seed);
        c->add_option("--out", *out_dir);
        c->callback([=, &cfg, &pending]() {
            cfg = {{"data", *data},   {"force", *force},
                   {"score", *score}, {"reference_force", *reference_force},
                   {"truth", *truth}, {"noise", *noise},
                   {"sigma", *sigma}, {"noise_m", *noise_m},
                   {"noise_ell", *noise_ell}, {"kappa", *kappa},
                   {"steps", *steps}, {"fp_samples", *fp_samples},
                   {"fp_dt", *fp_dt}, {"fp_tmax", *fp_tmax},
                   {"seed", *seed},   {"out", *out_dir}};
            pending = "evaluate";
        });
    }

    // perturb
    {
        auto* c = app.add_subcommand("perturb", "in-silico knockdown to steady state");
        auto data = std::make_shared<std::string>();
        auto force = std::make_shared<std::string>();
        auto noise = std::make_shared<std::string>("deterministic");
        auto sigma = std::make_shared<double>(0.1);
        auto noise_m = std::make_shared<double>(1.0);
        auto noise_ell = std::make_shared<double>(0.0);
        auto kappa = std::make_shared<double>(0.1);
        auto gene = std::make_shared<int>(-1);
        auto k_profiles = std::make_shared<int>(4);
        auto replicates = std::make_shared<int>(64);
        auto dt = std::make_shared<double>(1e-3);
        auto horizon_factor = std::make_shared<double>(10.0);
        auto threshold = std::make_shared<double>(0.95);
        auto lo = std::make_shared<double>(0.25);
        auto hi = std::make_shared<double>(0.5);
        auto c_step = std::make_shared<double>(0.1);
        auto c_max = std::make_shared<double>(0.9);
        auto timescale = std::make_shared<double>(-1.0);
        auto seed = std::make_shared<std::uint64_t>(0);
        auto out_dir = std::make_shared<std::string>("runs/perturb");
        c->add_option("--data", *data)->required();
        c->add_option("--force", *force)->required();
        c->add_option("--noise", *noise);
        c->add_option("--sigma", *sigma);
        c->add_option("--m", *noise_m);
        c->add_option("--noise-ell", *noise_ell);
        c->add_option("--kappa", *kappa);
        c->add_option("--gene", *gene, "knocked-down coordinate (-1: none)");
        c->add_option("--k-profiles", *k_profiles, "cell types from the final snapshot");
        c->add_option("--replicates", *replicates);
        c->add_option("--dt", *dt);
        c->add_option("--horizon-factor", *horizon_factor);
        c->add_option("--threshold", *threshold, "cosine assignment threshold");
        c->add_option("--lo", *lo, "random-component lower bound");
        c->add_option("--hi", *hi, "random-component upper bound");
        c->add_option("--c-step", *c_step);
        c->add_option("--c-max", *c_max);
        c->add_option("--timescale", *timescale, "slowest timescale (<=0: 1/degradation)");
        c->add_option("--seed", *seed);
        c->add_option("--out", *out_dir);
        c->callback([=, &cfg, &pending]() {
            cfg = {{"data", *data},     {"force", *force},
                   {"noise", *noise},   {"sigma", *sigma},
                   {"noise_m", *noise_m}, {"noise_ell", *noise_ell},
                   {"kappa", *kappa},   {"gene", *gene},
                   {"k_profiles", *k_profiles}, {"replicates", *replicates},
                   {"dt", *dt},         {"horizon_factor", *horizon_factor},
                   {"threshold", *threshold}, {"lo", *lo},
                   {"hi", *hi},         {"c_step", *c_step},
                   {"c_max", *c_max},   {"timescale", *timescale},
                   {"seed", *seed},     {"out", *out_dir}};
            pending = "perturb";
        });
    }

    // rerun
    {
        auto* c = app.add_subcommand("rerun", "replay a manifest verbatim");
        auto manifest = std::make_shared<std::string>();
        auto out_override = std::make_shared<std::string>();
        c->add_option("--manifest", *manifest, "manifest.json from a previous run")->required();
        c->add_option("--out", *out_override, "redirect outputs (default: manifest's out)");
        c->callback([=, &cfg, &pending]() {
            const json m = json::parse(read_file(*manifest));
            cfg = m.at("config");
            if (!out_override->empty()) cfg["out"] = *out_override;
            pending = m.at("command").get<std::string>();
        });
    }

    try {
        std::vector<std::string> reversed(args.rbegin(), args.rend());
        app.parse(reversed);
    } catch (const CLI::ParseError& e) {
        return app.exit(e);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }

    try {
        return dispatch(pending, cfg);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
}

}  // namespace pfi
