#include "pfi/net.hpp"

#include <cmath>
#include <fstream>
#include <stdexcept>

#include <json.hpp>

namespace pfi {

namespace {

// ELU with alpha = 1: C1 everywhere, second derivative vanishes for z > 0.
inline Eigen::ArrayXXd elu(const Eigen::ArrayXXd& z) {
    return (z > 0.0).select(z, z.exp() - 1.0);
}
inline Eigen::ArrayXXd elu_d1(const Eigen::ArrayXXd& z) {
    return (z > 0.0).select(Eigen::ArrayXXd::Ones(z.rows(), z.cols()), z.exp());
}
inline Eigen::ArrayXXd elu_d2(const Eigen::ArrayXXd& z) {
    return (z > 0.0).select(Eigen::ArrayXXd::Zero(z.rows(), z.cols()), z.exp());
}

}  // namespace

void MlpGrads::set_zero() {
    for (auto& m : w) m.setZero();
    for (auto& v : b) v.setZero();
}

Mlp::Mlp(std::vector<int> dims, Rng& rng) : dims_(std::move(dims)) {
    if (dims_.size() < 2) throw std::invalid_argument("Mlp: need at least input and output dims");
    for (int d : dims_)
        if (d < 1) throw std::invalid_argument("Mlp: layer dims must be positive");
    for (std::size_t l = 0; l + 1 < dims_.size(); ++l) {
        const int fan_in = dims_[l], fan_out = dims_[l + 1];
        const double scale = 1.0 / std::sqrt(double(fan_in));
        Eigen::MatrixXd w(fan_out, fan_in);
        for (int j = 0; j < fan_in; ++j)
            for (int i = 0; i < fan_out; ++i) w(i, j) = rng.uniform(-scale, scale);
        w_.push_back(std::move(w));
        b_.push_back(Eigen::VectorXd::Zero(fan_out));
    }
}

int Mlp::parameter_count() const {
    int n = 0;
    for (std::size_t l = 0; l < w_.size(); ++l) n += int(w_[l].size() + b_[l].size());
    return n;
}

Eigen::MatrixXd Mlp::forward(const Eigen::MatrixXd& x) const {
    Workspace ws;
    return forward(x, ws);
}

Eigen::MatrixXd Mlp::forward(const Eigen::MatrixXd& x, Workspace& ws) const {
    if (x.rows() != input_dim()) throw std::invalid_argument("Mlp::forward: input dim mismatch");
    const int L = layer_count();
    ws.a.assign(std::size_t(L) + 1, {});
    ws.z.assign(std::size_t(L), {});
    ws.a[0] = x;
    for (int l = 0; l < L; ++l) {
        ws.z[l] = (w_[l] * ws.a[l]).colwise() + b_[l];
        ws.a[l + 1] = l + 1 < L ? elu(ws.z[l].array()).matrix() : ws.z[l];
    }
    return ws.a[L];
}

Eigen::MatrixXd Mlp::backward(const Workspace& ws, const Eigen::MatrixXd& ybar,
                              MlpGrads* grads) const {
    const int L = layer_count();
    if (ybar.rows() != output_dim() || ybar.cols() != ws.a[0].cols())
        throw std::invalid_argument("Mlp::backward: adjoint shape mismatch");
    Eigen::MatrixXd zbar = ybar;
    for (int l = L - 1; l >= 0; --l) {
        if (grads) {
            grads->w[l].noalias() += zbar * ws.a[l].transpose();
            grads->b[l] += zbar.rowwise().sum();
        }
        Eigen::MatrixXd abar = w_[l].transpose() * zbar;
        if (l == 0) return abar;
        zbar = (elu_d1(ws.z[l - 1].array()) * abar.array()).matrix();
    }
    return {};  // unreachable
}

Eigen::MatrixXd Mlp::jvp(const Workspace& ws, const Eigen::MatrixXd& v, Tangent& tan) const {
    const int L = layer_count();
    if (v.rows() != input_dim() || v.cols() != ws.a[0].cols())
        throw std::invalid_argument("Mlp::jvp: tangent shape mismatch");
    tan.ta.assign(std::size_t(L) + 1, {});
    tan.tz.assign(std::size_t(L), {});
    tan.ta[0] = v;
    for (int l = 0; l < L; ++l) {
        tan.tz[l] = w_[l] * tan.ta[l];
        tan.ta[l + 1] =
            l + 1 < L ? (elu_d1(ws.z[l].array()) * tan.tz[l].array()).matrix() : tan.tz[l];
    }
    return tan.ta[L];
}

Eigen::MatrixXd Mlp::backward_dual(const Workspace& ws, const Tangent& tan,
                                   const Eigen::MatrixXd& ybar, const Eigen::MatrixXd& ubar,
                                   MlpGrads* grads, Eigen::MatrixXd* vbar) const {
    const int L = layer_count();
    Eigen::MatrixXd zbar = ybar;
    Eigen::MatrixXd tzbar = ubar;
    for (int l = L - 1; l >= 0; --l) {
        if (grads) {
            grads->w[l].noalias() += zbar * ws.a[l].transpose();
            grads->w[l].noalias() += tzbar * tan.ta[l].transpose();
            grads->b[l] += zbar.rowwise().sum();
        }
        Eigen::MatrixXd abar = w_[l].transpose() * zbar;
        Eigen::MatrixXd tabar = w_[l].transpose() * tzbar;
        if (l == 0) {
            if (vbar) *vbar = tabar;
            return abar;
        }
        auto d1 = elu_d1(ws.z[l - 1].array());
        auto d2 = elu_d2(ws.z[l - 1].array());
        zbar = (d1 * abar.array() + d2 * tan.tz[l - 1].array() * tabar.array()).matrix();
        tzbar = (d1 * tabar.array()).matrix();
    }
    return {};  // unreachable
}

Eigen::MatrixXd Mlp::input_jacobian(const Eigen::VectorXd& x) const {
    Workspace ws;
    forward(x, ws);
    Eigen::MatrixXd jac(output_dim(), input_dim());
    Eigen::MatrixXd ybar = Eigen::MatrixXd::Zero(output_dim(), 1);
    for (int i = 0; i < output_dim(); ++i) {
        ybar(i, 0) = 1.0;
        jac.row(i) = backward(ws, ybar).transpose();
        ybar(i, 0) = 0.0;
    }
    return jac;
}

MlpGrads Mlp::zero_grads() const {
    MlpGrads g;
    for (std::size_t l = 0; l < w_.size(); ++l) {
        g.w.push_back(Eigen::MatrixXd::Zero(w_[l].rows(), w_[l].cols()));
        g.b.push_back(Eigen::VectorXd::Zero(b_[l].size()));
    }
    return g;
}

Eigen::VectorXd Mlp::flatten() const {
    Eigen::VectorXd out(parameter_count());
    int at = 0;
    for (std::size_t l = 0; l < w_.size(); ++l) {
        out.segment(at, w_[l].size()) = Eigen::Map<const Eigen::VectorXd>(w_[l].data(),
                                                                          w_[l].size());
        at += int(w_[l].size());
        out.segment(at, b_[l].size()) = b_[l];
        at += int(b_[l].size());
    }
    return out;
}

Eigen::VectorXd Mlp::flatten(const MlpGrads& grads) const {
    Eigen::VectorXd out(parameter_count());
    int at = 0;
    for (std::size_t l = 0; l < grads.w.size(); ++l) {
        out.segment(at, grads.w[l].size()) =
            Eigen::Map<const Eigen::VectorXd>(grads.w[l].data(), grads.w[l].size());
        at += int(grads.w[l].size());
        out.segment(at, grads.b[l].size()) = grads.b[l];
        at += int(grads.b[l].size());
    }
    return out;
}

void Mlp::unflatten(const Eigen::VectorXd& params) {
    if (params.size() != parameter_count())
        throw std::invalid_argument("Mlp::unflatten: parameter count mismatch");
    int at = 0;
    for (std::size_t l = 0; l < w_.size(); ++l) {
        w_[l] = Eigen::Map<const Eigen::MatrixXd>(params.data() + at, w_[l].rows(),
                                                  w_[l].cols());
        at += int(w_[l].size());
        b_[l] = params.segment(at, b_[l].size());
        at += int(b_[l].size());
    }
}

void Adam::step(Eigen::VectorXd& params, const Eigen::VectorXd& grad) {
    if (m.size() == 0) {
        m = Eigen::VectorXd::Zero(params.size());
        v = Eigen::VectorXd::Zero(params.size());
    }
    if (grad.size() != params.size()) throw std::invalid_argument("Adam: gradient size mismatch");
    ++t;
    m = beta1 * m + (1.0 - beta1) * grad;
    v = beta2 * v + (1.0 - beta2) * grad.cwiseAbs2();
    const double c1 = 1.0 - std::pow(beta1, double(t));
    const double c2 = 1.0 - std::pow(beta2, double(t));
    params -= lr * (m / c1).cwiseQuotient(((v / c2).cwiseSqrt().array() + eps).matrix());
}

void save_checkpoint(const Mlp& net, const CheckpointMeta& meta, const std::string& path) {
    nlohmann::json doc;
    doc["kind"] = meta.kind;
    doc["seed"] = meta.seed;
    doc["dataset_hash"] = meta.dataset_hash;
    doc["activation"] = "elu";
    doc["dims"] = net.dims();
    nlohmann::json layers = nlohmann::json::array();
    for (int l = 0; l < net.layer_count(); ++l) {
        nlohmann::json layer;
        std::vector<std::vector<double>> w(net.weight(l).rows());
        for (int i = 0; i < net.weight(l).rows(); ++i) {
            w[i].resize(net.weight(l).cols());
            for (int j = 0; j < net.weight(l).cols(); ++j) w[i][j] = net.weight(l)(i, j);
        }
        layer["w"] = w;
        layer["b"] = std::vector<double>(net.bias(l).data(),
                                         net.bias(l).data() + net.bias(l).size());
        layers.push_back(layer);
    }
    doc["layers"] = layers;
    std::ofstream out(path);
    if (!out) throw std::runtime_error("save_checkpoint: cannot write " + path);
    out << doc.dump(2) << '\n';
    if (!out.flush()) throw std::runtime_error("save_checkpoint: write failed for " + path);
}

Mlp load_checkpoint(const std::string& path, CheckpointMeta* meta) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("load_checkpoint: cannot open " + path);
    nlohmann::json doc = nlohmann::json::parse(in);
    if (doc.at("activation").get<std::string>() != "elu")
        throw std::runtime_error("load_checkpoint: unsupported activation");
    if (meta) {
        meta->kind = doc.at("kind").get<std::string>();
        meta->seed = doc.at("seed").get<std::uint64_t>();
        meta->dataset_hash = doc.at("dataset_hash").get<std::uint64_t>();
    }
    std::vector<int> dims = doc.at("dims").get<std::vector<int>>();
    Rng throwaway(0);
    Mlp net(dims, throwaway);
    const auto& layers = doc.at("layers");
    if (int(layers.size()) != net.layer_count())
        throw std::runtime_error("load_checkpoint: layer count mismatch");
    for (int l = 0; l < net.layer_count(); ++l) {
        auto w = layers.at(l).at("w").get<std::vector<std::vector<double>>>();
        auto b = layers.at(l).at("b").get<std::vector<double>>();
        if (int(w.size()) != net.weight(l).rows() || int(b.size()) != net.bias(l).size())
            throw std::runtime_error("load_checkpoint: layer shape mismatch");
        for (int i = 0; i < net.weight(l).rows(); ++i) {
            if (int(w[i].size()) != net.weight(l).cols())
                throw std::runtime_error("load_checkpoint: layer shape mismatch");
            for (int j = 0; j < net.weight(l).cols(); ++j) net.weight(l)(i, j) = w[i][j];
        }
        net.bias(l) = Eigen::Map<const Eigen::VectorXd>(b.data(), int(b.size()));
    }
    return net;
}

}  // namespace pfi
