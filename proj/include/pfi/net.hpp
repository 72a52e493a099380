#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "pfi/rng.hpp"

namespace pfi {

/// Gradient accumulator shaped like an Mlp's parameters.
struct MlpGrads {
    std::vector<Eigen::MatrixXd> w;
    std::vector<Eigen::VectorXd> b;
    void set_zero();
};

/// Fully connected network with ELU hidden units and a linear output layer.
/// All passes are batched: columns are samples. Besides plain reverse mode,
/// the class exposes a forward tangent strand (jvp) and a joint reverse pass
/// through primal and tangent (backward_dual); the latter provides the exact
/// parameter and input gradients of any scalar built from (y, Jv), which
/// covers sliced score matching, Hessian-vector products of scalar nets, and
/// Jacobian-diagonal terms.
class Mlp {
public:
    Mlp() = default;
    /// dims = {input, hidden..., output}; weights U(-1,1)/sqrt(fan_in), zero biases.
    Mlp(std::vector<int> dims, Rng& rng);

    int input_dim() const { return dims_.front(); }
    int output_dim() const { return dims_.back(); }
    int layer_count() const { return int(w_.size()); }
    const std::vector<int>& dims() const { return dims_; }
    int parameter_count() const;

    const Eigen::MatrixXd& weight(int layer) const { return w_[layer]; }
    const Eigen::VectorXd& bias(int layer) const { return b_[layer]; }
    Eigen::MatrixXd& weight(int layer) { return w_[layer]; }
    Eigen::VectorXd& bias(int layer) { return b_[layer]; }

    /// Primal state of one forward evaluation (kept for the reverse passes).
    struct Workspace {
        std::vector<Eigen::MatrixXd> a;  // a[0] = input, a[l+1] = activation of layer l
        std::vector<Eigen::MatrixXd> z;  // pre-activations
    };
    /// Tangent strand of one jvp evaluation.
    struct Tangent {
        std::vector<Eigen::MatrixXd> ta;  // ta[0] = input tangent
        std::vector<Eigen::MatrixXd> tz;
    };

    Eigen::MatrixXd forward(const Eigen::MatrixXd& x) const;
    Eigen::MatrixXd forward(const Eigen::MatrixXd& x, Workspace& ws) const;

    /// Reverse pass: returns the input adjoint; accumulates into grads when
    /// given. ybar has one column per sample.
    Eigen::MatrixXd backward(const Workspace& ws, const Eigen::MatrixXd& ybar,
                             MlpGrads* grads = nullptr) const;

    /// Forward tangent: returns u = J(x) v column-wise.
    Eigen::MatrixXd jvp(const Workspace& ws, const Eigen::MatrixXd& v, Tangent& tan) const;

    /// Reverse through (y, u) jointly: returns the input adjoint and, when
    /// requested, the tangent-input adjoint vbar = J^T ubar.
    Eigen::MatrixXd backward_dual(const Workspace& ws, const Tangent& tan,
                                  const Eigen::MatrixXd& ybar, const Eigen::MatrixXd& ubar,
                                  MlpGrads* grads = nullptr,
                                  Eigen::MatrixXd* vbar = nullptr) const;

    /// out x in Jacobian at a single point.
    Eigen::MatrixXd input_jacobian(const Eigen::VectorXd& x) const;

    MlpGrads zero_grads() const;
    Eigen::VectorXd flatten() const;
    Eigen::VectorXd flatten(const MlpGrads& grads) const;
    void unflatten(const Eigen::VectorXd& params);

private:
    std::vector<int> dims_;
    std::vector<Eigen::MatrixXd> w_;
    std::vector<Eigen::VectorXd> b_;
};

/// Adam with bias correction; state sized on first step.
struct Adam {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;

    void step(Eigen::VectorXd& params, const Eigen::VectorXd& grad);

    Eigen::VectorXd m, v;
    long t = 0;
};

struct CheckpointMeta {
    std::string kind;  // "score", "force", "potential"
    std::uint64_t seed = 0;
    std::uint64_t dataset_hash = 0;
};

/// JSON checkpoint: metadata plus nested weight arrays; loading reproduces
/// outputs bit-identically.
void save_checkpoint(const Mlp& net, const CheckpointMeta& meta, const std::string& path);
Mlp load_checkpoint(const std::string& path, CheckpointMeta* meta = nullptr);

}  // namespace pfi
