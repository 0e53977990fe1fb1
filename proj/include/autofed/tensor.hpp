#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "autofed/errors.hpp"

namespace autofed {

// Dense row-major 64-bit tensor participating in a reverse-mode tape.
// Ops record parent handles and a backward closure; backward(loss) replays
// them in reverse topological order. Graphs are per-call-site values with no
// global registry, so independent training jobs never share a tape.

struct TensorNode;
using TensorNodePtr = std::shared_ptr<TensorNode>;

struct TensorNode {
    std::vector<int> shape;
    std::vector<double> data;
    std::vector<double> grad;  // lazily allocated, same length as data
    bool requires_grad = false;
    std::vector<TensorNodePtr> parents;
    std::function<void(TensorNode&)> backward_fn;

    std::int64_t size() const;
    void ensure_grad();
};

class Tensor {
public:
    Tensor() = default;
    explicit Tensor(TensorNodePtr node) : node_(std::move(node)) {}

    static Tensor zeros(std::vector<int> shape);
    static Tensor full(std::vector<int> shape, double value);
    static Tensor from(std::vector<int> shape, std::vector<double> data);
    static Tensor scalar(double value);

    bool defined() const { return node_ != nullptr; }
    const std::vector<int>& shape() const { return node_->shape; }
    std::int64_t size() const { return node_->size(); }
    int dim(int i) const { return node_->shape[static_cast<std::size_t>(i)]; }

    const std::vector<double>& data() const { return node_->data; }
    // Direct mutation is for initialization and optimizer updates only; it
    // must not touch tensors that already sit inside a live graph.
    std::vector<double>& raw() { return node_->data; }

    bool requires_grad() const { return node_->requires_grad; }
    Tensor& set_requires_grad(bool v) {
        node_->requires_grad = v;
        return *this;
    }

    bool has_grad() const { return !node_->grad.empty(); }
    const std::vector<double>& grad() const { return node_->grad; }
    std::vector<double>& grad_mut() {
        node_->ensure_grad();
        return node_->grad;
    }
    void zero_grad() {
        node_->ensure_grad();
        std::fill(node_->grad.begin(), node_->grad.end(), 0.0);
    }

    double item() const;

    double at(std::initializer_list<int> idx) const;

    TensorNode* node() const { return node_.get(); }
    const TensorNodePtr& ptr() const { return node_; }

private:
    TensorNodePtr node_;
};

// While a guard is alive on this thread, ops do not record the tape.
class NoGradGuard {
public:
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool prev_;
};

bool grad_enabled();

// ---- elementwise and linear algebra ----
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double c);
Tensor matmul(const Tensor& a, const Tensor& b);   // [m,k] x [k,n]
Tensor transpose2d(const Tensor& a);               // [m,n] -> [n,m]
Tensor reshape(const Tensor& a, std::vector<int> shape);
Tensor concat_channels(const Tensor& a, const Tensor& b);  // [Ca,H,W]+[Cb,H,W]
Tensor gather(const Tensor& a, std::vector<std::int64_t> indices);  // flat-index pick
Tensor linear(const Tensor& input, const Tensor& weight, const Tensor& bias);

// ---- nonlinearities ----
Tensor leaky_relu(const Tensor& a, double slope = 0.1);
Tensor sigmoid(const Tensor& a);
Tensor softmax(const Tensor& a, int axis);

// ---- convolution ----
Tensor conv2d(const Tensor& input, const Tensor& kernel, int stride, int padding);
Tensor conv_transpose2d(const Tensor& input, const Tensor& kernel, int stride, int padding);
Tensor add_channel_bias(const Tensor& input, const Tensor& bias);  // [C,H,W] + [C]

// Max-pool a rectangular window of a [C,H,W] map into [C,g,g] bins.
// Degenerate (empty) windows yield zeros and set *degenerate when provided.
Tensor roi_max_pool(const Tensor& input, double x0, double y0, double x1, double y1, int bins,
                    bool* degenerate = nullptr);

// ---- reductions and losses ----
Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);
Tensor bce_loss(const Tensor& p, const Tensor& target);
Tensor l1_loss(const Tensor& pred, const Tensor& target);
// Cross entropy that drops background terms once the classifier is confident:
// zero when p > p_th and target == 0, plain CE otherwise. Mean over elements;
// the mask is decided in the forward pass and carries no gradient.
Tensor mce_loss(const Tensor& p, const Tensor& target, double p_th);

void backward(const Tensor& loss);

// ---- parameters and optimizer ----
class ParamStore {
public:
    Tensor add_param(const std::string& name, Tensor t);
    const Tensor& param(const std::string& name) const;
    bool has(const std::string& name) const;

    std::size_t count() const { return params_.size(); }
    const std::string& name(std::size_t i) const { return names_[i]; }
    Tensor& at(std::size_t i) { return params_[i]; }
    const Tensor& at(std::size_t i) const { return params_[i]; }

    std::int64_t total_size() const;
    void zero_grads();

    // Deterministic registration-order views; round-trips are bitwise exact.
    std::vector<double> flatten() const;
    void load_flat(const std::vector<double>& flat);
    std::vector<double> flatten_grads(double scale = 1.0) const;

private:
    std::vector<std::string> names_;
    std::vector<Tensor> params_;
};

struct SgdConfig {
    double learning_rate = 0.01;
    double decay_factor = 0.01;  // inverse-time decay per communication round
};

// lr_t = lr / (1 + decay * round); p <- p - lr_t * grad * grad_scale.
void sgd_step(ParamStore& params, const SgdConfig& config, int round, double grad_scale = 1.0);
double sgd_learning_rate(const SgdConfig& config, int round);

}  // namespace autofed
