#pragma once

#include <array>
#include <functional>
#include <string>
#include <vector>

#include "resq/tensor.hpp"

namespace resq {

// Forward kernels, shared between the tape ops and the tape-free inference
// path so that both compute bit-identical values.
namespace kernels {
Tensor matmul(const Tensor& a, const Tensor& b);
std::array<std::size_t, 2> conv2d_output_hw(std::size_t h, std::size_t w, std::size_t kh,
                                            std::size_t kw, int stride);
Tensor conv2d(const Tensor& input, const Tensor& kernels, int stride);
Tensor relu(const Tensor& x);
Tensor add(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double k);
Tensor add_bias(const Tensor& x, const Tensor& bias);
Tensor flatten(const Tensor& x);
// 2x2 average pool, stride 2, ceil mode: edge windows average over the
// cells actually present, so odd extents survive (H -> ceil(H/2)).
Tensor avg_pool2(const Tensor& x);
Tensor softmax(const Tensor& x);
double cross_entropy(const Tensor& logits, const Tensor& targets, Tensor* softmax_out);
}  // namespace kernels

// Handle to a node on a Tape.
struct Var {
    int id = -1;
};

// Reverse-mode tape. Records primitive operations during the forward pass
// and replays adjoints in exact reverse order. backward() consumes the
// tape: a second call is a contract error.
class Tape {
public:
    // Tracked leaf bound to an external tensor; after backward() the
    // adjoint is accumulated into `external.grad()`.
    Var leaf(Tensor& external);
    // Untracked leaf; no adjoint is propagated into or through it alone.
    Var constant(Tensor value);

    const Tensor& value(Var v) const;

    Var matmul(Var a, Var b);
    Var conv2d(Var input, Var kernels, int stride = 1);
    Var relu(Var x);
    Var add(Var a, Var b);
    Var scale(Var a, double k);
    Var add_bias(Var x, Var bias);
    Var flatten(Var x);
    Var avg_pool2(Var x);
    Var softmax(Var x);
    // targets rows must be convex weights (soft labels); mean over rows
    Var cross_entropy(Var logits, const Tensor& targets);
    Var sum(Var x);
    Var l2_norm_sq(Var x);

    void backward(Var loss);
    bool consumed() const { return consumed_; }
    std::size_t size() const { return nodes_.size(); }

private:
    struct Node {
        Tensor value;
        std::vector<double> adjoint;
        bool needs_grad = false;
        std::array<int, 2> in = {-1, -1};
        std::function<void(Tape&, int)> pull;
        Tensor* bind = nullptr;
    };

    int push(Node n);
    Node& node(int id) { return nodes_[static_cast<std::size_t>(id)]; }
    const Node& node(int id) const { return nodes_[static_cast<std::size_t>(id)]; }
    void accum(int id, const std::vector<double>& g);
    bool tracks(int id) const { return id >= 0 && nodes_[static_cast<std::size_t>(id)].needs_grad; }

    std::vector<Node> nodes_;
    bool consumed_ = false;
};

// Named trainable tensor. The gradient channel of `value` receives the
// adjoint during backward; `trainable == false` excludes the parameter
// from sgd_step updates but not from forward computation.
struct Parameter {
    std::string name;
    Tensor value;
    bool trainable = true;
};

// Vanilla SGD: decrement each trainable parameter by lr * grad, then clear
// all grads (frozen parameters' discarded adjoints included).
void sgd_step(const std::vector<Parameter*>& params, double lr);

}  // namespace resq
