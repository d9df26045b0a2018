#pragma once

#include <functional>
#include <memory>
#include <unordered_map>
#include <utility>
#include <vector>

#include "fae/tensor.hpp"

namespace fae {

struct ParamTensor;

namespace ad {

struct Node {
    Tensor val;
    Tensor grad;
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(Node&)> back;
    bool needs_grad = false;

    void ensure_grad() {
        if (grad.numel() != val.numel()) grad = Tensor(val.shape);
    }
};

using NodePtr = std::shared_ptr<Node>;

// Value-semantic handle into the dynamic graph. Nodes hold their values by
// copy; graphs are built per record and freed after backward.
class Var {
public:
    Var() = default;
    explicit Var(NodePtr n) : n_(std::move(n)) {}

    const Tensor& val() const { return n_->val; }
    const Tensor& grad() const { return n_->grad; }
    bool needs_grad() const { return n_ && n_->needs_grad; }
    bool valid() const { return static_cast<bool>(n_); }
    NodePtr node() const { return n_; }

    const Shape& shape() const { return n_->val.shape; }
    int rows() const { return n_->val.rows(); }
    int cols() const { return n_->val.cols(); }
    real scalar() const { return n_->val.v.at(0); }

private:
    NodePtr n_;
};

Var constant(Tensor t);
// Differentiable leaf (grad-check inputs, sampler states, ...).
Var input(Tensor t);

// Reverse sweep from a scalar root. Seeds the root gradient with `seed`
// (losses averaged over a batch pass 1/batch here).
void backward(const Var& root, real seed = 1.0);

// Tracks which graph leaves are bound to persistent parameters so their
// gradients can be pulled out after backward. Binding the same parameter
// twice returns the same node, so shared weights accumulate correctly.
class Autograd {
public:
    Var param(ParamTensor& p);
    Var constant(Tensor t) { return ad::constant(std::move(t)); }
    Var input(Tensor t) { return ad::input(std::move(t)); }

    // Adds scale * d(param) into `grads` (keyed by parameter name).
    void collect(std::unordered_map<std::string, Tensor>& grads, real scale = 1.0) const;

private:
    std::unordered_map<const ParamTensor*, NodePtr> bindings_;
    std::vector<const ParamTensor*> order_;
};

// ---- elementwise and reduction ops ----
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var scale(const Var& a, real s);
Var add_scalar(const Var& a, real s);
Var silu(const Var& a);
Var gelu(const Var& a);
Var leaky_relu(const Var& a, real slope);
Var abs_val(const Var& a);
Var exp_val(const Var& a);
// Hard clamp; gradient passes through strictly inside the bounds.
Var clamp(const Var& a, real lo, real hi);
Var sum_all(const Var& a);   // -> scalar
Var mean_all(const Var& a);  // -> scalar

// ---- linear algebra ----
Var matmul(const Var& a, const Var& b);                       // [M,K]x[K,N]
Var add_rowvec(const Var& x, const Var& b);                   // bias [D] broadcast over rows
Var linear(const Var& x, const Var& w);                       // x[N,Din] * w[Din,Dout]
Var linear(const Var& x, const Var& w, const Var& b);

// ---- shape ops ----
Var reshape(const Var& a, Shape s);
Var slice_cols(const Var& a, int c0, int c1);
Var concat_rows(const Var& a, const Var& b);

// ---- normalization / modulation ----
Var rmsnorm(const Var& x, const Var& gamma, real eps);
Var layernorm_noaffine(const Var& x, real eps);
// y = x * (1 + scale) + shift, broadcast per row (adaptive-norm modulation).
Var row_affine(const Var& x, const Var& scl, const Var& shift);
Var row_gate(const Var& x, const Var& gate);

// ---- lookup ----
Var embed_row(const Var& table, int row);

} // namespace ad
} // namespace fae
