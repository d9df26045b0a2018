#include "fae/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <unordered_set>

#include "fae/params.hpp"

namespace fae::ad {

Var constant(Tensor t) {
    auto n = std::make_shared<Node>();
    n->val = std::move(t);
    n->needs_grad = false;
    return Var(n);
}

Var input(Tensor t) {
    auto n = std::make_shared<Node>();
    n->val = std::move(t);
    n->needs_grad = true;
    return Var(n);
}

Var Autograd::param(ParamTensor& p) {
    auto it = bindings_.find(&p);
    if (it != bindings_.end()) return Var(it->second);
    auto n = std::make_shared<Node>();
    n->val = p.value;
    n->needs_grad = p.requires_grad;
    bindings_.emplace(&p, n);
    order_.push_back(&p);
    return Var(n);
}

void Autograd::collect(std::unordered_map<std::string, Tensor>& grads, real scl) const {
    for (const ParamTensor* p : order_) {
        if (!p->requires_grad) continue;
        const NodePtr& n = bindings_.at(p);
        if (n->grad.numel() == 0) continue;
        auto it = grads.find(p->name);
        if (it == grads.end()) {
            Tensor g(n->grad.shape);
            for (std::size_t i = 0; i < g.numel(); ++i) g.v[i] = scl * n->grad.v[i];
            grads.emplace(p->name, std::move(g));
        } else {
            Tensor& g = it->second;
            for (std::size_t i = 0; i < g.numel(); ++i) g.v[i] += scl * n->grad.v[i];
        }
    }
}

void backward(const Var& root, real seed) {
    if (root.val().numel() != 1)
        throw shape_error("backward: root must be scalar, got " + shape_str(root.shape()));

    // Iterative postorder topological sort.
    std::vector<Node*> order;
    std::unordered_set<Node*> seen;
    std::vector<std::pair<Node*, std::size_t>> stack;
    stack.emplace_back(root.node().get(), 0);
    seen.insert(root.node().get());
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->parents.size()) {
            Node* p = node->parents[next++].get();
            if (p->needs_grad && seen.insert(p).second) stack.emplace_back(p, 0);
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }

    root.node()->ensure_grad();
    root.node()->grad.v[0] += seed;

    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node* n = *it;
        if (n->back && n->grad.numel() != 0) n->back(*n);
    }
}

namespace {

// Builds a result node; attaches the backward closure only when some parent
// participates in differentiation.
Var make_node(Tensor val, std::vector<NodePtr> parents, std::function<void(Node&)> back) {
    auto n = std::make_shared<Node>();
    n->val = std::move(val);
    bool any = false;
    for (const auto& p : parents)
        if (p->needs_grad) any = true;
    n->needs_grad = any;
    if (any) {
        n->parents = std::move(parents);
        n->back = std::move(back);
    }
    return Var(n);
}

void acc(NodePtr& p, const Tensor& g) {
    if (!p->needs_grad) return;
    p->ensure_grad();
    for (std::size_t i = 0; i < g.numel(); ++i) p->grad.v[i] += g.v[i];
}

} // namespace

Var add(const Var& a, const Var& b) {
    require_same_shape(a.val(), b.val(), "add");
    Tensor out = a.val();
    for (std::size_t i = 0; i < out.numel(); ++i) out.v[i] += b.val().v[i];
    return make_node(std::move(out), {a.node(), b.node()}, [](Node& n) {
        acc(n.parents[0], n.grad);
        acc(n.parents[1], n.grad);
    });
}

Var sub(const Var& a, const Var& b) {
    require_same_shape(a.val(), b.val(), "sub");
    Tensor out = a.val();
    for (std::size_t i = 0; i < out.numel(); ++i) out.v[i] -= b.val().v[i];
    return make_node(std::move(out), {a.node(), b.node()}, [](Node& n) {
        acc(n.parents[0], n.grad);
        NodePtr& p = n.parents[1];
        if (!p->needs_grad) return;
        p->ensure_grad();
        for (std::size_t i = 0; i < n.grad.numel(); ++i) p->grad.v[i] -= n.grad.v[i];
    });
}

Var mul(const Var& a, const Var& b) {
    require_same_shape(a.val(), b.val(), "mul");
    Tensor out = a.val();
    for (std::size_t i = 0; i < out.numel(); ++i) out.v[i] *= b.val().v[i];
    Tensor av = a.val(), bv = b.val();
    return make_node(std::move(out), {a.node(), b.node()},
                     [av = std::move(av), bv = std::move(bv)](Node& n) {
        if (n.parents[0]->needs_grad) {
            NodePtr& p = n.parents[0];
            p->ensure_grad();
            for (std::size_t i = 0; i < n.grad.numel(); ++i) p->grad.v[i] += n.grad.v[i] * bv.v[i];
        }
        if (n.parents[1]->needs_grad) {
            NodePtr& p = n.parents[1];
            p->ensure_grad();
            for (std::size_t i = 0; i < n.grad.numel(); ++i) p->grad.v[i] += n.grad.v[i] * av.v[i];
        }
    });
}

Var scale(const Var& a, real s) {
    Tensor out = a.val();
    for (real& x : out.v) x *= s;
    return make_node(std::move(out), {a.node()}, [s](Node& n) {
        NodePtr& p = n.parents[0];
        if (!p->needs_grad) return;
        p->ensure_grad();
        for (std::size_t i = 0; i < n.grad.numel(); ++i) p->grad.v[i] += s * n.grad.v[i];
    });
}

Var add_scalar(const Var& a, real s) {
    Tensor out = a.val();
    for (real& x : out.v) x += s;
    return make_node(std::move(out), {a.node()}, [](Node& n) { acc(n.parents[0], n.grad); });
}

Var silu(const Var& a) {
    Tensor out = a.val();
    for (real& x : out.v) x = x / (1.0 + std::exp(-x));
    Tensor av = a.val();
    return make_node(std::move(out), {a.node()}, [av = std::move(av)](Node& n) {
        NodePtr& p = n.parents[0];
        if (!p->needs_grad) return;
        p->ensure_grad();
        for (std::size_t i = 0; i < n.grad.numel(); ++i) {
            const real x = av.v[i];
            const real s = 1.0 / (1.0 + std::exp(-x));
            p->grad.v[i] += n.grad.v[i] * s * (1.0 + x * (1.0 - s));
        }
    });
}

Var gelu(const Var& a) {
    // Exact form: x * Phi(x).
    Tensor out = a.val();
    for (real& x : out.v) x = 0.5 * x * (1.0 + std::erf(x * M_SQRT1_2));
    Tensor av = a.val();
    return make_node(std::move(out), {a.node()}, [av = std::move(av)](Node& n) {
        NodePtr& p = n.parents[0];
        if (!p->needs_grad) return;
        p->ensure_grad();
        for (std::size_t i = 0; i < n.grad.numel(); ++i) {
            const real x = av.v[i];
            const real phi = 0.5 * (1.0 + std::erf(x * M_SQRT1_2));
            const real dens = std::exp(-0.5 * x * x) / std::sqrt(2.0 * M_PI);
            p->grad.v[i] += n.grad.v[i] * (phi + x * dens);
        }
    });
}

Var leaky_relu(const Var& a, real slope) {
    Tensor out = a.val();
    for (real& x : out.v) x = x >= 0.0 ? x : slope * x;
    Tensor av = a.val();
    return make_node(std::move(out), {a.node()}, [av = std::move(av), slope](Node& n) {
        NodePtr& p = n.parents[0];
        if (!p->needs_grad) return;
        p->ensure_grad();
        for (std::size_t i = 0; i < n.grad.numel(); ++i)
            p->grad.v[i] += n.grad.v[i] * (av.v[i] >= 0.0 ? 1.0 : slope);
    });
}

Var abs_val(const Var& a) {
    Tensor out = a.val();
    for (real& x : out.v) x = std::abs(x);
    Tensor av = a.val();
    return make_node(std::move(out), {a.node()}, [av = std::move(av)](Node& n) {
        NodePtr& p = n.parents[0];
        if (!p->needs_grad) return;
        p->ensure_grad();
        for (std::size_t i = 0; i < n.grad.numel(); ++i) {
            const real s = av.v[i] > 0.0 ? 1.0 : (av.v[i] < 0.0 ? -1.0 : 0.0);
            p->grad.v[i] += n.grad.v[i] * s;
        }
    });
}

Var exp_val(const Var& a) {
    Tensor out = a.val();
    for (real& x : out.v) x = std::exp(x);
    Tensor ov = out;
    return make_node(std::move(out), {a.node()}, [ov = std::move(ov)](Node& n) {
        NodePtr& p = n.parents[0];
        if (!p->needs_grad) return;
        p->ensure_grad();
        for (std::size_t i = 0; i < n.grad.numel(); ++i) p->grad.v[i] += n.grad.v[i] * ov.v[i];
    });
}

Var clamp(const Var& a, real lo, real hi) {
    Tensor out = a.val();
    for (real& x : out.v) x = std::min(hi, std::max(lo, x));
    Tensor av = a.val();
    return make_node(std::move(out), {a.node()}, [av = std::move(av), lo, hi](Node& n) {
        NodePtr& p = n.parents[0];
        if (!p->needs_grad) return;
        p->ensure_grad();
        for (std::size_t i = 0; i < n.grad.numel(); ++i)
            if (av.v[i] > lo && av.v[i] < hi) p->grad.v[i] += n.grad.v[i];
    });
}

Var sum_all(const Var& a) {
    real s = 0.0;
    for (real x : a.val().v) s += x;
    return make_node(Tensor::scalar(s), {a.node()}, [](Node& n) {
        NodePtr& p = n.parents[0];
        if (!p->needs_grad) return;
        p->ensure_grad();
        const real g = n.grad.v[0];
        for (real& x : p->grad.v) x += g;
    });
}

Var mean_all(const Var& a) {
    const real inv = 1.0 / static_cast<real>(a.val().numel());
    real s = 0.0;
    for (real x : a.val().v) s += x;
    return make_node(Tensor::scalar(s * inv), {a.node()}, [inv](Node& n) {
        NodePtr& p = n.parents[0];
        if (!p->needs_grad) return;
        p->ensure_grad();
        const real g = n.grad.v[0] * inv;
        for (real& x : p->grad.v) x += g;
    });
}

Var matmul(const Var& a, const Var& b) {
    Tensor out({a.val().rows(), b.val().cols()});
    matmul_acc(a.val(), b.val(), out);
    Tensor av = a.val(), bv = b.val();
    return make_node(std::move(out), {a.node(), b.node()},
                     [av = std::move(av), bv = std::move(bv)](Node& n) {
        if (n.parents[0]->needs_grad) {
            n.parents[0]->ensure_grad();
            matmul_bt_acc(n.grad, bv, n.parents[0]->grad);  // dA = dC * B^T
        }
        if (n.parents[1]->needs_grad) {
            n.parents[1]->ensure_grad();
            matmul_at_acc(av, n.grad, n.parents[1]->grad);  // dB = A^T * dC
        }
    });
}

Var add_rowvec(const Var& x, const Var& b) {
    const int nrows = x.val().rows(), ncols = x.val().cols();
    if (static_cast<int>(b.val().numel()) != ncols)
        throw shape_error("add_rowvec: bias " + shape_str(b.val().shape) + " vs cols " +
                          std::to_string(ncols));
    Tensor out = x.val();
    for (int r = 0; r < nrows; ++r)
        for (int c = 0; c < ncols; ++c) out.at(r, c) += b.val().v[c];
    return make_node(std::move(out), {x.node(), b.node()}, [nrows, ncols](Node& n) {
        acc(n.parents[0], n.grad);
        NodePtr& pb = n.parents[1];
        if (!pb->needs_grad) return;
        pb->ensure_grad();
        for (int r = 0; r < nrows; ++r)
            for (int c = 0; c < ncols; ++c) pb->grad.v[c] += n.grad.at(r, c);
    });
}

Var linear(const Var& x, const Var& w) { return matmul(x, w); }

Var linear(const Var& x, const Var& w, const Var& b) {
    return add_rowvec(matmul(x, w), b);
}

Var reshape(const Var& a, Shape s) {
    Tensor out = a.val().reshaped(std::move(s));
    return make_node(std::move(out), {a.node()}, [](Node& n) {
        NodePtr& p = n.parents[0];
        if (!p->needs_grad) return;
        p->ensure_grad();
        for (std::size_t i = 0; i < n.grad.numel(); ++i) p->grad.v[i] += n.grad.v[i];
    });
}

Var slice_cols(const Var& a, int c0, int c1) {
    const int nrows = a.val().rows(), ncols = a.val().cols();
    if (c0 < 0 || c1 > ncols || c0 >= c1)
        throw shape_error("slice_cols: [" + std::to_string(c0) + "," + std::to_string(c1) +
                          ") of " + std::to_string(ncols));
    Tensor out({nrows, c1 - c0});
    for (int r = 0; r < nrows; ++r)
        for (int c = c0; c < c1; ++c) out.at(r, c - c0) = a.val().at(r, c);
    return make_node(std::move(out), {a.node()}, [c0, c1, nrows](Node& n) {
        NodePtr& p = n.parents[0];
        if (!p->needs_grad) return;
        p->ensure_grad();
        for (int r = 0; r < nrows; ++r)
            for (int c = c0; c < c1; ++c) p->grad.at(r, c) += n.grad.at(r, c - c0);
    });
}

Var concat_rows(const Var& a, const Var& b) {
    if (a.val().cols() != b.val().cols())
        throw shape_error("concat_rows: col mismatch");
    const int ra = a.val().rows(), rb = b.val().rows(), ncols = a.val().cols();
    Tensor out({ra + rb, ncols});
    std::copy(a.val().v.begin(), a.val().v.end(), out.v.begin());
    std::copy(b.val().v.begin(), b.val().v.end(), out.v.begin() + a.val().numel());
    return make_node(std::move(out), {a.node(), b.node()}, [ra, rb, ncols](Node& n) {
        if (n.parents[0]->needs_grad) {
            NodePtr& p = n.parents[0];
            p->ensure_grad();
            for (std::size_t i = 0; i < static_cast<std::size_t>(ra) * ncols; ++i)
                p->grad.v[i] += n.grad.v[i];
        }
        if (n.parents[1]->needs_grad) {
            NodePtr& p = n.parents[1];
            p->ensure_grad();
            const std::size_t off = static_cast<std::size_t>(ra) * ncols;
            for (std::size_t i = 0; i < static_cast<std::size_t>(rb) * ncols; ++i)
                p->grad.v[i] += n.grad.v[off + i];
        }
    });
}

Var rmsnorm(const Var& x, const Var& gamma, real eps) {
    const int nrows = x.val().rows(), ncols = x.val().cols();
    if (static_cast<int>(gamma.val().numel()) != ncols)
        throw shape_error("rmsnorm: gamma " + shape_str(gamma.val().shape) + " vs feature dim " +
                          std::to_string(ncols));
    if (eps < 0.0) throw config_error("rmsnorm: eps must be >= 0");
    Tensor out({nrows, ncols});
    std::vector<real> inv_rms(nrows);
    for (int r = 0; r < nrows; ++r) {
        real ss = 0.0;
        for (int c = 0; c < ncols; ++c) ss += x.val().at(r, c) * x.val().at(r, c);
        const real rms = std::sqrt(ss / ncols + eps);
        inv_rms[r] = rms > 0.0 ? 1.0 / rms : 0.0;
        for (int c = 0; c < ncols; ++c)
            out.at(r, c) = x.val().at(r, c) * inv_rms[r] * gamma.val().v[c];
    }
    Tensor xv = x.val(), gv = gamma.val();
    return make_node(std::move(out), {x.node(), gamma.node()},
                     [xv = std::move(xv), gv = std::move(gv), inv_rms = std::move(inv_rms),
                      nrows, ncols](Node& n) {
        NodePtr& px = n.parents[0];
        NodePtr& pg = n.parents[1];
        if (pg->needs_grad) pg->ensure_grad();
        if (px->needs_grad) px->ensure_grad();
        for (int r = 0; r < nrows; ++r) {
            const real ir = inv_rms[r];
            if (pg->needs_grad) {
                for (int c = 0; c < ncols; ++c)
                    pg->grad.v[c] += n.grad.at(r, c) * xv.at(r, c) * ir;
            }
            if (px->needs_grad) {
                real proj = 0.0;
                for (int c = 0; c < ncols; ++c)
                    proj += gv.v[c] * n.grad.at(r, c) * xv.at(r, c);
                proj *= ir * ir / ncols;
                for (int c = 0; c < ncols; ++c)
                    px->grad.at(r, c) +=
                        ir * (gv.v[c] * n.grad.at(r, c) - xv.at(r, c) * proj);
            }
        }
    });
}

Var layernorm_noaffine(const Var& x, real eps) {
    const int nrows = x.val().rows(), ncols = x.val().cols();
    Tensor out({nrows, ncols});
    std::vector<real> inv_std(nrows);
    for (int r = 0; r < nrows; ++r) {
        real mu = 0.0;
        for (int c = 0; c < ncols; ++c) mu += x.val().at(r, c);
        mu /= ncols;
        real var = 0.0;
        for (int c = 0; c < ncols; ++c) {
            const real d = x.val().at(r, c) - mu;
            var += d * d;
        }
        var /= ncols;
        inv_std[r] = 1.0 / std::sqrt(var + eps);
        for (int c = 0; c < ncols; ++c)
            out.at(r, c) = (x.val().at(r, c) - mu) * inv_std[r];
    }
    Tensor ov = out;
    return make_node(std::move(out), {x.node()},
                     [ov = std::move(ov), inv_std = std::move(inv_std), nrows, ncols](Node& n) {
        NodePtr& p = n.parents[0];
        if (!p->needs_grad) return;
        p->ensure_grad();
        for (int r = 0; r < nrows; ++r) {
            real gmean = 0.0, gymean = 0.0;
            for (int c = 0; c < ncols; ++c) {
                gmean += n.grad.at(r, c);
                gymean += n.grad.at(r, c) * ov.at(r, c);
            }
            gmean /= ncols;
            gymean /= ncols;
            for (int c = 0; c < ncols; ++c)
                p->grad.at(r, c) +=
                    inv_std[r] * (n.grad.at(r, c) - gmean - ov.at(r, c) * gymean);
        }
    });
}

Var row_affine(const Var& x, const Var& scl, const Var& shift) {
    const int nrows = x.val().rows(), ncols = x.val().cols();
    if (static_cast<int>(scl.val().numel()) != ncols ||
        static_cast<int>(shift.val().numel()) != ncols)
        throw shape_error("row_affine: modulation width mismatch");
    Tensor out({nrows, ncols});
    for (int r = 0; r < nrows; ++r)
        for (int c = 0; c < ncols; ++c)
            out.at(r, c) = x.val().at(r, c) * (1.0 + scl.val().v[c]) + shift.val().v[c];
    Tensor xv = x.val(), sv = scl.val();
    return make_node(std::move(out), {x.node(), scl.node(), shift.node()},
                     [xv = std::move(xv), sv = std::move(sv), nrows, ncols](Node& n) {
        NodePtr& px = n.parents[0];
        NodePtr& ps = n.parents[1];
        NodePtr& pb = n.parents[2];
        if (px->needs_grad) {
            px->ensure_grad();
            for (int r = 0; r < nrows; ++r)
                for (int c = 0; c < ncols; ++c)
                    px->grad.at(r, c) += n.grad.at(r, c) * (1.0 + sv.v[c]);
        }
        if (ps->needs_grad) {
            ps->ensure_grad();
            for (int r = 0; r < nrows; ++r)
                for (int c = 0; c < ncols; ++c)
                    ps->grad.v[c] += n.grad.at(r, c) * xv.at(r, c);
        }
        if (pb->needs_grad) {
            pb->ensure_grad();
            for (int r = 0; r < nrows; ++r)
                for (int c = 0; c < ncols; ++c) pb->grad.v[c] += n.grad.at(r, c);
        }
    });
}

Var row_gate(const Var& x, const Var& gate) {
    const int nrows = x.val().rows(), ncols = x.val().cols();
    if (static_cast<int>(gate.val().numel()) != ncols)
        throw shape_error("row_gate: gate width mismatch");
    Tensor out({nrows, ncols});
    for (int r = 0; r < nrows; ++r)
        for (int c = 0; c < ncols; ++c) out.at(r, c) = x.val().at(r, c) * gate.val().v[c];
    Tensor xv = x.val(), gv = gate.val();
    return make_node(std::move(out), {x.node(), gate.node()},
                     [xv = std::move(xv), gv = std::move(gv), nrows, ncols](Node& n) {
        NodePtr& px = n.parents[0];
        NodePtr& pg = n.parents[1];
        if (px->needs_grad) {
            px->ensure_grad();
            for (int r = 0; r < nrows; ++r)
                for (int c = 0; c < ncols; ++c) px->grad.at(r, c) += n.grad.at(r, c) * gv.v[c];
        }
        if (pg->needs_grad) {
            pg->ensure_grad();
            for (int r = 0; r < nrows; ++r)
                for (int c = 0; c < ncols; ++c) pg->grad.v[c] += n.grad.at(r, c) * xv.at(r, c);
        }
    });
}

Var embed_row(const Var& table, int row) {
    const int nrows = table.val().rows(), ncols = table.val().cols();
    if (row < 0 || row >= nrows)
        throw shape_error("embed_row: index " + std::to_string(row) + " out of " +
                          std::to_string(nrows));
    Tensor out({1, ncols});
    for (int c = 0; c < ncols; ++c) out.v[c] = table.val().at(row, c);
    return make_node(std::move(out), {table.node()}, [row, ncols](Node& n) {
        NodePtr& p = n.parents[0];
        if (!p->needs_grad) return;
        p->ensure_grad();
        for (int c = 0; c < ncols; ++c) p->grad.at(row, c) += n.grad.v[c];
    });
}

} // namespace fae::ad
