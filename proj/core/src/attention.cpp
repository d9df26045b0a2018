#include "fae/attention.hpp"

#include <cmath>

namespace fae {

std::vector<GridPos> grid_positions(int grid_h, int grid_w, int num_registers) {
    std::vector<GridPos> pos;
    pos.reserve(static_cast<std::size_t>(grid_h) * grid_w + num_registers);
    for (int i = 0; i < num_registers; ++i) pos.push_back({0, 0});
    for (int r = 0; r < grid_h; ++r)
        for (int c = 0; c < grid_w; ++c) pos.push_back({r, c});
    return pos;
}

void AttentionConfig::validate() const {
    if (num_heads < 1) throw config_error("attention: num_heads must be >= 1");
    if (head_dim < 1) throw config_error("attention: head_dim must be >= 1");
    if (input_dim < 1 || output_dim < 1)
        throw config_error("attention: input/output dims must be >= 1");
    if (use_rope && head_dim % 4 != 0)
        throw config_error("attention: rope requires head_dim divisible by 4, got " +
                           std::to_string(head_dim));
}

namespace ad {

namespace {

struct RotationTable {
    // Per token, per plane: cos/sin. planes = head_dim/4 per axis.
    std::vector<real> cos_row, sin_row, cos_col, sin_col;
    int planes = 0;
};

RotationTable build_rotations(const std::vector<GridPos>& positions, int head_dim, real base) {
    RotationTable t;
    const int half = head_dim / 2;
    t.planes = half / 2;
    const int n = static_cast<int>(positions.size());
    t.cos_row.resize(static_cast<std::size_t>(n) * t.planes);
    t.sin_row.resize(static_cast<std::size_t>(n) * t.planes);
    t.cos_col.resize(static_cast<std::size_t>(n) * t.planes);
    t.sin_col.resize(static_cast<std::size_t>(n) * t.planes);
    for (int i = 0; i < t.planes; ++i) {
        const real inv_freq = std::pow(base, -2.0 * i / static_cast<real>(half));
        for (int tk = 0; tk < n; ++tk) {
            const real ar = positions[tk].row * inv_freq;
            const real ac = positions[tk].col * inv_freq;
            t.cos_row[static_cast<std::size_t>(tk) * t.planes + i] = std::cos(ar);
            t.sin_row[static_cast<std::size_t>(tk) * t.planes + i] = std::sin(ar);
            t.cos_col[static_cast<std::size_t>(tk) * t.planes + i] = std::cos(ac);
            t.sin_col[static_cast<std::size_t>(tk) * t.planes + i] = std::sin(ac);
        }
    }
    return t;
}

// dir=+1 rotates forward, dir=-1 applies the inverse (used for gradients).
void rotate_inplace(Tensor& x, const RotationTable& t, int num_heads, int head_dim, int dir) {
    const int n = x.rows();
    const int half = head_dim / 2;
    for (int tk = 0; tk < n; ++tk) {
        real* row = x.data() + static_cast<std::size_t>(tk) * x.cols();
        const std::size_t base_idx = static_cast<std::size_t>(tk) * t.planes;
        for (int h = 0; h < num_heads; ++h) {
            real* head = row + h * head_dim;
            for (int i = 0; i < t.planes; ++i) {
                const real cr = t.cos_row[base_idx + i];
                const real sr = dir * t.sin_row[base_idx + i];
                real& a = head[2 * i];
                real& b = head[2 * i + 1];
                const real na = a * cr - b * sr;
                const real nb = a * sr + b * cr;
                a = na;
                b = nb;
                const real cc = t.cos_col[base_idx + i];
                const real sc = dir * t.sin_col[base_idx + i];
                real& c = head[half + 2 * i];
                real& d = head[half + 2 * i + 1];
                const real nc = c * cc - d * sc;
                const real nd = c * sc + d * cc;
                c = nc;
                d = nd;
            }
        }
    }
}

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

} // namespace

Var rope_apply(const Var& x, const std::vector<GridPos>& positions, int num_heads, real base) {
    const int n = x.val().rows();
    const int inner = x.val().cols();
    if (inner % num_heads != 0)
        throw shape_error("rope_apply: width not divisible by num_heads");
    const int head_dim = inner / num_heads;
    if (head_dim % 4 != 0)
        throw config_error("rope_apply: head_dim must be divisible by 4, got " +
                           std::to_string(head_dim));
    if (static_cast<int>(positions.size()) != n)
        throw shape_error("rope_apply: positions count " + std::to_string(positions.size()) +
                          " vs tokens " + std::to_string(n));

    auto table = std::make_shared<RotationTable>(build_rotations(positions, head_dim, base));
    Tensor out = x.val();
    rotate_inplace(out, *table, num_heads, head_dim, +1);
    return make_node(std::move(out), {x.node()}, [table, num_heads, head_dim](Node& nd) {
        NodePtr& p = nd.parents[0];
        if (!p->needs_grad) return;
        p->ensure_grad();
        Tensor g = nd.grad;
        rotate_inplace(g, *table, num_heads, head_dim, -1);
        for (std::size_t i = 0; i < g.numel(); ++i) p->grad.v[i] += g.v[i];
    });
}

Var sdpa(const Var& q, const Var& k, const Var& v, int num_heads, Tensor* probs_out) {
    require_same_shape(q.val(), k.val(), "sdpa q/k");
    require_same_shape(q.val(), v.val(), "sdpa q/v");
    const int n = q.val().rows();
    const int inner = q.val().cols();
    if (inner % num_heads != 0) throw shape_error("sdpa: width not divisible by num_heads");
    const int dh = inner / num_heads;
    const real inv_sqrt = 1.0 / std::sqrt(static_cast<real>(dh));

    // probs[h*n + i][j]
    auto probs = std::make_shared<Tensor>(Shape{num_heads * n, n});
    Tensor out({n, inner});
    for (int h = 0; h < num_heads; ++h) {
        const int off = h * dh;
        for (int i = 0; i < n; ++i) {
            real* prow = probs->data() + static_cast<std::size_t>(h * n + i) * n;
            const real* qi = q.val().data() + static_cast<std::size_t>(i) * inner + off;
            real max_logit = -std::numeric_limits<real>::infinity();
            for (int j = 0; j < n; ++j) {
                const real* kj = k.val().data() + static_cast<std::size_t>(j) * inner + off;
                real s = 0.0;
                for (int d = 0; d < dh; ++d) s += qi[d] * kj[d];
                s *= inv_sqrt;
                if (!std::isfinite(s))
                    throw numeric_error("attention: non-finite logit at token " +
                                        std::to_string(i) + " (head " + std::to_string(h) + ")");
                prow[j] = s;
                if (s > max_logit) max_logit = s;
            }
            real z = 0.0;
            for (int j = 0; j < n; ++j) {
                prow[j] = std::exp(prow[j] - max_logit);
                z += prow[j];
            }
            const real inv_z = 1.0 / z;
            real* orow = out.data() + static_cast<std::size_t>(i) * inner + off;
            for (int j = 0; j < n; ++j) {
                prow[j] *= inv_z;
                const real* vj = v.val().data() + static_cast<std::size_t>(j) * inner + off;
                const real pij = prow[j];
                for (int d = 0; d < dh; ++d) orow[d] += pij * vj[d];
            }
        }
    }
    if (probs_out) *probs_out = *probs;

    Tensor qv = q.val(), kv = k.val(), vv = v.val();
    return make_node(std::move(out), {q.node(), k.node(), v.node()},
                     [probs, qv = std::move(qv), kv = std::move(kv), vv = std::move(vv),
                      num_heads, n, inner, dh, inv_sqrt](Node& nd) {
        NodePtr& pq = nd.parents[0];
        NodePtr& pk = nd.parents[1];
        NodePtr& pv = nd.parents[2];
        if (pq->needs_grad) pq->ensure_grad();
        if (pk->needs_grad) pk->ensure_grad();
        if (pv->needs_grad) pv->ensure_grad();
        std::vector<real> dp(static_cast<std::size_t>(n));
        for (int h = 0; h < num_heads; ++h) {
            const int off = h * dh;
            for (int i = 0; i < n; ++i) {
                const real* prow = probs->data() + static_cast<std::size_t>(h * n + i) * n;
                const real* go = nd.grad.data() + static_cast<std::size_t>(i) * inner + off;
                // dV and dP
                real dot_dp_p = 0.0;
                for (int j = 0; j < n; ++j) {
                    const real* vj = vv.data() + static_cast<std::size_t>(j) * inner + off;
                    real d = 0.0;
                    for (int dd = 0; dd < dh; ++dd) d += go[dd] * vj[dd];
                    dp[j] = d;
                    dot_dp_p += d * prow[j];
                    if (pv->needs_grad) {
                        real* gv = pv->grad.data() + static_cast<std::size_t>(j) * inner + off;
                        const real pij = prow[j];
                        for (int dd = 0; dd < dh; ++dd) gv[dd] += pij * go[dd];
                    }
                }
                // dS = P .* (dP - sum(dP .* P)); dQ += dS K / sqrt(dh); dK += dS^T Q / sqrt(dh)
                const real* qi = qv.data() + static_cast<std::size_t>(i) * inner + off;
                real* gq = pq->needs_grad
                               ? pq->grad.data() + static_cast<std::size_t>(i) * inner + off
                               : nullptr;
                for (int j = 0; j < n; ++j) {
                    const real ds = prow[j] * (dp[j] - dot_dp_p) * inv_sqrt;
                    if (ds == 0.0) continue;
                    const real* kj = kv.data() + static_cast<std::size_t>(j) * inner + off;
                    if (gq)
                        for (int dd = 0; dd < dh; ++dd) gq[dd] += ds * kj[dd];
                    if (pk->needs_grad) {
                        real* gk = pk->grad.data() + static_cast<std::size_t>(j) * inner + off;
                        for (int dd = 0; dd < dh; ++dd) gk[dd] += ds * qi[dd];
                    }
                }
            }
        }
    });
}

} // namespace ad

std::vector<ParamSpec> attention_param_specs(const AttentionConfig& cfg,
                                             const std::string& prefix) {
    cfg.validate();
    const int inner = cfg.inner_dim();
    std::vector<ParamSpec> specs;
    // q/k/v projections are bias-free: a key bias is invisible to softmax
    // (its gradient is identically zero without rotary phases), so it would
    // be an unidentifiable parameter.
    if (cfg.merged_qkv) {
        specs.push_back({prefix + ".wqkv", {cfg.input_dim, 3 * inner}, Init::Normal02});
    } else {
        specs.push_back({prefix + ".wq", {cfg.input_dim, inner}, Init::Normal02});
        specs.push_back({prefix + ".wk", {cfg.input_dim, inner}, Init::Normal02});
        specs.push_back({prefix + ".wv", {cfg.input_dim, inner}, Init::Normal02});
    }
    specs.push_back({prefix + ".wo", {inner, cfg.output_dim}, Init::Normal02});
    specs.push_back({prefix + ".bo", {cfg.output_dim}, Init::Zero});
    return specs;
}

ad::Var attention_forward(ad::Autograd& ctx, const ad::Var& x, const AttentionConfig& cfg,
                          ParamStore& weights, const std::string& prefix,
                          const std::vector<GridPos>* positions, Tensor* probs_out) {
    cfg.validate();
    if (x.cols() != cfg.input_dim)
        throw shape_error("attention_forward: token dim " + std::to_string(x.cols()) +
                          " vs input_dim " + std::to_string(cfg.input_dim));
    const int inner = cfg.inner_dim();
    ad::Var q, k, v;
    if (cfg.merged_qkv) {
        ad::Var qkv = ad::matmul(x, ctx.param(weights.get(prefix + ".wqkv")));
        q = ad::slice_cols(qkv, 0, inner);
        k = ad::slice_cols(qkv, inner, 2 * inner);
        v = ad::slice_cols(qkv, 2 * inner, 3 * inner);
    } else {
        q = ad::matmul(x, ctx.param(weights.get(prefix + ".wq")));
        k = ad::matmul(x, ctx.param(weights.get(prefix + ".wk")));
        v = ad::matmul(x, ctx.param(weights.get(prefix + ".wv")));
    }
    if (cfg.use_rope) {
        if (!positions)
            throw config_error("attention_forward: rope enabled but no grid positions given");
        q = ad::rope_apply(q, *positions, cfg.num_heads, cfg.rope_base);
        k = ad::rope_apply(k, *positions, cfg.num_heads, cfg.rope_base);
    }
    ad::Var attn = ad::sdpa(q, k, v, cfg.num_heads, probs_out);
    return ad::linear(attn, ctx.param(weights.get(prefix + ".wo")),
                      ctx.param(weights.get(prefix + ".bo")));
}

void BlockConfig::validate() const {
    if (hidden_dim < 1) throw config_error("block: hidden_dim must be >= 1");
    if (mlp_ratio <= 0.0) throw config_error("block: mlp_ratio must be > 0");
    if (rms_eps <= 0.0) throw config_error("block: rms_eps must be > 0");
    if (hidden_dim % num_heads != 0)
        throw config_error("block: hidden_dim not divisible by num_heads");
    if (use_rope && head_dim() % 4 != 0)
        throw config_error("block: rope requires head_dim divisible by 4");
}

int swiglu_hidden_width(int hidden_dim, real mlp_ratio) {
    const real target = hidden_dim * mlp_ratio * (2.0 / 3.0);
    const long long mult = std::llround(target / 64.0);
    return static_cast<int>(std::max(1LL, mult)) * 64;
}

ad::Var swiglu_forward(const ad::Var& x, const ad::Var& w_gate, const ad::Var& w_up,
                       const ad::Var& w_down) {
    ad::Var g = ad::matmul(x, w_gate);
    ad::Var u = ad::matmul(x, w_up);
    return ad::matmul(ad::mul(ad::silu(g), u), w_down);
}

std::vector<ParamSpec> block_param_specs(const BlockConfig& cfg, const std::string& prefix) {
    cfg.validate();
    std::vector<ParamSpec> specs;
    AttentionConfig att;
    att.input_dim = cfg.hidden_dim;
    att.output_dim = cfg.hidden_dim;
    att.num_heads = cfg.num_heads;
    att.head_dim = cfg.head_dim();
    att.use_rope = cfg.use_rope;
    att.rope_base = cfg.rope_base;
    auto att_specs = attention_param_specs(att, prefix + ".attn");
    specs.insert(specs.end(), att_specs.begin(), att_specs.end());
    if (cfg.use_rmsnorm) {
        specs.push_back({prefix + ".norm1.g", {cfg.hidden_dim}, Init::One});
        specs.push_back({prefix + ".norm2.g", {cfg.hidden_dim}, Init::One});
    }
    if (cfg.use_swiglu) {
        const int hw = swiglu_hidden_width(cfg.hidden_dim, cfg.mlp_ratio);
        specs.push_back({prefix + ".mlp.w_gate", {cfg.hidden_dim, hw}, Init::Normal02});
        specs.push_back({prefix + ".mlp.w_up", {cfg.hidden_dim, hw}, Init::Normal02});
        specs.push_back({prefix + ".mlp.w_down", {hw, cfg.hidden_dim}, Init::Normal02});
    } else {
        const int hw = static_cast<int>(std::llround(cfg.hidden_dim * cfg.mlp_ratio));
        specs.push_back({prefix + ".mlp.w1", {cfg.hidden_dim, hw}, Init::Normal02});
        specs.push_back({prefix + ".mlp.b1", {hw}, Init::Zero});
        specs.push_back({prefix + ".mlp.w2", {hw, cfg.hidden_dim}, Init::Normal02});
        specs.push_back({prefix + ".mlp.b2", {cfg.hidden_dim}, Init::Zero});
    }
    return specs;
}

ad::Var transformer_block(ad::Autograd& ctx, const ad::Var& x, const BlockConfig& cfg,
                          ParamStore& weights, const std::string& prefix,
                          const std::vector<GridPos>* positions) {
    cfg.validate();
    AttentionConfig att;
    att.input_dim = cfg.hidden_dim;
    att.output_dim = cfg.hidden_dim;
    att.num_heads = cfg.num_heads;
    att.head_dim = cfg.head_dim();
    att.use_rope = cfg.use_rope;
    att.rope_base = cfg.rope_base;

    auto norm = [&](const ad::Var& in, const std::string& name) {
        if (cfg.use_rmsnorm)
            return ad::rmsnorm(in, ctx.param(weights.get(prefix + "." + name + ".g")),
                               cfg.rms_eps);
        return ad::layernorm_noaffine(in, cfg.rms_eps);
    };

    ad::Var h = ad::add(x, attention_forward(ctx, norm(x, "norm1"), att, weights,
                                             prefix + ".attn", positions));
    ad::Var m;
    if (cfg.use_swiglu) {
        m = swiglu_forward(norm(h, "norm2"), ctx.param(weights.get(prefix + ".mlp.w_gate")),
                           ctx.param(weights.get(prefix + ".mlp.w_up")),
                           ctx.param(weights.get(prefix + ".mlp.w_down")));
    } else {
        ad::Var a = ad::linear(norm(h, "norm2"), ctx.param(weights.get(prefix + ".mlp.w1")),
                               ctx.param(weights.get(prefix + ".mlp.b1")));
        m = ad::linear(ad::gelu(a), ctx.param(weights.get(prefix + ".mlp.w2")),
                       ctx.param(weights.get(prefix + ".mlp.b2")));
    }
    return ad::add(h, m);
}

} // namespace fae
