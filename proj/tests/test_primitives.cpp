#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <vector>

#include "fae/attention.hpp"
#include "fae/autodiff.hpp"
#include "fae/gradcheck.hpp"
#include "fae/rng.hpp"

using namespace fae;

namespace {

// Scalar-loop references, kept independent of the library kernels.

Tensor ref_rmsnorm(const Tensor& x, const Tensor& gamma, real eps) {
    Tensor out(x.shape);
    for (int r = 0; r < x.rows(); ++r) {
        real ss = 0.0;
        for (int c = 0; c < x.cols(); ++c) ss += x.at(r, c) * x.at(r, c);
        const real rms = std::sqrt(ss / x.cols() + eps);
        for (int c = 0; c < x.cols(); ++c)
            out.at(r, c) = rms > 0.0 ? x.at(r, c) / rms * gamma.v[c] : 0.0;
    }
    return out;
}

Tensor ref_matvec(const Tensor& w, const Tensor& x_row) {
    Tensor out({1, w.cols()});
    for (int j = 0; j < w.cols(); ++j) {
        real s = 0.0;
        for (int i = 0; i < w.rows(); ++i) s += x_row.v[i] * w.at(i, j);
        out.v[j] = s;
    }
    return out;
}

Tensor ref_swiglu(const Tensor& x_row, const Tensor& wg, const Tensor& wu, const Tensor& wd) {
    Tensor g = ref_matvec(wg, x_row);
    Tensor u = ref_matvec(wu, x_row);
    Tensor h({1, g.cols()});
    for (int j = 0; j < g.cols(); ++j) {
        const real s = g.v[j] / (1.0 + std::exp(-g.v[j]));
        h.v[j] = s * u.v[j];
    }
    return ref_matvec(wd, h);
}

// Naive O(N^2) multi-head attention with explicit loops.
Tensor ref_attention(const Tensor& q, const Tensor& k, const Tensor& v, int heads) {
    const int n = q.rows(), inner = q.cols(), dh = inner / heads;
    Tensor out({n, inner});
    for (int h = 0; h < heads; ++h) {
        for (int i = 0; i < n; ++i) {
            std::vector<real> logits(n);
            for (int j = 0; j < n; ++j) {
                real s = 0.0;
                for (int d = 0; d < dh; ++d) s += q.at(i, h * dh + d) * k.at(j, h * dh + d);
                logits[j] = s / std::sqrt(static_cast<real>(dh));
            }
            real mx = logits[0];
            for (real l : logits) mx = std::max(mx, l);
            real z = 0.0;
            for (real& l : logits) {
                l = std::exp(l - mx);
                z += l;
            }
            for (int j = 0; j < n; ++j)
                for (int d = 0; d < dh; ++d)
                    out.at(i, h * dh + d) += logits[j] / z * v.at(j, h * dh + d);
        }
    }
    return out;
}

real max_abs_diff(const Tensor& a, const Tensor& b) {
    REQUIRE(a.shape == b.shape);
    real m = 0.0;
    for (std::size_t i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(a.v[i] - b.v[i]));
    return m;
}

real max_rel_diff(const Tensor& a, const Tensor& b) {
    REQUIRE(a.shape == b.shape);
    real m = 0.0;
    for (std::size_t i = 0; i < a.numel(); ++i) {
        const real denom = std::max({std::abs(a.v[i]), std::abs(b.v[i]), real(1e-12)});
        m = std::max(m, std::abs(a.v[i] - b.v[i]) / denom);
    }
    return m;
}

} // namespace

TEST_CASE("rmsnorm constant vector normalizes to unit rms") {
    Tensor x({1, 4}, {2, 2, 2, 2});
    Tensor gamma({4}, 1.0);
    ad::Var y = ad::rmsnorm(ad::constant(x), ad::constant(gamma), 0.0);
    for (int c = 0; c < 4; ++c) CHECK(y.val().v[c] == doctest::Approx(1.0).epsilon(1e-15));
}

TEST_CASE("rmsnorm zero input maps to zero") {
    Tensor x({2, 4}, 0.0);
    Tensor gamma({4}, 1.0);
    ad::Var y = ad::rmsnorm(ad::constant(x), ad::constant(gamma), 1e-6);
    for (real v : y.val().v) CHECK(v == 0.0);
}

TEST_CASE("rmsnorm matches scalar-loop reference") {
    Rng rng(101);
    Tensor x({5, 9});
    Tensor gamma({9});
    rng.fill_normal(x);
    rng.fill_uniform(gamma, 0.5, 1.5);
    ad::Var y = ad::rmsnorm(ad::constant(x), ad::constant(gamma), 1e-6);
    CHECK(max_rel_diff(y.val(), ref_rmsnorm(x, gamma, 1e-6)) < 1e-12);
}

TEST_CASE("rmsnorm rejects mismatched gamma") {
    Tensor x({2, 4});
    Tensor gamma({3});
    CHECK_THROWS_AS(ad::rmsnorm(ad::constant(x), ad::constant(gamma), 1e-6), Error);
}

TEST_CASE("swiglu zero input gives zero output") {
    Rng rng(5);
    Tensor x({1, 6}, 0.0);
    Tensor wg({6, 8}), wu({6, 8}), wd({8, 6});
    rng.fill_normal(wg);
    rng.fill_normal(wu);
    rng.fill_normal(wd);
    ad::Var y = swiglu_forward(ad::constant(x), ad::constant(wg), ad::constant(wu),
                               ad::constant(wd));
    for (real v : y.val().v) CHECK(v == 0.0);
}

TEST_CASE("swiglu identity-like single path") {
    // Square identity gate/up/down on a one-hot input routes silu(1)*1.
    const int d = 4;
    Tensor x({1, d}, 0.0);
    x.v[0] = 1.0;
    Tensor eye({d, d}, 0.0);
    for (int i = 0; i < d; ++i) eye.at(i, i) = 1.0;
    ad::Var y = swiglu_forward(ad::constant(x), ad::constant(eye), ad::constant(eye),
                               ad::constant(eye));
    const real silu1 = 1.0 / (1.0 + std::exp(-1.0));
    CHECK(y.val().v[0] == doctest::Approx(silu1).epsilon(1e-15));
    for (int i = 1; i < d; ++i) CHECK(y.val().v[i] == 0.0);
}

TEST_CASE("swiglu matches scalar-loop reference") {
    Rng rng(7);
    Tensor x({1, 10}), wg({10, 12}), wu({10, 12}), wd({12, 10});
    rng.fill_normal(x);
    rng.fill_normal(wg);
    rng.fill_normal(wu);
    rng.fill_normal(wd);
    ad::Var y = swiglu_forward(ad::constant(x), ad::constant(wg), ad::constant(wu),
                               ad::constant(wd));
    CHECK(max_rel_diff(y.val(), ref_swiglu(x, wg, wu, wd)) < 1e-12);
}

TEST_CASE("swiglu hidden width rounding") {
    CHECK(swiglu_hidden_width(1536, 4.0) == 4096);
    CHECK(swiglu_hidden_width(1152, 4.0) == 3072);
    CHECK(swiglu_hidden_width(96, 4.0) == 256);
    CHECK(swiglu_hidden_width(128, 4.0) == 320);
    CHECK(swiglu_hidden_width(16, 4.0) == 64);  // floor at one group
}

TEST_CASE("rope identity at the origin") {
    Rng rng(11);
    Tensor x({1, 8});
    rng.fill_normal(x);
    std::vector<GridPos> pos = {{0, 0}};
    ad::Var y = ad::rope_apply(ad::constant(x), pos, 1, 10000.0);
    CHECK(max_abs_diff(y.val(), x) == 0.0);
}

TEST_CASE("rope preserves per-token norm") {
    Rng rng(13);
    const int heads = 2, dh = 8;
    Tensor x({6, heads * dh});
    rng.fill_normal(x);
    auto pos = grid_positions(2, 3);
    ad::Var y = ad::rope_apply(ad::constant(x), pos, heads, 10000.0);
    for (int t = 0; t < 6; ++t) {
        real n0 = 0.0, n1 = 0.0;
        for (int c = 0; c < heads * dh; ++c) {
            n0 += x.at(t, c) * x.at(t, c);
            n1 += y.val().at(t, c) * y.val().at(t, c);
        }
        CHECK(std::abs(std::sqrt(n0) - std::sqrt(n1)) < 1e-12);
    }
}

TEST_CASE("rope dot products depend only on relative offsets") {
    Rng rng(17);
    const int heads = 1, dh = 8;
    Tensor q({1, dh}), k({1, dh});
    rng.fill_normal(q);
    rng.fill_normal(k);
    auto dot_at = [&](GridPos pq, GridPos pk) {
        std::vector<GridPos> pos_q = {pq}, pos_k = {pk};
        ad::Var rq = ad::rope_apply(ad::constant(q), pos_q, heads, 100.0);
        ad::Var rk = ad::rope_apply(ad::constant(k), pos_k, heads, 100.0);
        real s = 0.0;
        for (int c = 0; c < dh; ++c) s += rq.val().v[c] * rk.val().v[c];
        return s;
    };
    const real base_dot = dot_at({1, 2}, {3, 5});
    for (auto [dr, dc] : std::vector<std::pair<int, int>>{{1, 0}, {2, 3}, {5, 1}}) {
        const real shifted = dot_at({1 + dr, 2 + dc}, {3 + dr, 5 + dc});
        CHECK(std::abs(shifted - base_dot) < 1e-10);
    }
}

TEST_CASE("rope rejects head_dim not divisible by 4") {
    Tensor x({1, 6});
    std::vector<GridPos> pos = {{0, 0}};
    CHECK_THROWS_AS(ad::rope_apply(ad::constant(x), pos, 1, 10000.0), Error);
}

TEST_CASE("attention single token reduces to value path") {
    Rng rng(19);
    AttentionConfig cfg;
    cfg.input_dim = 6;
    cfg.num_heads = 2;
    cfg.head_dim = 4;
    cfg.output_dim = 5;
    ParamStore w;
    w.init_from_specs(attention_param_specs(cfg, "a"), rng);
    Tensor x({1, 6});
    rng.fill_normal(x);

    ad::Autograd ctx;
    ad::Var y = attention_forward(ctx, ctx.constant(x), cfg, w, "a");

    // Reference: out_proj(value_projection(x)).
    const Tensor& wqkv = w.get("a.wqkv").value;
    const int inner = cfg.inner_dim();
    Tensor val({1, inner});
    for (int j = 0; j < inner; ++j) {
        real s = 0.0;
        for (int i = 0; i < 6; ++i) s += x.v[i] * wqkv.at(i, 2 * inner + j);
        val.v[j] = s;
    }
    const Tensor& wo = w.get("a.wo").value;
    const Tensor& bo = w.get("a.bo").value;
    Tensor expect({1, 5});
    for (int j = 0; j < 5; ++j) {
        real s = bo.v[j];
        for (int i = 0; i < inner; ++i) s += val.v[i] * wo.at(i, j);
        expect.v[j] = s;
    }
    CHECK(max_rel_diff(y.val(), expect) < 1e-12);
}

TEST_CASE("attention zero query gives uniform weights") {
    Rng rng(23);
    AttentionConfig cfg;
    cfg.input_dim = 4;
    cfg.num_heads = 1;
    cfg.head_dim = 4;
    cfg.output_dim = 4;
    ParamStore w;
    w.init_from_specs(attention_param_specs(cfg, "a"), rng);
    // Zero out the query block of the fused projection.
    Tensor& wqkv = w.get("a.wqkv").value;
    for (int i = 0; i < 4; ++i)
        for (int j = 0; j < 4; ++j) wqkv.at(i, j) = 0.0;

    Tensor x({5, 4});
    rng.fill_normal(x);
    ad::Autograd ctx;
    Tensor probs;
    attention_forward(ctx, ctx.constant(x), cfg, w, "a", nullptr, &probs);
    for (int r = 0; r < probs.rows(); ++r)
        for (int c = 0; c < probs.cols(); ++c)
            CHECK(probs.at(r, c) == doctest::Approx(0.2).epsilon(1e-12));
}

TEST_CASE("attention matches naive scalar-loop oracle on random 4-token input") {
    Rng rng(29);
    AttentionConfig cfg;
    cfg.input_dim = 6;
    cfg.num_heads = 2;
    cfg.head_dim = 4;
    cfg.output_dim = 6;
    cfg.merged_qkv = false;
    ParamStore w;
    w.init_from_specs(attention_param_specs(cfg, "a"), rng);
    Tensor x({4, 6});
    rng.fill_normal(x);

    ad::Autograd ctx;
    ad::Var y = attention_forward(ctx, ctx.constant(x), cfg, w, "a");

    auto project = [&](const char* wn) {
        const Tensor& wm = w.get(wn).value;
        Tensor out({4, wm.cols()});
        for (int r = 0; r < 4; ++r)
            for (int j = 0; j < wm.cols(); ++j) {
                real s = 0.0;
                for (int i = 0; i < wm.rows(); ++i) s += x.at(r, i) * wm.at(i, j);
                out.at(r, j) = s;
            }
        return out;
    };
    Tensor q = project("a.wq");
    Tensor k = project("a.wk");
    Tensor v = project("a.wv");
    Tensor attn = ref_attention(q, k, v, 2);
    const Tensor& wo = w.get("a.wo").value;
    const Tensor& bo = w.get("a.bo").value;
    Tensor expect({4, 6});
    for (int r = 0; r < 4; ++r)
        for (int j = 0; j < 6; ++j) {
            real s = bo.v[j];
            for (int i = 0; i < wo.rows(); ++i) s += attn.at(r, i) * wo.at(i, j);
            expect.at(r, j) = s;
        }
    CHECK(max_rel_diff(y.val(), expect) < 1e-10);
}

TEST_CASE("attention softmax rows sum to one") {
    Rng rng(31);
    AttentionConfig cfg;
    cfg.input_dim = 8;
    cfg.num_heads = 2;
    cfg.head_dim = 4;
    cfg.output_dim = 8;
    ParamStore w;
    w.init_from_specs(attention_param_specs(cfg, "a"), rng);
    Tensor x({7, 8});
    rng.fill_normal(x, 0.0, 2.0);
    ad::Autograd ctx;
    Tensor probs;
    attention_forward(ctx, ctx.constant(x), cfg, w, "a", nullptr, &probs);
    for (int r = 0; r < probs.rows(); ++r) {
        real s = 0.0;
        for (int c = 0; c < probs.cols(); ++c) s += probs.at(r, c);
        CHECK(std::abs(s - 1.0) < 1e-12);
    }
}

TEST_CASE("forward ops are deterministic") {
    Rng rng(37);
    BlockConfig blk;
    blk.hidden_dim = 8;
    blk.num_heads = 2;
    ParamStore w;
    w.init_from_specs(block_param_specs(blk, "b"), rng);
    Tensor x({6, 8});
    rng.fill_normal(x);
    auto pos = grid_positions(2, 3);
    ad::Autograd c1, c2;
    ad::Var y1 = transformer_block(c1, c1.constant(x), blk, w, "b", &pos);
    ad::Var y2 = transformer_block(c2, c2.constant(x), blk, w, "b", &pos);
    CHECK(max_abs_diff(y1.val(), y2.val()) == 0.0);
}

TEST_CASE("grad_check is exact for linear maps") {
    Rng rng(41);
    Tensor a({7});
    rng.fill_normal(a);
    Tensor point({7});
    rng.fill_normal(point);
    auto f = [&a](const ad::Var& p) { return ad::sum_all(ad::mul(p, ad::constant(a))); };
    auto res = grad_check(f, point, 1e-5);
    CHECK(res.max_rel_err <= 1e-10);
}

TEST_CASE("grad_check eps bounds enforced") {
    Tensor point({2});
    auto f = [](const ad::Var& p) { return ad::sum_all(p); };
    CHECK_THROWS_AS(grad_check(f, point, 1e-8), Error);
    CHECK_THROWS_AS(grad_check(f, point, 1e-2), Error);
}

TEST_CASE("grad_check rmsnorm within 1e-6") {
    Rng rng(43);
    const int n = 3, d = 6;
    Tensor point({n * d + d});
    rng.fill_normal(point);
    auto f = [&](const ad::Var& p) {
        ad::Var x = ad::reshape(ad::slice_cols(ad::reshape(p, {1, n * d + d}), 0, n * d),
                                {n, d});
        ad::Var g = ad::reshape(
            ad::slice_cols(ad::reshape(p, {1, n * d + d}), n * d, n * d + d), {d});
        ad::Var y = ad::rmsnorm(x, g, 1e-6);
        return ad::sum_all(ad::mul(y, ad::constant(Tensor({n, d}, 0.37))));
    };
    auto res = grad_check(f, point, 1e-5);
    CHECK(res.max_rel_err <= 1e-6);
}

TEST_CASE("grad_check full attention block within 1e-4") {
    Rng rng(47);
    BlockConfig blk;
    blk.hidden_dim = 8;
    blk.num_heads = 2;
    ParamStore store;
    store.init_from_specs(block_param_specs(blk, "b"), rng);
    Tensor x({4, 8});
    rng.fill_normal(x);
    auto pos = grid_positions(2, 2);
    Rng wrng(48);
    Tensor functional({4, 8});
    wrng.fill_normal(functional);

    auto f = [&](ad::Autograd& ctx) {
        ad::Var y = transformer_block(ctx, ctx.constant(x), blk, store, "b", &pos);
        return ad::sum_all(ad::mul(y, ad::constant(functional)));
    };
    auto res = grad_check_params(f, store, 1e-5);
    CHECK(res.max_rel_err <= 1e-4);
}

TEST_CASE("sdpa backward matches finite differences directly") {
    Rng rng(53);
    const int n = 3, heads = 1, dh = 4;
    Tensor point({3 * n * dh});
    rng.fill_normal(point);
    Rng wrng(54);
    Tensor functional({n, dh});
    wrng.fill_normal(functional);
    auto f = [&](const ad::Var& p) {
        ad::Var flat = ad::reshape(p, {1, 3 * n * dh});
        ad::Var q = ad::reshape(ad::slice_cols(flat, 0, n * dh), {n, dh});
        ad::Var k = ad::reshape(ad::slice_cols(flat, n * dh, 2 * n * dh), {n, dh});
        ad::Var v = ad::reshape(ad::slice_cols(flat, 2 * n * dh, 3 * n * dh), {n, dh});
        ad::Var y = ad::sdpa(q, k, v, heads);
        return ad::sum_all(ad::mul(y, ad::constant(functional)));
    };
    auto res = grad_check(f, point, 1e-5);
    CHECK(res.max_rel_err <= 1e-6);
}
