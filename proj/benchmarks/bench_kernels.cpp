#include <benchmark/benchmark.h>

#include "fae/attention.hpp"
#include "fae/autodiff.hpp"
#include "fae/rng.hpp"

using namespace fae;

namespace {

void BM_matmul(benchmark::State& state) {
    const int n = static_cast<int>(state.range(0));
    Rng rng(1);
    Tensor a({n, n}), b({n, n});
    rng.fill_normal(a);
    rng.fill_normal(b);
    for (auto _ : state) {
        Tensor c({n, n});
        matmul_acc(a, b, c);
        benchmark::DoNotOptimize(c.data());
    }
    state.SetItemsProcessed(state.iterations() * 2LL * n * n * n);
}
BENCHMARK(BM_matmul)->Arg(64)->Arg(128)->Arg(256);

void BM_rmsnorm(benchmark::State& state) {
    const int tokens = 256, dim = static_cast<int>(state.range(0));
    Rng rng(2);
    Tensor x({tokens, dim}), gamma({dim});
    rng.fill_normal(x);
    gamma.fill(1.0);
    for (auto _ : state) {
        ad::Var y = ad::rmsnorm(ad::constant(x), ad::constant(gamma), 1e-6);
        benchmark::DoNotOptimize(y.val().data());
    }
    state.SetItemsProcessed(state.iterations() * tokens * dim);
}
BENCHMARK(BM_rmsnorm)->Arg(96)->Arg(768);

void BM_attention_forward(benchmark::State& state) {
    const int tokens = static_cast<int>(state.range(0));
    AttentionConfig cfg;
    cfg.input_dim = 96;
    cfg.num_heads = 4;
    cfg.head_dim = 24;
    cfg.output_dim = 96;
    Rng rng(3);
    ParamStore w;
    w.init_from_specs(attention_param_specs(cfg, "a"), rng);
    Tensor x({tokens, 96});
    rng.fill_normal(x);
    for (auto _ : state) {
        ad::Autograd ctx;
        ad::Var y = attention_forward(ctx, ctx.constant(x), cfg, w, "a");
        benchmark::DoNotOptimize(y.val().data());
    }
}
BENCHMARK(BM_attention_forward)->Arg(64)->Arg(256);

void BM_block_forward_backward(benchmark::State& state) {
    BlockConfig blk;
    blk.hidden_dim = 96;
    blk.num_heads = 4;
    Rng rng(4);
    ParamStore w;
    w.init_from_specs(block_param_specs(blk, "b"), rng);
    const auto pos = grid_positions(8, 8);
    Tensor x({64, 96});
    rng.fill_normal(x);
    for (auto _ : state) {
        ad::Autograd ctx;
        ad::Var y = transformer_block(ctx, ctx.constant(x), blk, w, "b", &pos);
        ad::Var loss = ad::mean_all(ad::mul(y, y));
        ad::backward(loss);
        GradMap grads;
        ctx.collect(grads);
        benchmark::DoNotOptimize(grads.size());
    }
}
BENCHMARK(BM_block_forward_backward);

} // namespace
