#include <benchmark/benchmark.h>

#include "fae/autoencoder.hpp"
#include "fae/flow.hpp"
#include "fae/teacher.hpp"

using namespace fae;

namespace {

void BM_teacher_embed(benchmark::State& state) {
    TeacherSpec spec;
    spec.grid_h = 8;
    spec.grid_w = 8;
    spec.feature_dim = 96;
    spec.num_heads = 4;
    spec.seed = 7;
    Teacher teacher(spec);
    Tensor img = synth_image(1, 42, 32);
    teacher.embed(img);  // materialize frozen weights outside the loop
    for (auto _ : state) {
        EmbeddingGrid g = teacher.embed(img);
        benchmark::DoNotOptimize(g.values.data());
    }
}
BENCHMARK(BM_teacher_embed);

void BM_fae_train_step(benchmark::State& state) {
    FaebFile data;
    data.grid_h = 8;
    data.grid_w = 8;
    data.feature_dim = 96;
    Rng rng(5);
    for (int i = 0; i < 16; ++i) {
        EmbeddingGrid g;
        g.image_id = "r" + std::to_string(i);
        g.values = Tensor({64, 96});
        rng.fill_normal(g.values);
        data.records.push_back(g);
    }
    EncoderConfig enc;
    enc.input_dim = 96;
    enc.num_heads = 4;
    enc.head_dim = 32;
    enc.latent_dim = 16;
    FeatureDecoderConfig dec;
    dec.depth = 4;
    dec.hidden_dim = 96;
    dec.num_heads = 4;
    dec.latent_dim = 16;
    TrainConfig tcfg;
    tcfg.steps = 1;
    tcfg.batch_size = static_cast<int>(state.range(0));
    tcfg.workers = static_cast<int>(state.range(1));
    tcfg.seed = 11;
    tcfg.optim.total_steps = 1;
    for (auto _ : state) {
        ParamStore params;
        AdamW opt(&params, tcfg.optim);
        FaeTrainResult res = train_fae(data, enc, dec, {1e-4}, tcfg, params, opt);
        benchmark::DoNotOptimize(res.final_total);
    }
}
BENCHMARK(BM_fae_train_step)->Args({8, 1})->Args({8, 4})->Args({16, 4})
    ->Unit(benchmark::kMillisecond);

void BM_sampler_step(benchmark::State& state) {
    VelocityModel oracle = [](const Tensor& x, real t, int) {
        const real denom = (1.0 - t) * (1.0 - t) + t * t;
        Tensor v(x.shape);
        for (std::size_t i = 0; i < x.numel(); ++i)
            v.v[i] = (2.0 * t - 1.0) * x.v[i] / denom;
        return v;
    };
    SampleConfig cfg;
    cfg.steps = 250;
    cfg.seed = 3;
    for (auto _ : state) {
        auto out = sample_sde(oracle, {1, 16}, 8, {}, cfg);
        benchmark::DoNotOptimize(out.size());
    }
    state.SetItemsProcessed(state.iterations() * 8 * 250);
}
BENCHMARK(BM_sampler_step)->Unit(benchmark::kMillisecond);

} // namespace

BENCHMARK_MAIN();
