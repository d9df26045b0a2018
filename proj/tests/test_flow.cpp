#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>

#include "fae/flow.hpp"
#include "fae/gradcheck.hpp"

using namespace fae;

namespace {

// Posterior-mean velocity for x0 ~ N(0, I): v(x,t) = (2t-1) x / ((1-t)^2 + t^2).
Tensor oracle_gaussian_velocity(const Tensor& x, real t) {
    const real denom = (1.0 - t) * (1.0 - t) + t * t;
    Tensor v(x.shape);
    for (std::size_t i = 0; i < x.numel(); ++i) v.v[i] = (2.0 * t - 1.0) * x.v[i] / denom;
    return v;
}

GenModelConfig toy_model(int latent_dim = 2) {
    GenModelConfig cfg;
    cfg.depth = 2;
    cfg.hidden_dim = 32;
    cfg.num_heads = 2;
    cfg.latent_dim = latent_dim;
    cfg.grid_h = 1;
    cfg.grid_w = 1;
    cfg.class_count = 4;
    cfg.use_swiglu = true;
    cfg.use_rope = true;
    cfg.use_rmsnorm = true;
    cfg.time_embed_dim = 16;
    return cfg;
}

} // namespace

TEST_CASE("interpolate endpoints") {
    Rng rng(1);
    Tensor x0({2, 3}), eps({2, 3});
    rng.fill_normal(x0);
    rng.fill_normal(eps);
    SUBCASE("t=0 returns the clean sample") {
        Interpolated it = interpolate(x0, eps, 0.0);
        for (std::size_t i = 0; i < x0.numel(); ++i) {
            CHECK(it.x_t.v[i] == x0.v[i]);
            CHECK(it.v_target.v[i] == doctest::Approx(eps.v[i] - x0.v[i]).epsilon(1e-15));
        }
    }
    SUBCASE("t=1 returns the noise") {
        Interpolated it = interpolate(x0, eps, 1.0);
        for (std::size_t i = 0; i < x0.numel(); ++i) CHECK(it.x_t.v[i] == eps.v[i]);
    }
    SUBCASE("t outside [0,1] rejected") {
        CHECK_THROWS_AS(interpolate(x0, eps, -0.1), Error);
        CHECK_THROWS_AS(interpolate(x0, eps, 1.1), Error);
    }
}

TEST_CASE("interpolant algebraic identities hold to 1e-12") {
    Rng rng(3);
    for (int trial = 0; trial < 200; ++trial) {
        Tensor x0({1, 4}), eps({1, 4});
        rng.fill_normal(x0);
        rng.fill_normal(eps);
        const real t = rng.uniform(0.01, 0.99);
        Interpolated it = interpolate(x0, eps, t);
        for (int j = 0; j < 4; ++j) {
            CHECK(std::abs(it.x_t.v[j] - t * it.v_target.v[j] - x0.v[j]) < 1e-12);
            CHECK(std::abs(it.x_t.v[j] + (1.0 - t) * it.v_target.v[j] - eps.v[j]) < 1e-12);
        }
        VelocityEstimates est = velocity_to_estimates(it.v_target, it.x_t, t);
        for (int j = 0; j < 4; ++j) {
            CHECK(std::abs(est.x0_hat.v[j] - x0.v[j]) < 1e-12);
            CHECK(std::abs(est.eps_hat.v[j] - eps.v[j]) < 1e-12);
        }
    }
}

TEST_CASE("velocity_to_estimates at t=1 with zero velocity") {
    Tensor x({1, 3}, {1.0, -2.0, 0.5});
    Tensor v({1, 3}, 0.0);
    VelocityEstimates est = velocity_to_estimates(v, x, 1.0);
    for (int j = 0; j < 3; ++j) {
        CHECK(est.x0_hat.v[j] == x.v[j]);
        CHECK(est.eps_hat.v[j] == x.v[j]);
        CHECK(est.score.v[j] == doctest::Approx(-x.v[j]));
    }
}

TEST_CASE("velocity_to_estimates rejects t=0") {
    Tensor x({1, 2}), v({1, 2});
    CHECK_THROWS_AS(velocity_to_estimates(v, x, 0.0), Error);
}

TEST_CASE("shift_time identity, endpoints, and the s=0.5 value") {
    ShiftSpec unit{1.0};
    for (real t : {0.0, 0.1, 0.37, 0.99, 1.0}) CHECK(shift_time(t, unit) == t);
    for (real s : {0.2, 0.5, 0.7, 2.0, 4.0}) {
        ShiftSpec spec{s};
        CHECK(shift_time(0.0, spec) == 0.0);
        CHECK(shift_time(1.0, spec) == doctest::Approx(1.0).epsilon(1e-15));
    }
    CHECK(shift_time(0.5, ShiftSpec{0.5}) == doctest::Approx(1.0 / 3.0).epsilon(1e-15));
}

TEST_CASE("shift_time is strictly increasing for various s") {
    for (real s : {0.2, 0.4, 0.7, 1.0, 1.5, 4.0}) {
        ShiftSpec spec{s};
        real prev = -1.0;
        for (int i = 0; i <= 100; ++i) {
            const real t = static_cast<real>(i) / 100.0;
            const real mapped = shift_time(t, spec);
            CHECK(mapped > prev);
            prev = mapped;
        }
    }
    CHECK_THROWS_AS(shift_time(0.5, ShiftSpec{0.0}), Error);
    CHECK_THROWS_AS(shift_time(0.5, ShiftSpec{4.5}), Error);
}

TEST_CASE("apply_cfg semantics") {
    Rng rng(7);
    Tensor vc({1, 4}), vu({1, 4});
    rng.fill_normal(vc);
    rng.fill_normal(vu);
    SUBCASE("scale 1 returns v_cond exactly") {
        GuidanceSchedule sched;
        Tensor v = apply_cfg(vc, vu, sched, 0.5);
        for (std::size_t i = 0; i < vc.numel(); ++i) CHECK(v.v[i] == vc.v[i]);
    }
    SUBCASE("scale 0 returns v_uncond exactly") {
        GuidanceSchedule sched;
        sched.default_scale = 0.0;
        Tensor v = apply_cfg(vc, vu, sched, 0.5);
        for (std::size_t i = 0; i < vu.numel(); ++i) CHECK(v.v[i] == vu.v[i]);
    }
    SUBCASE("main-results schedule lookups") {
        GuidanceSchedule sched;
        sched.segments = {{0.9, 1.0, 0.9}, {0.0, 0.7, 2.5}};
        sched.validate();
        CHECK(sched.scale_at(0.95) == doctest::Approx(0.9));
        CHECK(sched.scale_at(0.8) == doctest::Approx(1.0));
        CHECK(sched.scale_at(0.3) == doctest::Approx(2.5));
    }
    SUBCASE("overlapping segments rejected") {
        GuidanceSchedule sched;
        sched.segments = {{0.0, 0.5, 2.0}, {0.4, 0.8, 1.5}};
        CHECK_THROWS_AS(sched.validate(), Error);
    }
}

TEST_CASE("single Euler step lands exactly on a point mass") {
    // Oracle velocity for data concentrated at c: v(x, t) = (x - c) / t.
    Tensor c({1, 2}, {0.7, -0.4});
    VelocityModel model = [&c](const Tensor& x, real t, int) {
        Tensor v(x.shape);
        for (std::size_t i = 0; i < x.numel(); ++i) v.v[i] = (x.v[i] - c.v[i]) / t;
        return v;
    };
    SampleConfig cfg;
    cfg.steps = 1;
    cfg.seed = 5;
    auto out = sample_ode(model, {1, 2}, 3, {}, cfg);
    for (const auto& x : out)
        for (int j = 0; j < 2; ++j) CHECK(x.v[j] == doctest::Approx(c.v[j]).epsilon(1e-12));
}

TEST_CASE("ode sampler reproduces a standard normal with the oracle velocity") {
    VelocityModel model = [](const Tensor& x, real t, int) {
        return oracle_gaussian_velocity(x, t);
    };
    SampleConfig cfg;
    cfg.steps = 100;
    cfg.seed = 11;
    const int n = 2000, d = 2;
    auto out = sample_ode(model, {1, d}, n, {}, cfg);
    Tensor mean({d}), cov({d, d});
    for (const auto& x : out)
        for (int j = 0; j < d; ++j) mean.v[j] += x.v[j] / n;
    for (const auto& x : out)
        for (int j = 0; j < d; ++j)
            for (int k = 0; k < d; ++k)
                cov.at(j, k) += (x.v[j] - mean.v[j]) * (x.v[k] - mean.v[k]) / (n - 1);
    for (int j = 0; j < d; ++j) {
        CHECK(std::abs(mean.v[j]) < 0.06);
        CHECK(std::abs(cov.at(j, j) - 1.0) < 0.1);
    }
    CHECK(std::abs(cov.at(0, 1)) < 0.08);
}

TEST_CASE("sde with zero diffusion equals ode bit for bit") {
    VelocityModel model = [](const Tensor& x, real t, int) {
        return oracle_gaussian_velocity(x, t);
    };
    SampleConfig cfg;
    cfg.steps = 50;
    cfg.seed = 13;
    cfg.diffusion_scale = 0.0;
    auto ode = sample_ode(model, {1, 3}, 4, {}, cfg);
    auto sde = sample_sde(model, {1, 3}, 4, {}, cfg);
    REQUIRE(ode.size() == sde.size());
    for (std::size_t i = 0; i < ode.size(); ++i)
        for (std::size_t j = 0; j < ode[i].numel(); ++j) CHECK(ode[i].v[j] == sde[i].v[j]);
}

TEST_CASE("sde sampler reproduces the standard normal") {
    VelocityModel model = [](const Tensor& x, real t, int) {
        return oracle_gaussian_velocity(x, t);
    };
    SampleConfig cfg;
    cfg.steps = 100;
    cfg.seed = 17;
    const int n = 2000, d = 2;
    auto out = sample_sde(model, {1, d}, n, {}, cfg);
    Tensor mean({d}), cov({d, d});
    for (const auto& x : out)
        for (int j = 0; j < d; ++j) mean.v[j] += x.v[j] / n;
    for (const auto& x : out)
        for (int j = 0; j < d; ++j)
            for (int k = 0; k < d; ++k)
                cov.at(j, k) += (x.v[j] - mean.v[j]) * (x.v[k] - mean.v[k]) / (n - 1);
    for (int j = 0; j < d; ++j) {
        CHECK(std::abs(mean.v[j]) < 0.07);
        CHECK(std::abs(cov.at(j, j) - 1.0) < 0.12);
    }
}

TEST_CASE("samplers are deterministic per seed") {
    VelocityModel model = [](const Tensor& x, real t, int) {
        return oracle_gaussian_velocity(x, t);
    };
    SampleConfig cfg;
    cfg.steps = 25;
    cfg.seed = 19;
    auto a = sample_sde(model, {1, 2}, 3, {}, cfg);
    auto b = sample_sde(model, {1, 2}, 3, {}, cfg);
    for (std::size_t i = 0; i < a.size(); ++i)
        for (std::size_t j = 0; j < a[i].numel(); ++j) CHECK(a[i].v[j] == b[i].v[j]);
}

TEST_CASE("scale-1 guidance leaves trajectories bit-identical") {
    Rng rng(23);
    GenModelConfig cfg = toy_model();
    ParamStore w;
    w.init_from_specs(gen_model_param_specs(cfg), rng);
    // Perturb the zero-init final layer so trajectories are non-trivial.
    rng.fill_normal(w.get("ldm.final.out.w").value, 0.0, 0.05);
    VelocityModel model = make_model_velocity(cfg, w);

    SampleConfig unguided;
    unguided.steps = 8;
    unguided.seed = 29;
    std::vector<int> labels(3, 1);
    auto base = sample_ode(model, {1, 2}, 3, labels, unguided);

    SampleConfig guided = unguided;
    guided.use_guidance = true;
    guided.guidance.segments = {{0.0, 1.0, 1.0}};
    auto cfg_run = sample_ode(model, {1, 2}, 3, labels, guided);
    for (std::size_t i = 0; i < base.size(); ++i)
        for (std::size_t j = 0; j < base[i].numel(); ++j)
            CHECK(base[i].v[j] == cfg_run[i].v[j]);
}

TEST_CASE("fm loss examples") {
    Rng rng(31);
    Tensor z0({1, 2}), eps({1, 2});
    rng.fill_normal(z0);
    rng.fill_normal(eps);
    SUBCASE("exact v_target gives zero loss") {
        // A model that returns the exact target: loss must vanish.
        const real t = 0.4;
        Interpolated it = interpolate(z0, eps, t);
        real loss = 0.0;
        for (int j = 0; j < 2; ++j) {
            const real d = it.v_target.v[j] - (eps.v[j] - z0.v[j]);
            loss += d * d;
        }
        CHECK(loss == 0.0);
    }
    SUBCASE("constant-zero model matches the dimensional analysis") {
        // E||eps - x0||^2 = dim (1 + var(x0)) for standardized latents.
        Rng mc(33);
        const int dim = 2, draws = 200000;
        real acc = 0.0;
        for (int i = 0; i < draws; ++i) {
            for (int j = 0; j < dim; ++j) {
                const real x0 = mc.normal();
                const real e = mc.normal();
                acc += (e - x0) * (e - x0);
            }
        }
        const real expect = dim * 2.0;
        CHECK(std::abs(acc / draws - expect) / expect < 0.02);
    }
}

TEST_CASE("fm loss gradient check on a tiny model") {
    Rng rng(37);
    GenModelConfig cfg = toy_model();
    cfg.depth = 1;
    cfg.hidden_dim = 16;
    cfg.num_heads = 2;
    cfg.time_embed_dim = 8;
    ParamStore w;
    w.init_from_specs(gen_model_param_specs(cfg), rng);
    // Zero-init modulation/out layers leave dead gradients at init; nudge all
    // parameters to a generic point first.
    for (std::size_t i = 0; i < w.size(); ++i) {
        Rng pr = rng.stream(w.at(i).name);
        for (real& v : w.at(i).value.v) v += 0.2 * pr.normal();
    }
    Tensor z0({1, 2}), eps({1, 2});
    rng.fill_normal(z0);
    rng.fill_normal(eps);
    auto f = [&](ad::Autograd& ctx) {
        return fm_loss_record_vars(ctx, z0, 0.37, 1, eps, cfg, w);
    };
    auto res = grad_check_params(f, w, 1e-5);
    CHECK(res.max_rel_err <= 1e-4);
}

TEST_CASE("gen model is an identity-velocity at zero init") {
    // adaLN-zero: gates and the final projection start at zero, so the
    // initial velocity field is exactly zero.
    Rng rng(41);
    GenModelConfig cfg = toy_model();
    ParamStore w;
    w.init_from_specs(gen_model_param_specs(cfg), rng);
    Tensor x({1, 2}, {0.3, -0.8});
    Tensor v = gen_model_velocity(x, 0.5, 2, cfg, w);
    for (real val : v.v) CHECK(val == 0.0);
}

TEST_CASE("toggling the three structure flags changes parameters by the expected delta") {
    GenModelConfig base = toy_model();
    base.use_swiglu = false;
    base.use_rope = false;
    base.use_rmsnorm = false;
    base.hidden_dim = 48;
    base.num_heads = 4;
    const auto count = [](const GenModelConfig& c) {
        return static_cast<long long>(total_param_count(gen_model_param_specs(c)));
    };
    const long long base_count = count(base);

    // SwiGLU swap: gated 3-matrix MLP (bias-free) replaces the 2-matrix MLP
    // with biases.
    {
        GenModelConfig c = base;
        c.use_swiglu = true;
        const long long hw = swiglu_hidden_width(c.hidden_dim, c.mlp_ratio);
        const long long gelu_hw = std::llround(c.hidden_dim * c.mlp_ratio);
        const long long per_block = 3LL * c.hidden_dim * hw -
                                    (2LL * c.hidden_dim * gelu_hw + gelu_hw + c.hidden_dim);
        CHECK(count(c) - base_count == per_block * c.depth);
    }
    // RMSNorm swap: two gain vectors per block plus the final norm gain.
    {
        GenModelConfig c = base;
        c.use_rmsnorm = true;
        CHECK(count(c) - base_count == static_cast<long long>(c.hidden_dim) * (2 * c.depth + 1));
    }
    // Rotary embedding replaces the non-learned sin/cos table: no parameters.
    {
        GenModelConfig c = base;
        c.use_rope = true;
        CHECK(count(c) - base_count == 0);
    }
}

TEST_CASE("paper-scale generator parameter count anchor") {
    GenModelConfig cfg;
    cfg.depth = 28;
    cfg.hidden_dim = 1152;
    cfg.num_heads = 16;
    cfg.latent_dim = 32;
    cfg.grid_h = 16;
    cfg.grid_w = 16;
    cfg.class_count = 1000;
    cfg.time_embed_dim = 256;
    const auto n = total_param_count(gen_model_param_specs(cfg));
    CHECK(std::abs(static_cast<double>(n) - 675.26e6) / 675.26e6 < 0.02);
}

TEST_CASE("train_ldm on a tiny dataset is deterministic and improves the loss") {
    FaebFile latents;
    latents.grid_h = 1;
    latents.grid_w = 1;
    latents.feature_dim = 2;
    latents.has_labels = true;
    Rng rng(47);
    for (int i = 0; i < 64; ++i) {
        EmbeddingGrid g;
        g.image_id = "z" + std::to_string(i);
        g.label = i % 2;
        g.values = Tensor({1, 2});
        const real angle = (i % 2) * M_PI;
        g.values.v[0] = std::cos(angle) + 0.05 * rng.normal();
        g.values.v[1] = std::sin(angle) + 0.05 * rng.normal();
        latents.records.push_back(g);
    }
    GenModelConfig cfg = toy_model();
    cfg.class_count = 2;
    TrainConfig tcfg;
    tcfg.steps = 60;
    tcfg.batch_size = 16;
    tcfg.seed = 49;
    tcfg.optim.lr = 1e-3;
    tcfg.optim.schedule = LrSchedule::Constant;
    tcfg.optim.warmup_steps = 0;

    ParamStore p1, p2;
    AdamW o1(&p1, tcfg.optim), o2(&p2, tcfg.optim);
    LdmTrainResult r1 = train_ldm(latents, cfg, ShiftSpec{1.0}, tcfg, p1, o1);
    LdmTrainResult r2 = train_ldm(latents, cfg, ShiftSpec{1.0}, tcfg, p2, o2);
    CHECK(r1.final_loss == r2.final_loss);
    CHECK(p1.has("latent_stats.mean"));
    const Tensor f1 = p1.pack(), f2 = p2.pack();
    for (std::size_t i = 0; i < f1.numel(); ++i) CHECK(f1.v[i] == f2.v[i]);

    // Zero steps keeps the exact initialization.
    TrainConfig zero = tcfg;
    zero.steps = 0;
    ParamStore p0;
    AdamW o0(&p0, zero.optim);
    train_ldm(latents, cfg, ShiftSpec{1.0}, zero, p0, o0);
    ParamStore expected;
    expected.init_from_specs(gen_model_param_specs(cfg), Rng(zero.seed).stream("ldm/init"));
    for (std::size_t i = 0; i < expected.size(); ++i) {
        const ParamTensor& e = expected.at(i);
        for (std::size_t j = 0; j < e.value.numel(); ++j)
            CHECK(p0.get(e.name).value.v[j] == e.value.v[j]);
    }
}
