#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>

#include "fae/gradcheck.hpp"
#include "fae/pixel.hpp"

using namespace fae;

namespace {

PixelDecoderConfig tiny_pixel(int image = 8, int patch = 2, int feature_dim = 12) {
    PixelDecoderConfig cfg;
    cfg.depth = 1;
    cfg.hidden_dim = 32;
    cfg.num_heads = 2;
    cfg.image_size = image;
    cfg.patch_size = patch;
    cfg.feature_dim = feature_dim;
    cfg.grid_h = image / patch;
    cfg.grid_w = image / patch;
    return cfg;
}

} // namespace

TEST_CASE("inject_noise identities") {
    Rng rng(1);
    Tensor x({4, 6});
    rng.fill_normal(x);
    SUBCASE("zero sigma is rejected, tiny sigma is near-identity") {
        NoiseStageConfig cfg;
        cfg.sigma_base = 0.0;
        CHECK_THROWS_AS(inject_noise(x, cfg, 1.0, Rng(2)), Error);
    }
    SUBCASE("same seed twice gives identical noise") {
        NoiseStageConfig cfg;
        cfg.sigma_base = 0.4;
        Tensor a = inject_noise(x, cfg, 1.0, Rng(7));
        Tensor b = inject_noise(x, cfg, 1.0, Rng(7));
        for (std::size_t i = 0; i < a.numel(); ++i) CHECK(a.v[i] == b.v[i]);
    }
    SUBCASE("scaled mode requires both norms") {
        NoiseStageConfig cfg;
        cfg.norm_scale_mode = NormScaleMode::ScaledByMeanNorm;
        cfg.reference_norm = 2.0;
        CHECK_THROWS_AS(inject_noise(x, cfg, 0.0, Rng(3)), Error);
        cfg.reference_norm = 0.0;
        CHECK_THROWS_AS(inject_noise(x, cfg, 1.0, Rng(3)), Error);
    }
    SUBCASE("scaled sigma follows mean_norm / reference_norm") {
        NoiseStageConfig cfg;
        cfg.norm_scale_mode = NormScaleMode::ScaledByMeanNorm;
        cfg.sigma_base = 0.4;
        cfg.reference_norm = 2.0;
        CHECK(cfg.sigma_for(4.0) == doctest::Approx(0.8));
    }
}

TEST_CASE("inject_noise sample std matches sigma within 1 percent") {
    NoiseStageConfig cfg;
    cfg.sigma_base = 0.4;
    Tensor x({100, 100}, 0.0);
    Rng rng(11);
    real sum = 0.0, sum2 = 0.0;
    const int reps = 100;  // 1e6 draws total
    for (int r = 0; r < reps; ++r) {
        Tensor noisy = inject_noise(x, cfg, 1.0, rng.stream(r));
        for (real v : noisy.v) {
            sum += v;
            sum2 += v * v;
        }
    }
    const real n = static_cast<real>(x.numel()) * reps;
    const real mean = sum / n;
    const real stddev = std::sqrt(sum2 / n - mean * mean);
    CHECK(std::abs(stddev - 0.4) / 0.4 < 0.01);
    // Mean-unbiasedness: |mean| <= 3 sigma / sqrt(N).
    CHECK(std::abs(mean) <= 3.0 * 0.4 / std::sqrt(n));
}

TEST_CASE("decode_pixels zero final projection gives a zero image") {
    Rng rng(13);
    PixelDecoderConfig cfg = tiny_pixel();
    ParamStore w;
    w.init_from_specs(pixel_decoder_param_specs(cfg), rng);
    w.get("pix.out.w").value.fill(0.0);
    w.get("pix.out.b").value.fill(0.0);
    Tensor feat({16, 12});
    rng.fill_normal(feat);
    Tensor img = decode_pixels(feat, cfg, w);
    CHECK(img.shape == Shape{3, 8, 8});
    for (real v : img.v) CHECK(v == 0.0);
}

TEST_CASE("decode_pixels output shape contract") {
    Rng rng(17);
    PixelDecoderConfig cfg = tiny_pixel(12, 3);
    ParamStore w;
    w.init_from_specs(pixel_decoder_param_specs(cfg), rng);
    Tensor feat({16, 12});
    rng.fill_normal(feat);
    Tensor img = decode_pixels(feat, cfg, w);
    CHECK(img.shape == Shape{3, 12, 12});
}

TEST_CASE("pixel decoder config validation") {
    PixelDecoderConfig cfg = tiny_pixel();
    cfg.patch_size = 3;  // 4*3 != 8
    CHECK_THROWS_AS(cfg.validate(), Error);
}

TEST_CASE("pixel decoder gradient check on a tiny config") {
    Rng rng(19);
    PixelDecoderConfig cfg = tiny_pixel(4, 2, 6);
    cfg.hidden_dim = 32;
    cfg.depth = 1;
    ParamStore w;
    w.init_from_specs(pixel_decoder_param_specs(cfg), rng);
    Tensor feat({4, 6});
    rng.fill_normal(feat);
    Rng frng(20);
    Tensor functional({3, 4, 4});
    frng.fill_normal(functional);
    auto f = [&](ad::Autograd& ctx) {
        ad::Var img = decode_pixels_vars(ctx, ctx.constant(feat), cfg, w);
        return ad::sum_all(ad::mul(img, ctx.constant(functional)));
    };
    auto res = grad_check_params(f, w, 1e-5);
    CHECK(res.max_rel_err <= 1e-4);
}

TEST_CASE("pixel_loss trivial cases") {
    Rng rng(23);
    Tensor target({3, 8, 8});
    rng.fill_uniform(target, 0.0, 1.0);
    ParamStore perc;
    perc.init_from_specs(perceptual_param_specs(), rng);
    perc.freeze();

    SUBCASE("identical prediction with gan off gives zero loss") {
        PixelLossWeights w;
        w.lambda_gan = 0.0;
        PixelLossParts parts = pixel_loss(target, target, w, nullptr, &perc);
        CHECK(parts.rec == 0.0);
        CHECK(parts.perc == 0.0);
        CHECK(parts.total == 0.0);
    }
    SUBCASE("pure reconstruction matches a scalar-loop L1") {
        PixelLossWeights w;
        w.lambda_gan = 0.0;
        w.lambda_perc = 0.0;
        w.lambda_rec = 0.7;
        Tensor pred({3, 8, 8});
        rng.fill_uniform(pred, 0.0, 1.0);
        PixelLossParts parts = pixel_loss(pred, target, w, nullptr, nullptr);
        real l1 = 0.0;
        for (std::size_t i = 0; i < pred.numel(); ++i) l1 += std::abs(pred.v[i] - target.v[i]);
        l1 /= pred.numel();
        CHECK(std::abs(parts.rec - l1) < 1e-12);
        CHECK(std::abs(parts.total - 0.7 * l1) < 1e-12);
    }
    SUBCASE("all-zero weights rejected") {
        PixelLossWeights w;
        w.lambda_gan = w.lambda_perc = w.lambda_rec = 0.0;
        CHECK_THROWS_AS(pixel_loss(target, target, w, nullptr, nullptr), Error);
    }
}

TEST_CASE("pixel loss gradient check including perceptual and gan paths") {
    Rng rng(29);
    PixelDecoderConfig cfg = tiny_pixel(8, 2, 6);
    cfg.depth = 1;
    cfg.hidden_dim = 16;
    ParamStore gen, disc, perc;
    gen.init_from_specs(pixel_decoder_param_specs(cfg), rng);
    // Generic-scale point: the 0.02 init leaves some gradients near the fd
    // noise floor.
    for (std::size_t i = 0; i < gen.size(); ++i) {
        Rng pr = rng.stream(gen.at(i).name);
        for (real& v : gen.at(i).value.v) v += 0.2 * pr.normal();
    }
    disc.init_from_specs(discriminator_param_specs(), rng.stream("d"));
    perc.init_from_specs(perceptual_param_specs(), rng.stream("p"));
    perc.freeze();
    disc.freeze();  // generator loss path: critic weights held fixed
    Tensor feat({16, 6});
    rng.fill_normal(feat);
    Tensor target({3, 8, 8});
    rng.fill_uniform(target, 0.0, 1.0);
    PixelLossWeights w;
    auto f = [&](ad::Autograd& ctx) {
        ad::Var pred = decode_pixels_vars(ctx, ctx.constant(feat), cfg, gen);
        return pixel_loss_vars(ctx, pred, ctx.constant(target), w, &disc, &perc, nullptr,
                               nullptr, nullptr);
    };
    auto res = grad_check_params(f, gen, 1e-5);
    CHECK(res.max_rel_err <= 1e-4);
}

TEST_CASE("discriminator hinge loss gradient check") {
    // The point must keep both hinge branches partially (and unequally)
    // active; with every hinge active the output-bias gradient cancels
    // exactly and the fd comparison is vacuous.
    Rng rng(202);
    ParamStore disc;
    disc.init_from_specs(discriminator_param_specs(), rng);
    Tensor real_img({3, 16, 16}), fake_img({3, 16, 16});
    rng.fill_uniform(real_img, 0.0, 1.0);
    rng.fill_uniform(fake_img, 0.0, 1.0);
    {
        ad::Autograd ctx;
        ad::Var dr = discriminator_vars(ctx, ctx.constant(real_img), disc);
        ad::Var df = discriminator_vars(ctx, ctx.constant(fake_img), disc);
        int act_r = 0, act_f = 0;
        for (real v : dr.val().v)
            if (1.0 - v > 0) ++act_r;
        for (real v : df.val().v)
            if (1.0 + v > 0) ++act_f;
        REQUIRE(act_r > 0);
        REQUIRE(act_f > 0);
        REQUIRE(act_r != act_f);
    }
    auto f = [&](ad::Autograd& ctx) {
        return discriminator_loss_vars(ctx, ctx.constant(real_img), ctx.constant(fake_img),
                                       disc);
    };
    auto res = grad_check_params(f, disc, 1e-5);
    CHECK(res.max_rel_err <= 1e-4);
}

TEST_CASE("stage training keeps generator and critic parameter sets disjoint") {
    Rng rng(37);
    const int image = 8, patch = 2, fd = 6;
    PixelDecoderConfig cfg = tiny_pixel(image, patch, fd);
    DatasetManifest m = make_manifest(2, 6, "train", 5, image);
    std::vector<Tensor> feats(m.records.size());
    for (auto& f : feats) {
        f = Tensor({16, fd});
        rng.fill_normal(f);
    }
    TrainConfig tcfg;
    tcfg.steps = 4;
    tcfg.batch_size = 3;
    tcfg.seed = 41;
    tcfg.optim.lr = 1e-3;
    tcfg.optim.schedule = LrSchedule::Constant;
    tcfg.optim.warmup_steps = 0;

    ParamStore gen, disc, perc;
    AdamW gen_opt(&gen, tcfg.optim), disc_opt(&disc, tcfg.optim);
    PixelLossWeights w;
    w.lambda_gan = 0.1;
    w.lambda_perc = 0.2;

    NoiseStageConfig noise;
    noise.sigma_base = 0.2;
    train_pixel(feats, m, cfg, w, &noise, 1.0, /*gan_start_step=*/0, tcfg, gen, gen_opt, disc,
                disc_opt, perc);
    // All three stores materialized with disjoint name prefixes.
    CHECK(gen.size() > 0);
    CHECK(disc.size() > 0);
    CHECK(perc.size() > 0);
    for (std::size_t i = 0; i < gen.size(); ++i)
        CHECK(gen.at(i).name.rfind("pix.", 0) == 0);
    for (std::size_t i = 0; i < disc.size(); ++i) {
        CHECK(disc.at(i).name.rfind("disc.", 0) == 0);
        CHECK(disc.at(i).requires_grad);
    }
    for (std::size_t i = 0; i < perc.size(); ++i) CHECK_FALSE(perc.at(i).requires_grad);
}

TEST_CASE("generator updates never move critic weights and vice versa") {
    Rng rng(43);
    const int image = 8, patch = 2, fd = 6;
    PixelDecoderConfig cfg = tiny_pixel(image, patch, fd);
    DatasetManifest m = make_manifest(2, 4, "train", 6, image);
    std::vector<Tensor> feats(m.records.size());
    for (auto& f : feats) {
        f = Tensor({16, fd});
        rng.fill_normal(f);
    }
    TrainConfig tcfg;
    tcfg.steps = 1;
    tcfg.batch_size = 2;
    tcfg.seed = 47;
    tcfg.optim.schedule = LrSchedule::Constant;
    tcfg.optim.warmup_steps = 0;

    PixelLossWeights w;
    w.lambda_gan = 0.1;
    w.lambda_perc = 0.0;

    // gan never activates (start step beyond budget): critic must stay put.
    ParamStore gen, disc, perc;
    AdamW gen_opt(&gen, tcfg.optim), disc_opt(&disc, tcfg.optim);
    disc.init_from_specs(discriminator_param_specs(), Rng(3).stream("d"));
    const Tensor disc_before = disc.pack();
    train_pixel(feats, m, cfg, w, nullptr, 1.0, /*gan_start_step=*/100, tcfg, gen, gen_opt,
                disc, disc_opt, perc);
    const Tensor disc_after = disc.pack();
    for (std::size_t i = 0; i < disc_before.numel(); ++i)
        CHECK(disc_before.v[i] == disc_after.v[i]);
}

TEST_CASE("stage 2 with zero steps keeps the stage 1 weights") {
    Rng rng(53);
    const int image = 8, patch = 2, fd = 6;
    PixelDecoderConfig cfg = tiny_pixel(image, patch, fd);
    DatasetManifest m = make_manifest(2, 4, "train", 9, image);
    std::vector<Tensor> feats(m.records.size());
    for (auto& f : feats) {
        f = Tensor({16, fd});
        rng.fill_normal(f);
    }
    TrainConfig tcfg;
    tcfg.steps = 3;
    tcfg.batch_size = 2;
    tcfg.seed = 59;
    tcfg.optim.schedule = LrSchedule::Constant;

    PixelLossWeights w;
    w.lambda_gan = 0.0;
    w.lambda_perc = 0.0;

    ParamStore gen, disc, perc;
    AdamW gen_opt(&gen, tcfg.optim), disc_opt(&disc, tcfg.optim);
    NoiseStageConfig noise;
    noise.sigma_base = 0.1;
    train_pixel(feats, m, cfg, w, &noise, 1.0, 0, tcfg, gen, gen_opt, disc, disc_opt, perc);
    const Tensor stage1 = gen.pack();

    TrainConfig zero = tcfg;
    zero.steps = 0;
    AdamW opt2(&gen, zero.optim);
    train_pixel(feats, m, cfg, w, nullptr, 1.0, 0, zero, gen, opt2, disc, disc_opt, perc);
    const Tensor stage2 = gen.pack();
    for (std::size_t i = 0; i < stage1.numel(); ++i) CHECK(stage1.v[i] == stage2.v[i]);
}

TEST_CASE("stage 1 memorizes a 10-image dataset without gan") {
    Rng rng(61);
    const int image = 8, patch = 4, fd = 8;
    PixelDecoderConfig cfg;
    cfg.depth = 2;
    cfg.hidden_dim = 48;
    cfg.num_heads = 2;
    cfg.image_size = image;
    cfg.patch_size = patch;
    cfg.feature_dim = fd;
    cfg.grid_h = 2;
    cfg.grid_w = 2;
    DatasetManifest m = make_manifest(2, 10, "train", 15, image);
    // Distinct per-record features give the decoder an input to key on.
    std::vector<Tensor> feats(m.records.size());
    for (std::size_t i = 0; i < feats.size(); ++i) {
        feats[i] = Tensor({4, fd});
        Rng fr(100 + i);
        fr.fill_normal(feats[i]);
    }
    TrainConfig tcfg;
    tcfg.steps = 500;
    tcfg.batch_size = 10;
    tcfg.seed = 63;
    tcfg.optim.lr = 2e-3;
    tcfg.optim.schedule = LrSchedule::Cosine;
    tcfg.optim.warmup_steps = 20;
    tcfg.optim.total_steps = tcfg.steps;

    PixelLossWeights w;
    w.lambda_gan = 0.0;
    w.lambda_perc = 0.0;

    ParamStore gen, disc, perc;
    AdamW gen_opt(&gen, tcfg.optim), disc_opt(&disc, tcfg.optim);
    NoiseStageConfig noise;
    noise.sigma_base = 0.05;
    PixelTrainResult res = train_pixel(feats, m, cfg, w, &noise, 1.0, 0, tcfg, gen, gen_opt,
                                       disc, disc_opt, perc);
    CHECK(res.final_rec < 0.05);
}
