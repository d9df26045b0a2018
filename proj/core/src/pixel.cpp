#include "fae/pixel.hpp"

#include <cmath>

#include "fae/conv.hpp"

namespace fae {

void PixelDecoderConfig::validate() const {
    if (depth < 0) throw config_error("pixel decoder: depth must be >= 0");
    if (grid_h * patch_size != image_size || grid_w * patch_size != image_size)
        throw config_error("pixel decoder: grid " + std::to_string(grid_h) + "x" +
                           std::to_string(grid_w) + " * patch " + std::to_string(patch_size) +
                           " != image_size " + std::to_string(image_size));
    if (depth > 0) block().validate();
}

BlockConfig PixelDecoderConfig::block() const {
    BlockConfig b;
    b.hidden_dim = hidden_dim;
    b.num_heads = num_heads;
    b.mlp_ratio = mlp_ratio;
    b.use_swiglu = use_swiglu;
    b.use_rmsnorm = use_rmsnorm;
    b.use_rope = use_rope;
    b.rms_eps = rms_eps;
    return b;
}

real NoiseStageConfig::sigma_for(real teacher_mean_norm) const {
    if (sigma_base <= 0.0) throw config_error("noise stage: sigma_base must be > 0");
    if (norm_scale_mode == NormScaleMode::Fixed) return sigma_base;
    if (teacher_mean_norm <= 0.0)
        throw config_error("noise stage: scaled mode requires teacher mean_norm");
    if (reference_norm <= 0.0)
        throw config_error("noise stage: scaled mode requires reference_norm");
    return sigma_base * teacher_mean_norm / reference_norm;
}

void PixelLossWeights::validate() const {
    if (lambda_gan < 0.0 || lambda_perc < 0.0 || lambda_rec < 0.0)
        throw config_error("pixel loss: weights must be >= 0");
    if (lambda_gan == 0.0 && lambda_perc == 0.0 && lambda_rec == 0.0)
        throw config_error("pixel loss: at least one weight must be > 0");
}

std::vector<ParamSpec> pixel_decoder_param_specs(const PixelDecoderConfig& cfg) {
    cfg.validate();
    std::vector<ParamSpec> specs;
    specs.push_back({"pix.in.w", {cfg.feature_dim, cfg.hidden_dim}, Init::Normal02});
    specs.push_back({"pix.in.b", {cfg.hidden_dim}, Init::Zero});
    for (int i = 0; i < cfg.depth; ++i) {
        auto b = block_param_specs(cfg.block(), "pix.block" + std::to_string(i));
        specs.insert(specs.end(), b.begin(), b.end());
    }
    const int out_dim = 3 * cfg.patch_size * cfg.patch_size;
    specs.push_back({"pix.out.w", {cfg.hidden_dim, out_dim}, Init::Normal02});
    specs.push_back({"pix.out.b", {out_dim}, Init::Zero});
    return specs;
}

std::vector<ParamSpec> discriminator_param_specs() {
    // 4-layer strided patch critic ending in a logit map.
    std::vector<ParamSpec> specs;
    specs.push_back({"disc.conv0.w", {16, 3, 3, 3}, Init::ScaledXavier});
    specs.push_back({"disc.conv0.b", {16}, Init::Zero});
    specs.push_back({"disc.conv1.w", {32, 16, 3, 3}, Init::ScaledXavier});
    specs.push_back({"disc.conv1.b", {32}, Init::Zero});
    specs.push_back({"disc.conv2.w", {64, 32, 3, 3}, Init::ScaledXavier});
    specs.push_back({"disc.conv2.b", {64}, Init::Zero});
    specs.push_back({"disc.conv3.w", {1, 64, 3, 3}, Init::ScaledXavier});
    specs.push_back({"disc.conv3.b", {1}, Init::Zero});
    return specs;
}

std::vector<ParamSpec> perceptual_param_specs() {
    std::vector<ParamSpec> specs;
    specs.push_back({"perc.conv0.w", {8, 3, 3, 3}, Init::ScaledXavier});
    specs.push_back({"perc.conv0.b", {8}, Init::Zero});
    specs.push_back({"perc.conv1.w", {16, 8, 3, 3}, Init::ScaledXavier});
    specs.push_back({"perc.conv1.b", {16}, Init::Zero});
    specs.push_back({"perc.conv2.w", {32, 16, 3, 3}, Init::ScaledXavier});
    specs.push_back({"perc.conv2.b", {32}, Init::Zero});
    specs.push_back({"perc.conv3.w", {32, 32, 3, 3}, Init::ScaledXavier});
    specs.push_back({"perc.conv3.b", {32}, Init::Zero});
    return specs;
}

Tensor inject_noise(const Tensor& x, const NoiseStageConfig& cfg, real teacher_mean_norm,
                    Rng rng) {
    const real sigma = cfg.sigma_for(teacher_mean_norm);
    Tensor out = x;
    for (real& v : out.v) v += sigma * rng.normal();
    return out;
}

ad::Var decode_pixels_vars(ad::Autograd& ctx, const ad::Var& features,
                           const PixelDecoderConfig& cfg, ParamStore& weights) {
    cfg.validate();
    if (features.rows() != cfg.grid_h * cfg.grid_w || features.cols() != cfg.feature_dim)
        throw shape_error("decode_pixels: features " + shape_str(features.shape()) +
                          " vs grid " + std::to_string(cfg.grid_h) + "x" +
                          std::to_string(cfg.grid_w) + " dim " +
                          std::to_string(cfg.feature_dim));
    const std::vector<GridPos> positions = grid_positions(cfg.grid_h, cfg.grid_w);
    ad::Var h = ad::linear(features, ctx.param(weights.get("pix.in.w")),
                           ctx.param(weights.get("pix.in.b")));
    for (int i = 0; i < cfg.depth; ++i)
        h = transformer_block(ctx, h, cfg.block(), weights, "pix.block" + std::to_string(i),
                              &positions);
    ad::Var tokens = ad::linear(h, ctx.param(weights.get("pix.out.w")),
                                ctx.param(weights.get("pix.out.b")));
    return ad::unpatchify(tokens, 3, cfg.grid_h, cfg.grid_w, cfg.patch_size);
}

Tensor decode_pixels(const Tensor& features, const PixelDecoderConfig& cfg,
                     ParamStore& weights) {
    ad::Autograd ctx;
    return decode_pixels_vars(ctx, ad::constant(features), cfg, weights).val();
}

ad::Var discriminator_vars(ad::Autograd& ctx, const ad::Var& image, ParamStore& weights) {
    ad::Var h = image;
    for (int i = 0; i < 4; ++i) {
        const std::string p = "disc.conv" + std::to_string(i);
        const int stride = i < 3 ? 2 : 1;
        h = ad::conv2d(h, ctx.param(weights.get(p + ".w")), ctx.param(weights.get(p + ".b")),
                       stride, 1);
        if (i < 3) h = ad::leaky_relu(h, 0.2);
    }
    return h;
}

std::vector<ad::Var> perceptual_stack(ad::Autograd& ctx, const ad::Var& image,
                                      ParamStore& weights) {
    std::vector<ad::Var> feats;
    ad::Var h = image;
    for (int i = 0; i < 4; ++i) {
        const std::string p = "perc.conv" + std::to_string(i);
        h = ad::conv2d(h, ctx.param(weights.get(p + ".w")), ctx.param(weights.get(p + ".b")),
                       2, 1);
        h = ad::leaky_relu(h, 0.2);
        feats.push_back(h);
    }
    return feats;
}

ad::Var pixel_loss_vars(ad::Autograd& ctx, const ad::Var& pred, const ad::Var& target,
                        const PixelLossWeights& w, ParamStore* disc, ParamStore* perc,
                        ad::Var* rec_out, ad::Var* perc_out, ad::Var* gan_out) {
    w.validate();
    require_same_shape(pred.val(), target.val(), "pixel_loss");
    if (!pred.val().all_finite() || !target.val().all_finite())
        throw numeric_error("pixel_loss: non-finite inputs");

    ad::Var rec = ad::mean_all(ad::abs_val(ad::sub(pred, target)));
    ad::Var total = ad::scale(rec, w.lambda_rec);

    ad::Var perc_term = ad::constant(Tensor::scalar(0.0));
    if (w.lambda_perc > 0.0) {
        if (!perc) throw config_error("pixel_loss: lambda_perc > 0 but no perceptual net");
        auto fa = perceptual_stack(ctx, pred, *perc);
        auto fb = perceptual_stack(ctx, target, *perc);
        for (std::size_t i = 0; i < fa.size(); ++i) {
            ad::Var d = ad::sub(fa[i], fb[i]);
            ad::Var term = ad::mean_all(ad::mul(d, d));
            perc_term = i == 0 ? term : ad::add(perc_term, term);
        }
        total = ad::add(total, ad::scale(perc_term, w.lambda_perc));
    }

    ad::Var gan_term = ad::constant(Tensor::scalar(0.0));
    if (w.lambda_gan > 0.0) {
        if (!disc) throw config_error("pixel_loss: lambda_gan > 0 but no discriminator");
        gan_term = ad::scale(ad::mean_all(discriminator_vars(ctx, pred, *disc)), -1.0);
        total = ad::add(total, ad::scale(gan_term, w.lambda_gan));
    }

    if (rec_out) *rec_out = rec;
    if (perc_out) *perc_out = perc_term;
    if (gan_out) *gan_out = gan_term;
    return total;
}

PixelLossParts pixel_loss(const Tensor& pred, const Tensor& target, const PixelLossWeights& w,
                          ParamStore* disc, ParamStore* perc) {
    ad::Autograd ctx;
    ad::Var rec, pt, gt;
    ad::Var total = pixel_loss_vars(ctx, ad::constant(pred), ad::constant(target), w, disc,
                                    perc, &rec, &pt, &gt);
    PixelLossParts parts;
    parts.total = total.scalar();
    parts.rec = rec.scalar();
    parts.perc = pt.scalar();
    parts.gan = gt.scalar();
    if (!std::isfinite(parts.total)) throw numeric_error("pixel_loss: non-finite total");
    return parts;
}

ad::Var discriminator_loss_vars(ad::Autograd& ctx, const ad::Var& real_img,
                                const ad::Var& fake_img, ParamStore& disc) {
    ad::Var d_real = discriminator_vars(ctx, real_img, disc);
    ad::Var d_fake = discriminator_vars(ctx, fake_img, disc);
    ad::Var ones_r = ad::constant(Tensor(d_real.shape(), 1.0));
    ad::Var ones_f = ad::constant(Tensor(d_fake.shape(), 1.0));
    ad::Var loss_real = ad::mean_all(ad::leaky_relu(ad::sub(ones_r, d_real), 0.0));
    ad::Var loss_fake = ad::mean_all(ad::leaky_relu(ad::add(ones_f, d_fake), 0.0));
    return ad::add(loss_real, loss_fake);
}

PixelTrainResult train_pixel(const std::vector<Tensor>& features,
                             const DatasetManifest& manifest, const PixelDecoderConfig& cfg,
                             const PixelLossWeights& w, const NoiseStageConfig* noise,
                             real teacher_mean_norm, int gan_start_step,
                             const TrainConfig& tcfg, ParamStore& gen_params, AdamW& gen_opt,
                             ParamStore& disc_params, AdamW& disc_opt, ParamStore& perc_params,
                             const std::string& loss_csv) {
    if (features.empty()) throw usage_error("train_pixel: empty dataset");
    if (features.size() != manifest.records.size())
        throw config_error("train_pixel: features/manifest size mismatch");
    w.validate();
    cfg.validate();

    Rng root(tcfg.seed);
    if (gen_params.size() == 0)
        gen_params.init_from_specs(pixel_decoder_param_specs(cfg), root.stream("pixel/init"));
    if (w.lambda_gan > 0.0 && disc_params.size() == 0)
        disc_params.init_from_specs(discriminator_param_specs(), root.stream("pixel/disc"));
    if (w.lambda_perc > 0.0 && perc_params.size() == 0) {
        perc_params.init_from_specs(perceptual_param_specs(), root.stream("pixel/perc"));
        perc_params.freeze();
    }

    // Targets are procedural and deterministic; render once.
    std::vector<Tensor> targets(manifest.records.size());
    for (std::size_t i = 0; i < manifest.records.size(); ++i)
        targets[i] = image_for_record(manifest.records[i], manifest.image_size);

    Rng batch_rng = root.stream("pixel/batch");
    Rng noise_rng = root.stream("pixel/noise");

    std::unique_ptr<CsvWriter> csv;
    if (!loss_csv.empty())
        csv = std::make_unique<CsvWriter>(loss_csv, "step,rec,perc,gan,total,d_loss");

    PixelTrainResult res;
    const std::size_t n = features.size();
    for (int step = 0; step < tcfg.steps; ++step) {
        const bool gan_active = w.lambda_gan > 0.0 && step >= gan_start_step;
        PixelLossWeights active = w;
        if (!gan_active) active.lambda_gan = 0.0;

        std::vector<std::size_t> batch(tcfg.batch_size);
        for (auto& b : batch) b = batch_rng.uniform_index(n);
        std::vector<Tensor> inputs(tcfg.batch_size);
        for (int i = 0; i < tcfg.batch_size; ++i) {
            inputs[i] = noise
                            ? inject_noise(features[batch[i]], *noise, teacher_mean_norm,
                                           noise_rng.stream(static_cast<std::uint64_t>(step) *
                                                                65521ULL +
                                                            i))
                            : features[batch[i]];
        }

        // Generator step. The critic store is frozen here so its parameters
        // never accumulate generator-loss gradients.
        const bool had_disc = disc_params.size() > 0;
        if (had_disc) disc_params.freeze();
        auto per_record = [&](ad::Autograd& ctx, std::size_t r,
                              std::vector<real>& comps) -> ad::Var {
            ad::Var feat = ctx.constant(inputs[r]);
            ad::Var pred = decode_pixels_vars(ctx, feat, cfg, gen_params);
            ad::Var target = ctx.constant(targets[batch[r]]);
            ad::Var rec, pt, gt;
            ad::Var total = pixel_loss_vars(ctx, pred, target, active,
                                            gan_active ? &disc_params : nullptr,
                                            active.lambda_perc > 0 ? &perc_params : nullptr,
                                            &rec, &pt, &gt);
            comps[0] += rec.scalar();
            comps[1] += pt.scalar();
            comps[2] += gt.scalar();
            comps[3] += total.scalar();
            return total;
        };
        BatchResult br = batch_backward(tcfg.batch_size, tcfg.workers, 4, per_record,
                                        1.0 / tcfg.batch_size);
        if (had_disc)
            for (std::size_t i = 0; i < disc_params.size(); ++i)
                disc_params.at(i).requires_grad = true;

        const real total = br.components[3];
        if (!std::isfinite(total) || total > tcfg.divergence_threshold)
            throw training_error("train_pixel: diverged at step " + std::to_string(step));
        gen_opt.step(br.grads);

        // Critic step on fresh generator outputs; no gradient reaches G.
        real d_loss = 0.0;
        if (gan_active) {
            std::vector<Tensor> fakes(tcfg.batch_size);
            for (int i = 0; i < tcfg.batch_size; ++i)
                fakes[i] = decode_pixels(inputs[i], cfg, gen_params);
            auto per_disc = [&](ad::Autograd& ctx, std::size_t r,
                                std::vector<real>& comps) -> ad::Var {
                ad::Var loss = discriminator_loss_vars(ctx, ctx.constant(targets[batch[r]]),
                                                       ctx.constant(fakes[r]), disc_params);
                comps[0] += loss.scalar();
                return loss;
            };
            BatchResult dr = batch_backward(tcfg.batch_size, tcfg.workers, 1, per_disc,
                                            1.0 / tcfg.batch_size);
            d_loss = dr.components[0];
            disc_opt.step(dr.grads);
        }

        res.final_rec = br.components[0];
        res.final_perc = br.components[1];
        res.final_gan = br.components[2];
        res.final_total = total;
        if (csv)
            csv->row(std::to_string(step) + "," + format_real(br.components[0]) + "," +
                     format_real(br.components[1]) + "," + format_real(br.components[2]) + "," +
                     format_real(total) + "," + format_real(d_loss));
    }
    if (csv) csv->close();
    return res;
}

} // namespace fae
