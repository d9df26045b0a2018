#include "fae/autoencoder.hpp"

#include <cmath>
#include <sstream>

namespace fae {

EncoderVariant encoder_variant_from_string(const std::string& kind) {
    if (kind == "single_attention") return EncoderVariant::SingleAttention;
    if (kind == "linear") return EncoderVariant::Linear;
    if (kind == "transformer_4" || kind == "transformer_6") return EncoderVariant::Transformer;
    throw usage_error("unknown encoder variant: " + kind);
}

std::string to_string(EncoderVariant v) {
    switch (v) {
        case EncoderVariant::SingleAttention: return "single_attention";
        case EncoderVariant::Linear: return "linear";
        case EncoderVariant::Transformer: return "transformer";
    }
    return "?";
}

void EncoderConfig::validate() const {
    if (latent_dim < 1) throw config_error("encoder: latent_dim must be >= 1");
    if (input_dim < 1) throw config_error("encoder: input_dim must be >= 1");
    if (variant == EncoderVariant::Transformer) {
        if (depth < 1) throw config_error("encoder: transformer depth must be >= 1");
        if (input_dim % num_heads != 0)
            throw config_error("encoder: input_dim not divisible by num_heads");
    }
}

EncoderConfig encoder_variant(const std::string& kind, const EncoderConfig& base) {
    EncoderConfig cfg = base;
    cfg.variant = encoder_variant_from_string(kind);
    if (cfg.variant == EncoderVariant::Transformer) {
        cfg.depth = kind == "transformer_4" ? 4 : 6;
        if (cfg.input_dim % cfg.num_heads != 0 || (cfg.input_dim / cfg.num_heads) % 4 != 0) {
            // Blocks need hidden/heads divisible; fall back to 4 heads.
            cfg.num_heads = 4;
        }
    } else {
        cfg.depth = cfg.variant == EncoderVariant::SingleAttention ? 1 : 0;
    }
    cfg.validate();
    return cfg;
}

void FeatureDecoderConfig::validate() const {
    if (depth < 0) throw config_error("feature decoder: depth must be >= 0");
    if (hidden_dim < 1) throw config_error("feature decoder: hidden_dim must be >= 1");
    if (latent_dim < 1) throw config_error("feature decoder: latent_dim must be >= 1");
    if (depth > 0) block().validate();
}

BlockConfig FeatureDecoderConfig::block() const {
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

std::vector<ParamSpec> encoder_param_specs(const EncoderConfig& cfg) {
    cfg.validate();
    std::vector<ParamSpec> specs;
    switch (cfg.variant) {
        case EncoderVariant::SingleAttention: {
            specs.push_back({"enc.norm.g", {cfg.input_dim}, Init::One});
            AttentionConfig att;
            att.input_dim = cfg.input_dim;
            att.output_dim = cfg.input_dim;
            att.num_heads = cfg.num_heads;
            att.head_dim = cfg.head_dim;
            att.merged_qkv = true;
            auto a = attention_param_specs(att, "enc.attn");
            specs.insert(specs.end(), a.begin(), a.end());
            break;
        }
        case EncoderVariant::Linear:
            break;
        case EncoderVariant::Transformer: {
            // The encoder sees unordered patch tokens; blocks stay
            // position-free like the single-attention variant.
            BlockConfig blk;
            blk.hidden_dim = cfg.input_dim;
            blk.num_heads = cfg.num_heads;
            blk.use_rope = false;
            for (int i = 0; i < cfg.depth; ++i) {
                auto b = block_param_specs(blk, "enc.block" + std::to_string(i));
                specs.insert(specs.end(), b.begin(), b.end());
            }
            break;
        }
    }
    specs.push_back({"enc.head.w", {cfg.input_dim, cfg.output_dim()}, Init::Normal02});
    specs.push_back({"enc.head.b", {cfg.output_dim()}, Init::Zero});
    return specs;
}

std::vector<ParamSpec> feature_decoder_param_specs(const FeatureDecoderConfig& cfg) {
    cfg.validate();
    std::vector<ParamSpec> specs;
    specs.push_back({"dec.in.w", {cfg.latent_dim, cfg.hidden_dim}, Init::Normal02});
    specs.push_back({"dec.in.b", {cfg.hidden_dim}, Init::Zero});
    for (int i = 0; i < cfg.depth; ++i) {
        auto b = block_param_specs(cfg.block(), "dec.block" + std::to_string(i));
        specs.insert(specs.end(), b.begin(), b.end());
    }
    specs.push_back({"dec.out.w", {cfg.hidden_dim, cfg.hidden_dim}, Init::Normal02});
    specs.push_back({"dec.out.b", {cfg.hidden_dim}, Init::Zero});
    return specs;
}

PosteriorVars encode_vars(ad::Autograd& ctx, const ad::Var& x, const EncoderConfig& cfg,
                          ParamStore& weights, Tensor* attn_probs) {
    cfg.validate();
    if (x.cols() != cfg.input_dim)
        throw shape_error("encode: feature dim " + std::to_string(x.cols()) + " vs input_dim " +
                          std::to_string(cfg.input_dim));
    ad::Var h = x;
    switch (cfg.variant) {
        case EncoderVariant::SingleAttention: {
            AttentionConfig att;
            att.input_dim = cfg.input_dim;
            att.output_dim = cfg.input_dim;
            att.num_heads = cfg.num_heads;
            att.head_dim = cfg.head_dim;
            att.merged_qkv = true;
            ad::Var n = ad::rmsnorm(h, ctx.param(weights.get("enc.norm.g")), 1e-6);
            h = ad::add(h, attention_forward(ctx, n, att, weights, "enc.attn", nullptr,
                                             attn_probs));
            break;
        }
        case EncoderVariant::Linear:
            break;
        case EncoderVariant::Transformer: {
            BlockConfig blk;
            blk.hidden_dim = cfg.input_dim;
            blk.num_heads = cfg.num_heads;
            blk.use_rope = false;
            for (int i = 0; i < cfg.depth; ++i)
                h = transformer_block(ctx, h, blk, weights, "enc.block" + std::to_string(i),
                                      nullptr);
            break;
        }
    }
    ad::Var out = ad::linear(h, ctx.param(weights.get("enc.head.w")),
                             ctx.param(weights.get("enc.head.b")));
    PosteriorVars post;
    post.mean = ad::slice_cols(out, 0, cfg.latent_dim);
    post.logvar = ad::clamp(ad::slice_cols(out, cfg.latent_dim, 2 * cfg.latent_dim),
                            kLogvarMin, kLogvarMax);
    return post;
}

LatentPosterior encode(const Tensor& x, const EncoderConfig& cfg, ParamStore& weights) {
    ad::Autograd ctx;
    PosteriorVars p = encode_vars(ctx, ad::constant(x), cfg, weights);
    return LatentPosterior{p.mean.val(), p.logvar.val()};
}

LatentCode reparameterize(const LatentPosterior& post, const Tensor& noise) {
    require_same_shape(post.mean, noise, "reparameterize");
    LatentCode z;
    z.values = Tensor(post.mean.shape);
    for (std::size_t i = 0; i < z.values.numel(); ++i)
        z.values.v[i] = post.mean.v[i] + std::exp(0.5 * post.logvar.v[i]) * noise.v[i];
    return z;
}

ad::Var reparameterize_vars(const PosteriorVars& post, const Tensor& noise) {
    ad::Var std_dev = ad::exp_val(ad::scale(post.logvar, 0.5));
    return ad::add(post.mean, ad::mul(std_dev, ad::constant(noise)));
}

ad::Var decode_features_vars(ad::Autograd& ctx, const ad::Var& z,
                             const FeatureDecoderConfig& cfg, ParamStore& weights,
                             const std::vector<GridPos>& positions) {
    cfg.validate();
    if (z.cols() != cfg.latent_dim)
        throw shape_error("decode_features: latent dim " + std::to_string(z.cols()) + " vs " +
                          std::to_string(cfg.latent_dim));
    ad::Var h = ad::linear(z, ctx.param(weights.get("dec.in.w")),
                           ctx.param(weights.get("dec.in.b")));
    for (int i = 0; i < cfg.depth; ++i)
        h = transformer_block(ctx, h, cfg.block(), weights, "dec.block" + std::to_string(i),
                              &positions);
    return ad::linear(h, ctx.param(weights.get("dec.out.w")),
                      ctx.param(weights.get("dec.out.b")));
}

Tensor decode_features(const Tensor& z, const FeatureDecoderConfig& cfg, ParamStore& weights,
                       const std::vector<GridPos>& positions) {
    ad::Autograd ctx;
    return decode_features_vars(ctx, ad::constant(z), cfg, weights, positions).val();
}

VaeLossParts vae_loss(const Tensor& x, const Tensor& x_hat, const LatentPosterior& post,
                      const VaeLossWeights& w) {
    require_same_shape(x, x_hat, "vae_loss");
    if (!x.all_finite() || !x_hat.all_finite() || !post.mean.all_finite() ||
        !post.logvar.all_finite())
        throw numeric_error("vae_loss: non-finite inputs");
    const int n = x.rows();
    VaeLossParts parts;
    for (std::size_t i = 0; i < x.numel(); ++i) {
        const real d = x_hat.v[i] - x.v[i];
        parts.recon += d * d;
    }
    parts.recon /= n;
    for (std::size_t i = 0; i < post.mean.numel(); ++i) {
        const real mu = post.mean.v[i];
        const real lv = post.logvar.v[i];
        parts.kl += 0.5 * (mu * mu + std::exp(lv) - 1.0 - lv);
    }
    parts.kl /= post.mean.rows();
    parts.total = parts.recon + w.beta * parts.kl;
    return parts;
}

ad::Var vae_loss_vars(const ad::Var& x, const ad::Var& x_hat, const PosteriorVars& post,
                      const VaeLossWeights& w, ad::Var* recon_out, ad::Var* kl_out) {
    const real inv_n = 1.0 / static_cast<real>(x.rows());
    ad::Var diff = ad::sub(x_hat, x);
    ad::Var recon = ad::scale(ad::sum_all(ad::mul(diff, diff)), inv_n);

    const real inv_tokens = 1.0 / static_cast<real>(post.mean.rows());
    ad::Var mu2 = ad::mul(post.mean, post.mean);
    ad::Var ev = ad::exp_val(post.logvar);
    ad::Var inner = ad::sub(ad::sub(ad::add(mu2, ev), ad::constant(Tensor(post.mean.shape(), 1.0))),
                            post.logvar);
    ad::Var kl = ad::scale(ad::sum_all(inner), 0.5 * inv_tokens);

    if (recon_out) *recon_out = recon;
    if (kl_out) *kl_out = kl;
    return ad::add(recon, ad::scale(kl, w.beta));
}

FaeTrainResult train_fae(const FaebFile& train, const EncoderConfig& ecfg,
                         const FeatureDecoderConfig& dcfg, const VaeLossWeights& w,
                         const TrainConfig& tcfg, ParamStore& params, AdamW& opt,
                         const std::string& loss_csv) {
    if (train.records.empty()) throw usage_error("train_fae: empty manifest");
    ecfg.validate();
    dcfg.validate();
    if (dcfg.hidden_dim != ecfg.input_dim)
        throw config_error("train_fae: decoder hidden_dim must equal teacher feature dim");

    Rng root(tcfg.seed);
    if (params.size() == 0) {
        params.init_from_specs(encoder_param_specs(ecfg), root.stream("fae/init"));
        params.init_from_specs(feature_decoder_param_specs(dcfg), root.stream("fae/init"));
    }
    const auto positions = grid_positions(train.grid_h, train.grid_w);
    const std::size_t n = train.records.size();
    const int tokens = train.grid_h * train.grid_w;

    Rng batch_rng = root.stream("fae/batch");
    Rng noise_rng = root.stream("fae/noise");

    std::unique_ptr<CsvWriter> csv;
    if (!loss_csv.empty()) csv = std::make_unique<CsvWriter>(loss_csv, "step,recon,kl,total");

    FaeTrainResult res;
    ParamStore last_good;
    for (int step = 0; step < tcfg.steps; ++step) {
        std::vector<std::size_t> batch(tcfg.batch_size);
        for (auto& b : batch) b = batch_rng.uniform_index(n);
        std::vector<Tensor> noise(tcfg.batch_size);
        for (auto& t : noise) {
            t = Tensor({tokens, ecfg.latent_dim});
            noise_rng.fill_normal(t);
        }

        auto per_record = [&](ad::Autograd& ctx, std::size_t r,
                              std::vector<real>& comps) -> ad::Var {
            const Tensor& x = train.records[batch[r]].values;
            ad::Var xv = ctx.constant(x);
            PosteriorVars post = encode_vars(ctx, xv, ecfg, params);
            ad::Var z = reparameterize_vars(post, noise[r]);
            ad::Var x_hat = decode_features_vars(ctx, z, dcfg, params, positions);
            ad::Var recon, kl;
            ad::Var total = vae_loss_vars(xv, x_hat, post, w, &recon, &kl);
            comps[0] += recon.scalar();
            comps[1] += kl.scalar();
            comps[2] += total.scalar();
            return total;
        };

        BatchResult br = batch_backward(tcfg.batch_size, tcfg.workers, 3, per_record,
                                        1.0 / tcfg.batch_size);
        const real total = br.components[2];
        if (!std::isfinite(total) || total > tcfg.divergence_threshold) {
            // Current weights produced the divergent loss; fall back to the
            // last set that evaluated finite.
            if (last_good.size() > 0) params = std::move(last_good);
            throw training_error("train_fae: diverged at step " + std::to_string(step) +
                                 " (total=" + format_real(total) + "); last good weights kept");
        }
        last_good = ParamStore();
        for (std::size_t i = 0; i < params.size(); ++i)
            last_good.add(params.at(i).name, params.at(i).value, params.at(i).requires_grad);
        opt.step(br.grads);
        res.final_recon = br.components[0];
        res.final_kl = br.components[1];
        res.final_total = total;
        if (csv)
            csv->row(std::to_string(step) + "," + format_real(br.components[0]) + "," +
                     format_real(br.components[1]) + "," + format_real(total));
    }
    if (csv) csv->close();

    // Per-channel latent statistics for generator-side standardization.
    {
        Tensor mean({ecfg.latent_dim});
        Tensor var({ecfg.latent_dim});
        std::size_t count = 0;
        for (const auto& rec : train.records) {
            LatentPosterior post = encode(rec.values, ecfg, params);
            for (int t = 0; t < post.mean.rows(); ++t)
                for (int d = 0; d < ecfg.latent_dim; ++d) mean.v[d] += post.mean.at(t, d);
            count += post.mean.rows();
        }
        for (int d = 0; d < ecfg.latent_dim; ++d) mean.v[d] /= static_cast<real>(count);
        for (const auto& rec : train.records) {
            LatentPosterior post = encode(rec.values, ecfg, params);
            for (int t = 0; t < post.mean.rows(); ++t)
                for (int d = 0; d < ecfg.latent_dim; ++d) {
                    const real dv = post.mean.at(t, d) - mean.v[d];
                    var.v[d] += dv * dv;
                }
        }
        Tensor std_dev({ecfg.latent_dim});
        for (int d = 0; d < ecfg.latent_dim; ++d)
            std_dev.v[d] = std::sqrt(var.v[d] / static_cast<real>(count) + 1e-12);
        if (params.has("latent_stats.mean")) {
            params.get("latent_stats.mean").value = mean;
            params.get("latent_stats.std").value = std_dev;
        } else {
            params.add("latent_stats.mean", mean, /*requires_grad=*/false);
            params.add("latent_stats.std", std_dev, /*requires_grad=*/false);
        }
    }
    return res;
}

real eval_fae_cosine(const FaebFile& data, const EncoderConfig& ecfg,
                     const FeatureDecoderConfig& dcfg, ParamStore& params) {
    if (data.records.empty()) throw usage_error("eval_fae_cosine: empty manifest");
    const auto positions = grid_positions(data.grid_h, data.grid_w);
    real sum = 0.0;
    std::size_t count = 0;
    for (const auto& rec : data.records) {
        LatentPosterior post = encode(rec.values, ecfg, params);
        Tensor x_hat = decode_features(post.mean, dcfg, params, positions);
        for (int t = 0; t < rec.values.rows(); ++t) {
            real xx = 0.0, yy = 0.0, xy = 0.0;
            for (int d = 0; d < rec.values.cols(); ++d) {
                const real a = rec.values.at(t, d);
                const real b = x_hat.at(t, d);
                xx += a * a;
                yy += b * b;
                xy += a * b;
            }
            const real denom = std::sqrt(xx * yy);
            sum += denom > 0.0 ? xy / denom : 0.0;
            ++count;
        }
    }
    return sum / static_cast<real>(count);
}

FaebFile encode_latents(const FaebFile& data, const EncoderConfig& ecfg, ParamStore& params,
                        int grid_h, int grid_w) {
    FaebFile out;
    out.grid_h = grid_h;
    out.grid_w = grid_w;
    out.feature_dim = ecfg.latent_dim;
    out.has_labels = data.has_labels;
    out.records.reserve(data.records.size());
    for (const auto& rec : data.records) {
        LatentPosterior post = encode(rec.values, ecfg, params);
        EmbeddingGrid g;
        g.image_id = rec.image_id;
        g.label = rec.label;
        g.values = std::move(post.mean);
        out.records.push_back(std::move(g));
    }
    return out;
}

} // namespace fae
