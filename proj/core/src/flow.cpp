#include "fae/flow.hpp"

#include <algorithm>
#include <cmath>

namespace fae {

Interpolated interpolate(const Tensor& x0, const Tensor& eps, real t) {
    require_same_shape(x0, eps, "interpolate");
    if (t < 0.0 || t > 1.0)
        throw usage_error("interpolate: t must lie in [0,1], got " + format_real(t));
    Interpolated out;
    out.x_t = Tensor(x0.shape);
    out.v_target = Tensor(x0.shape);
    const real a = 1.0 - t;
    for (std::size_t i = 0; i < x0.numel(); ++i) {
        out.x_t.v[i] = a * x0.v[i] + t * eps.v[i];
        out.v_target.v[i] = eps.v[i] - x0.v[i];
    }
    return out;
}

VelocityEstimates velocity_to_estimates(const Tensor& v, const Tensor& x_t, real t) {
    require_same_shape(v, x_t, "velocity_to_estimates");
    if (t <= 0.0 || t > 1.0)
        throw sampler_error("velocity_to_estimates: score undefined at t = " + format_real(t));
    VelocityEstimates out;
    out.x0_hat = Tensor(v.shape);
    out.eps_hat = Tensor(v.shape);
    out.score = Tensor(v.shape);
    const real inv_t = 1.0 / t;
    for (std::size_t i = 0; i < v.numel(); ++i) {
        out.x0_hat.v[i] = x_t.v[i] - t * v.v[i];
        out.eps_hat.v[i] = x_t.v[i] + (1.0 - t) * v.v[i];
        out.score.v[i] = -out.eps_hat.v[i] * inv_t;
    }
    return out;
}

void ShiftSpec::validate() const {
    if (s <= 0.0 || s > 4.0)
        throw config_error("shift: s must lie in (0, 4], got " + format_real(s));
}

real shift_time(real t, const ShiftSpec& spec) {
    spec.validate();
    if (spec.s == 1.0) return t;
    return spec.s * t / (1.0 + (spec.s - 1.0) * t);
}

void GuidanceSchedule::validate() const {
    for (const auto& seg : segments) {
        if (!(seg.t_low >= 0.0 && seg.t_low < seg.t_high && seg.t_high <= 1.0))
            throw config_error("guidance: segment [" + format_real(seg.t_low) + "," +
                               format_real(seg.t_high) + "] invalid");
    }
    for (std::size_t i = 0; i < segments.size(); ++i)
        for (std::size_t j = i + 1; j < segments.size(); ++j) {
            const auto& a = segments[i];
            const auto& b = segments[j];
            if (a.t_low < b.t_high && b.t_low < a.t_high)
                throw config_error("guidance: overlapping segments");
        }
}

real GuidanceSchedule::scale_at(real t) const {
    for (const auto& seg : segments)
        if (t >= seg.t_low && t <= seg.t_high) return seg.scale;
    return default_scale;
}

bool GuidanceSchedule::all_unit() const {
    if (default_scale != 1.0) return false;
    for (const auto& seg : segments)
        if (seg.scale != 1.0) return false;
    return true;
}

Tensor apply_cfg(const Tensor& v_cond, const Tensor& v_uncond, const GuidanceSchedule& sched,
                 real t) {
    require_same_shape(v_cond, v_uncond, "apply_cfg");
    const real g = sched.scale_at(t);
    if (g == 1.0) return v_cond;
    if (g == 0.0) return v_uncond;
    Tensor out(v_cond.shape);
    for (std::size_t i = 0; i < out.numel(); ++i)
        out.v[i] = v_uncond.v[i] + g * (v_cond.v[i] - v_uncond.v[i]);
    return out;
}

// ---- generative model ----

void GenModelConfig::validate() const {
    if (depth < 1) throw config_error("gen model: depth must be >= 1");
    if (hidden_dim % num_heads != 0)
        throw config_error("gen model: hidden_dim not divisible by num_heads");
    if (use_rope && (hidden_dim / num_heads) % 4 != 0)
        throw config_error("gen model: rope requires head_dim divisible by 4");
    if (cond_dropout_prob < 0.0 || cond_dropout_prob >= 1.0)
        throw config_error("gen model: cond_dropout_prob must lie in [0,1)");
    if (class_count < 1) throw config_error("gen model: class_count must be >= 1");
    if (time_embed_dim % 2 != 0) throw config_error("gen model: time_embed_dim must be even");
}

std::vector<ParamSpec> gen_model_param_specs(const GenModelConfig& cfg) {
    cfg.validate();
    std::vector<ParamSpec> specs;
    specs.push_back({"ldm.patch.w", {cfg.latent_dim, cfg.hidden_dim}, Init::Normal02});
    specs.push_back({"ldm.patch.b", {cfg.hidden_dim}, Init::Zero});
    specs.push_back({"ldm.temb.w1", {cfg.time_embed_dim, cfg.hidden_dim}, Init::Normal02});
    specs.push_back({"ldm.temb.b1", {cfg.hidden_dim}, Init::Zero});
    specs.push_back({"ldm.temb.w2", {cfg.hidden_dim, cfg.hidden_dim}, Init::Normal02});
    specs.push_back({"ldm.temb.b2", {cfg.hidden_dim}, Init::Zero});
    specs.push_back({"ldm.label.table", {cfg.class_count + 1, cfg.hidden_dim}, Init::Normal02});

    AttentionConfig att;
    att.input_dim = cfg.hidden_dim;
    att.output_dim = cfg.hidden_dim;
    att.num_heads = cfg.num_heads;
    att.head_dim = cfg.hidden_dim / cfg.num_heads;
    att.use_rope = cfg.use_rope;
    for (int i = 0; i < cfg.depth; ++i) {
        const std::string p = "ldm.block" + std::to_string(i);
        auto a = attention_param_specs(att, p + ".attn");
        specs.insert(specs.end(), a.begin(), a.end());
        if (cfg.use_rmsnorm) {
            specs.push_back({p + ".norm1.g", {cfg.hidden_dim}, Init::One});
            specs.push_back({p + ".norm2.g", {cfg.hidden_dim}, Init::One});
        }
        if (cfg.use_swiglu) {
            const int hw = swiglu_hidden_width(cfg.hidden_dim, cfg.mlp_ratio);
            specs.push_back({p + ".mlp.w_gate", {cfg.hidden_dim, hw}, Init::Normal02});
            specs.push_back({p + ".mlp.w_up", {cfg.hidden_dim, hw}, Init::Normal02});
            specs.push_back({p + ".mlp.w_down", {hw, cfg.hidden_dim}, Init::Normal02});
        } else {
            const int hw = static_cast<int>(std::llround(cfg.hidden_dim * cfg.mlp_ratio));
            specs.push_back({p + ".mlp.w1", {cfg.hidden_dim, hw}, Init::Normal02});
            specs.push_back({p + ".mlp.b1", {hw}, Init::Zero});
            specs.push_back({p + ".mlp.w2", {hw, cfg.hidden_dim}, Init::Normal02});
            specs.push_back({p + ".mlp.b2", {cfg.hidden_dim}, Init::Zero});
        }
        // Zero-initialized modulation keeps every block an identity map at
        // initialization.
        specs.push_back({p + ".ada.w", {cfg.hidden_dim, 6 * cfg.hidden_dim}, Init::Zero});
        specs.push_back({p + ".ada.b", {6 * cfg.hidden_dim}, Init::Zero});
    }
    if (cfg.use_rmsnorm)
        specs.push_back({"ldm.final.norm.g", {cfg.hidden_dim}, Init::One});
    specs.push_back({"ldm.final.ada.w", {cfg.hidden_dim, 2 * cfg.hidden_dim}, Init::Zero});
    specs.push_back({"ldm.final.ada.b", {2 * cfg.hidden_dim}, Init::Zero});
    specs.push_back({"ldm.final.out.w", {cfg.hidden_dim, cfg.latent_dim}, Init::Zero});
    specs.push_back({"ldm.final.out.b", {cfg.latent_dim}, Init::Zero});
    return specs;
}

Tensor sincos_pos_embed(int grid_h, int grid_w, int dim) {
    if (dim % 4 != 0) throw config_error("sincos_pos_embed: dim must be divisible by 4");
    const int half = dim / 2;     // per axis
    const int quarter = half / 2; // frequency count per axis
    Tensor out({grid_h * grid_w, dim});
    for (int r = 0; r < grid_h; ++r) {
        for (int c = 0; c < grid_w; ++c) {
            real* row = out.data() + static_cast<std::size_t>(r * grid_w + c) * dim;
            for (int i = 0; i < quarter; ++i) {
                const real omega = std::pow(10000.0, -static_cast<real>(i) / quarter);
                row[2 * i] = std::sin(r * omega);
                row[2 * i + 1] = std::cos(r * omega);
                row[half + 2 * i] = std::sin(c * omega);
                row[half + 2 * i + 1] = std::cos(c * omega);
            }
        }
    }
    return out;
}

namespace {

Tensor timestep_frequencies(real t, int dim) {
    Tensor emb({1, dim});
    const int half = dim / 2;
    const real scaled = t * 1000.0;
    for (int i = 0; i < half; ++i) {
        const real freq = std::exp(-std::log(10000.0) * static_cast<real>(i) / half);
        emb.v[i] = std::cos(scaled * freq);
        emb.v[half + i] = std::sin(scaled * freq);
    }
    return emb;
}

struct Mod6 {
    ad::Var shift1, scale1, gate1, shift2, scale2, gate2;
};

Mod6 modulation(ad::Autograd& ctx, const ad::Var& c, ParamStore& w, const std::string& prefix,
                int hidden) {
    ad::Var m = ad::linear(c, ctx.param(w.get(prefix + ".w")), ctx.param(w.get(prefix + ".b")));
    auto part = [&](int i) {
        return ad::reshape(ad::slice_cols(m, i * hidden, (i + 1) * hidden), {hidden});
    };
    Mod6 out;
    out.shift1 = part(0);
    out.scale1 = part(1);
    out.gate1 = part(2);
    out.shift2 = part(3);
    out.scale2 = part(4);
    out.gate2 = part(5);
    return out;
}

} // namespace

ad::Var gen_model_vars(ad::Autograd& ctx, const ad::Var& x_t, real t, int label,
                       const GenModelConfig& cfg, ParamStore& weights) {
    cfg.validate();
    if (x_t.rows() != cfg.tokens() || x_t.cols() != cfg.latent_dim)
        throw shape_error("gen_model: latent " + shape_str(x_t.shape()) + " vs grid " +
                          std::to_string(cfg.grid_h) + "x" + std::to_string(cfg.grid_w) +
                          " dim " + std::to_string(cfg.latent_dim));
    if (label == -1) label = cfg.null_label();
    if (label < 0 || label > cfg.class_count)
        throw usage_error("gen_model: label " + std::to_string(label) + " out of range");

    ad::Var h = ad::linear(x_t, ctx.param(weights.get("ldm.patch.w")),
                           ctx.param(weights.get("ldm.patch.b")));
    if (!cfg.use_rope)
        h = ad::add(h, ctx.constant(sincos_pos_embed(cfg.grid_h, cfg.grid_w, cfg.hidden_dim)));

    ad::Var temb = ad::linear(ctx.constant(timestep_frequencies(t, cfg.time_embed_dim)),
                              ctx.param(weights.get("ldm.temb.w1")),
                              ctx.param(weights.get("ldm.temb.b1")));
    temb = ad::linear(ad::silu(temb), ctx.param(weights.get("ldm.temb.w2")),
                      ctx.param(weights.get("ldm.temb.b2")));
    ad::Var yemb = ad::embed_row(ctx.param(weights.get("ldm.label.table")), label);
    ad::Var cond = ad::silu(ad::add(temb, yemb));

    const auto positions = grid_positions(cfg.grid_h, cfg.grid_w);
    AttentionConfig att;
    att.input_dim = cfg.hidden_dim;
    att.output_dim = cfg.hidden_dim;
    att.num_heads = cfg.num_heads;
    att.head_dim = cfg.hidden_dim / cfg.num_heads;
    att.use_rope = cfg.use_rope;

    auto norm = [&](const ad::Var& in, const std::string& name) {
        if (cfg.use_rmsnorm)
            return ad::rmsnorm(in, ctx.param(weights.get(name + ".g")), cfg.rms_eps);
        return ad::layernorm_noaffine(in, 1e-6);
    };

    for (int i = 0; i < cfg.depth; ++i) {
        const std::string p = "ldm.block" + std::to_string(i);
        Mod6 mod = modulation(ctx, cond, weights, p + ".ada", cfg.hidden_dim);
        ad::Var a = ad::row_affine(norm(h, p + ".norm1"), mod.scale1, mod.shift1);
        a = attention_forward(ctx, a, att, weights, p + ".attn",
                              cfg.use_rope ? &positions : nullptr);
        h = ad::add(h, ad::row_gate(a, mod.gate1));

        ad::Var m = ad::row_affine(norm(h, p + ".norm2"), mod.scale2, mod.shift2);
        if (cfg.use_swiglu) {
            m = swiglu_forward(m, ctx.param(weights.get(p + ".mlp.w_gate")),
                               ctx.param(weights.get(p + ".mlp.w_up")),
                               ctx.param(weights.get(p + ".mlp.w_down")));
        } else {
            m = ad::linear(m, ctx.param(weights.get(p + ".mlp.w1")),
                           ctx.param(weights.get(p + ".mlp.b1")));
            m = ad::linear(ad::gelu(m), ctx.param(weights.get(p + ".mlp.w2")),
                           ctx.param(weights.get(p + ".mlp.b2")));
        }
        h = ad::add(h, ad::row_gate(m, mod.gate2));
    }

    ad::Var fm = ad::linear(cond, ctx.param(weights.get("ldm.final.ada.w")),
                            ctx.param(weights.get("ldm.final.ada.b")));
    ad::Var fshift = ad::reshape(ad::slice_cols(fm, 0, cfg.hidden_dim), {cfg.hidden_dim});
    ad::Var fscale =
        ad::reshape(ad::slice_cols(fm, cfg.hidden_dim, 2 * cfg.hidden_dim), {cfg.hidden_dim});
    ad::Var out = ad::row_affine(norm(h, "ldm.final.norm"), fscale, fshift);
    return ad::linear(out, ctx.param(weights.get("ldm.final.out.w")),
                      ctx.param(weights.get("ldm.final.out.b")));
}

Tensor gen_model_velocity(const Tensor& x_t, real t, int label, const GenModelConfig& cfg,
                          ParamStore& weights) {
    ad::Autograd ctx;
    return gen_model_vars(ctx, ad::constant(x_t), t, label, cfg, weights).val();
}

ad::Var fm_loss_record_vars(ad::Autograd& ctx, const Tensor& z0, real t, int label,
                            const Tensor& eps, const GenModelConfig& cfg, ParamStore& weights) {
    Interpolated it = interpolate(z0, eps, t);
    ad::Var v = gen_model_vars(ctx, ctx.constant(it.x_t), t, label, cfg, weights);
    ad::Var diff = ad::sub(v, ctx.constant(it.v_target));
    return ad::sum_all(ad::mul(diff, diff));
}

LdmTrainResult train_ldm(const FaebFile& latents, const GenModelConfig& cfg,
                         const ShiftSpec& shift, const TrainConfig& tcfg, ParamStore& params,
                         AdamW& opt, const std::string& loss_csv) {
    if (latents.records.empty()) throw usage_error("train_ldm: empty latent manifest");
    cfg.validate();
    shift.validate();
    if (latents.feature_dim != cfg.latent_dim ||
        latents.grid_h * latents.grid_w != cfg.tokens())
        throw config_error("train_ldm: latent manifest dims do not match model config");

    Rng root(tcfg.seed);
    if (params.size() == 0)
        params.init_from_specs(gen_model_param_specs(cfg), root.stream("ldm/init"));

    // Per-channel standardization stats from the training latents.
    Tensor mean({cfg.latent_dim});
    Tensor std_dev({cfg.latent_dim});
    {
        std::size_t count = 0;
        for (const auto& rec : latents.records) {
            for (int tk = 0; tk < rec.values.rows(); ++tk)
                for (int d = 0; d < cfg.latent_dim; ++d) mean.v[d] += rec.values.at(tk, d);
            count += rec.values.rows();
        }
        for (int d = 0; d < cfg.latent_dim; ++d) mean.v[d] /= static_cast<real>(count);
        for (const auto& rec : latents.records)
            for (int tk = 0; tk < rec.values.rows(); ++tk)
                for (int d = 0; d < cfg.latent_dim; ++d) {
                    const real dv = rec.values.at(tk, d) - mean.v[d];
                    std_dev.v[d] += dv * dv;
                }
        for (int d = 0; d < cfg.latent_dim; ++d)
            std_dev.v[d] = std::sqrt(std_dev.v[d] / static_cast<real>(count) + 1e-12);
    }
    if (params.has("latent_stats.mean")) {
        params.get("latent_stats.mean").value = mean;
        params.get("latent_stats.std").value = std_dev;
    } else {
        params.add("latent_stats.mean", mean, /*requires_grad=*/false);
        params.add("latent_stats.std", std_dev, /*requires_grad=*/false);
    }

    std::vector<Tensor> z(latents.records.size());
    std::vector<int> labels(latents.records.size(), cfg.null_label());
    for (std::size_t i = 0; i < latents.records.size(); ++i) {
        z[i] = latents.records[i].values;
        for (int tk = 0; tk < z[i].rows(); ++tk)
            for (int d = 0; d < cfg.latent_dim; ++d)
                z[i].at(tk, d) = (z[i].at(tk, d) - mean.v[d]) / std_dev.v[d];
        if (latents.has_labels && latents.records[i].label)
            labels[i] = std::min(*latents.records[i].label, cfg.class_count);
    }

    Rng batch_rng = root.stream("ldm/batch");
    Rng draw_rng = root.stream("ldm/draws");

    std::unique_ptr<CsvWriter> csv;
    if (!loss_csv.empty()) csv = std::make_unique<CsvWriter>(loss_csv, "step,loss");

    LdmTrainResult res;
    const std::size_t n = z.size();
    for (int step = 0; step < tcfg.steps; ++step) {
        std::vector<std::size_t> batch(tcfg.batch_size);
        std::vector<real> ts(tcfg.batch_size);
        std::vector<int> ys(tcfg.batch_size);
        std::vector<Tensor> eps(tcfg.batch_size);
        for (int i = 0; i < tcfg.batch_size; ++i) {
            batch[i] = batch_rng.uniform_index(n);
            ts[i] = shift_time(draw_rng.uniform(), shift);
            ys[i] = labels[batch[i]];
            if (cfg.cond_dropout_prob > 0.0 && draw_rng.uniform() < cfg.cond_dropout_prob)
                ys[i] = cfg.null_label();
            eps[i] = Tensor({cfg.tokens(), cfg.latent_dim});
            draw_rng.fill_normal(eps[i]);
        }

        auto per_record = [&](ad::Autograd& ctx, std::size_t r,
                              std::vector<real>& comps) -> ad::Var {
            ad::Var loss =
                fm_loss_record_vars(ctx, z[batch[r]], ts[r], ys[r], eps[r], cfg, params);
            comps[0] += loss.scalar();
            return loss;
        };
        BatchResult br =
            batch_backward(tcfg.batch_size, tcfg.workers, 1, per_record, 1.0 / tcfg.batch_size);
        const real loss = br.components[0];
        if (!std::isfinite(loss) || loss > tcfg.divergence_threshold)
            throw training_error("train_ldm: diverged at step " + std::to_string(step) +
                                 " (loss=" + format_real(loss) + ")");
        opt.step(br.grads);
        res.final_loss = loss;
        if (csv) csv->row(std::to_string(step) + "," + format_real(loss));
    }
    if (csv) csv->close();
    return res;
}

// ---- samplers ----

namespace {

void check_finite(const Tensor& x, const char* which, int step) {
    for (real v : x.v)
        if (!std::isfinite(v))
            throw sampler_error(std::string(which) + ": non-finite state at step " +
                                std::to_string(step));
}

std::vector<real> shifted_grid(int steps, const ShiftSpec& shift) {
    std::vector<real> t(steps + 1);
    for (int i = 0; i <= steps; ++i)
        t[i] = shift_time(1.0 - static_cast<real>(i) / steps, shift);
    t[0] = 1.0;
    t[steps] = 0.0;
    return t;
}

Tensor guided_velocity(const VelocityModel& model, const Tensor& x, real t, int label,
                       const SampleConfig& cfg) {
    Tensor v_cond = model(x, t, label);
    if (!cfg.use_guidance) return v_cond;
    Tensor v_uncond = model(x, t, -1);
    return apply_cfg(v_cond, v_uncond, cfg.guidance, t);
}

} // namespace

std::vector<Tensor> sample_ode(const VelocityModel& model, const Shape& latent_shape, int n,
                               const std::vector<int>& labels, const SampleConfig& cfg) {
    if (cfg.steps < 1) throw usage_error("sample_ode: steps must be >= 1");
    cfg.guidance.validate();
    const auto grid = shifted_grid(cfg.steps, cfg.shift);
    Rng root(cfg.seed);
    std::vector<Tensor> out(n);
    for (int chain = 0; chain < n; ++chain) {
        Tensor x(latent_shape);
        root.stream("sample/init").stream(chain).fill_normal(x);
        const int label = labels.empty() ? -1 : labels[chain];
        for (int i = 0; i < cfg.steps; ++i) {
            const real t = grid[i];
            const real dt = grid[i + 1] - grid[i];
            Tensor v = guided_velocity(model, x, t, label, cfg);
            for (std::size_t j = 0; j < x.numel(); ++j) x.v[j] += dt * v.v[j];
            check_finite(x, "sample_ode", i);
        }
        out[chain] = std::move(x);
    }
    return out;
}

std::vector<Tensor> sample_sde(const VelocityModel& model, const Shape& latent_shape, int n,
                               const std::vector<int>& labels, const SampleConfig& cfg) {
    if (cfg.steps < 1) throw usage_error("sample_sde: steps must be >= 1");
    cfg.guidance.validate();
    const InterpolantSpec interp;
    const auto grid = shifted_grid(cfg.steps, cfg.shift);
    Rng root(cfg.seed);
    std::vector<Tensor> out(n);
    for (int chain = 0; chain < n; ++chain) {
        Tensor x(latent_shape);
        root.stream("sample/init").stream(chain).fill_normal(x);
        Rng noise = root.stream("sample/noise").stream(chain);
        const int label = labels.empty() ? -1 : labels[chain];
        for (int i = 0; i < cfg.steps; ++i) {
            const real t = grid[i];
            const real dt = grid[i + 1] - grid[i];
            Tensor v = guided_velocity(model, x, t, label, cfg);
            const real w = cfg.diffusion_scale * interp.diffusion_w(t);
            const bool last = i + 1 == cfg.steps;
            if (w > 0.0 && !last) {
                VelocityEstimates est = velocity_to_estimates(v, x, t);
                const real noise_scale = std::sqrt(w) * std::sqrt(-dt);
                for (std::size_t j = 0; j < x.numel(); ++j)
                    x.v[j] += dt * (v.v[j] - 0.5 * w * est.score.v[j]) +
                              noise_scale * noise.normal();
            } else {
                // Deterministic limit; also guards the score singularity as
                // t -> 0 on the final interval.
                for (std::size_t j = 0; j < x.numel(); ++j) x.v[j] += dt * v.v[j];
            }
            check_finite(x, "sample_sde", i);
        }
        out[chain] = std::move(x);
    }
    return out;
}

VelocityModel make_model_velocity(const GenModelConfig& cfg, ParamStore& weights) {
    ParamStore* w = &weights;
    return [cfg, w](const Tensor& x, real t, int label) {
        return gen_model_velocity(x, t, label, cfg, *w);
    };
}

} // namespace fae
