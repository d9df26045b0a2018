// fae: desk-scale feature-autoencoding pipeline.
//
// Subcommands: synth, train-fae, train-pixel1, train-pixel2, train-ldm,
// sample, probe, verify. Every run writes its fully-resolved config next to
// its outputs; all randomness flows from one seed through named substreams.
// Exit codes: 0 ok, 2 config/usage/format error, 3 numeric/training error.

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <string>

#include "CLI11.hpp"

#include "fae/binio.hpp"
#include "fae/checkpoint.hpp"
#include "fae/config.hpp"
#include "fae/image_io.hpp"
#include "fae/metrics.hpp"
#include "fae/verify.hpp"

namespace fs = std::filesystem;
using namespace fae;

namespace {

struct CommonOpts {
    std::string config_path;
    std::string out_dir;
    std::uint64_t seed = 0;
    bool seed_set = false;
    int workers = 0;
    bool force = false;
};

void add_common(CLI::App* cmd, CommonOpts& o, bool needs_out = true) {
    cmd->add_option("--config", o.config_path, "run config file (key = value sections)");
    auto* seed_opt = cmd->add_option("--seed", o.seed, "master seed override");
    cmd->add_option("--workers", o.workers, "worker threads (default from config)");
    if (needs_out)
        cmd->add_option("--out", o.out_dir, "output directory")->required();
    cmd->add_flag("--force", o.force, "overwrite existing outputs");
    cmd->callback([seed_opt, &o] { o.seed_set = seed_opt->count() > 0; });
}

RunConfig resolve_config(const CommonOpts& o) {
    RunConfig cfg = o.config_path.empty() ? RunConfig() : RunConfig::load(o.config_path);
    if (o.seed_set) cfg.seed = o.seed;
    if (o.workers > 0) cfg.workers = o.workers;
    return cfg;
}

void prepare_out(const CommonOpts& o, const RunConfig& cfg) {
    fs::create_directories(o.out_dir);
    write_text_atomic(o.out_dir + "/resolved.cfg", cfg.serialize(), /*force=*/true);
}

class MetricsLogger {
public:
    MetricsLogger(const std::string& out_dir, std::string stage, std::uint64_t seed)
        : path_(out_dir + "/metrics.csv"), stage_(std::move(stage)), seed_(seed),
          start_(std::chrono::steady_clock::now()) {}

    void row(int step, const std::string& metric, real value) {
        const bool fresh = !fs::exists(path_);
        std::FILE* f = std::fopen(path_.c_str(), "ab");
        if (!f) throw io_error("cannot open " + path_);
        if (fresh) std::fputs("stage,step,metric,value,wall_ms,seed\n", f);
        const auto ms = std::chrono::duration_cast<std::chrono::milliseconds>(
                            std::chrono::steady_clock::now() - start_)
                            .count();
        std::fprintf(f, "%s,%d,%s,%s,%lld,%llu\n", stage_.c_str(), step, metric.c_str(),
                     format_real(value).c_str(), static_cast<long long>(ms),
                     static_cast<unsigned long long>(seed_));
        std::fclose(f);
    }

private:
    std::string path_;
    std::string stage_;
    std::uint64_t seed_;
    std::chrono::steady_clock::time_point start_;
};

void require_fresh(const std::string& path, bool force) {
    if (!force && fs::exists(path))
        throw usage_error(path + " exists; pass --force to overwrite");
}

// ---- synth ----

int cmd_synth(const CommonOpts& o) {
    RunConfig cfg = resolve_config(o);
    prepare_out(o, cfg);
    MetricsLogger log(o.out_dir, "synth", cfg.seed);

    Teacher teacher(cfg.teacher_spec());
    DatasetManifest train = make_manifest(cfg.teacher.num_classes, cfg.teacher.train_count,
                                          "train", cfg.seed, cfg.teacher.image_size);
    DatasetManifest val = make_manifest(cfg.teacher.num_classes, cfg.teacher.val_count, "val",
                                        cfg.seed, cfg.teacher.image_size);

    require_fresh(o.out_dir + "/train_embeddings.faeb", o.force);
    require_fresh(o.out_dir + "/val_embeddings.faeb", o.force);

    FaebFile train_emb = embed_manifest(teacher, train, cfg.workers);
    FaebFile val_emb = embed_manifest(teacher, val, cfg.workers);
    const real mean_norm = embedding_norm_stats(train_emb);

    write_manifest(o.out_dir + "/train_manifest.txt", train, /*force=*/true);
    write_manifest(o.out_dir + "/val_manifest.txt", val, /*force=*/true);
    write_faeb(o.out_dir + "/train_embeddings.faeb", train_emb, /*force=*/true);
    write_faeb(o.out_dir + "/val_embeddings.faeb", val_emb, /*force=*/true);
    write_text_atomic(o.out_dir + "/teacher_stats.txt",
                      "mean_norm = " + format_real(mean_norm) + "\n", true);

    log.row(0, "records_train", static_cast<real>(train_emb.records.size()));
    log.row(0, "records_val", static_cast<real>(val_emb.records.size()));
    log.row(0, "mean_norm", mean_norm);
    log_info("synth: wrote " + std::to_string(train_emb.records.size()) + " train + " +
             std::to_string(val_emb.records.size()) + " val grids to " + o.out_dir);
    return 0;
}

real read_mean_norm(const std::string& dataset_dir) {
    const auto bytes = read_file_bytes(dataset_dir + "/teacher_stats.txt");
    const std::string text(bytes.begin(), bytes.end());
    double v = 0;
    if (std::sscanf(text.c_str(), "mean_norm = %lf", &v) != 1)
        throw format_error(dataset_dir + "/teacher_stats.txt: unparseable");
    return v;
}

// ---- train-fae ----

int cmd_train_fae(const CommonOpts& o, const std::string& in_dir) {
    RunConfig cfg = resolve_config(o);
    prepare_out(o, cfg);
    MetricsLogger log(o.out_dir, "fae", cfg.seed);

    FaebFile train = load_faeb(in_dir + "/train_embeddings.faeb");
    FaebFile val = load_faeb(in_dir + "/val_embeddings.faeb");
    if (train.feature_dim != cfg.teacher.feature_dim)
        throw config_error("train-fae: dataset feature_dim " +
                           std::to_string(train.feature_dim) + " vs config " +
                           std::to_string(cfg.teacher.feature_dim));

    const std::string ckpt_path = o.out_dir + "/fae.faec";
    require_fresh(ckpt_path, o.force);
    require_fresh(o.out_dir + "/train_latents.faeb", o.force);

    EncoderConfig enc = cfg.encoder_config();
    FeatureDecoderConfig dec = cfg.feature_decoder_config();
    TrainConfig tcfg = cfg.fae_train_config();
    ParamStore params;
    AdamW opt(&params, tcfg.optim);
    FaeTrainResult res = train_fae(train, enc, dec, {cfg.fae.beta}, tcfg, params, opt,
                                   o.out_dir + "/fae_loss.csv");
    const real cosine_val = eval_fae_cosine(val, enc, dec, params);

    Checkpoint ck = make_checkpoint(cfg.serialize(), params, &opt,
                                    "seed=" + std::to_string(cfg.seed) + " stream=stage/fae");
    save_checkpoint(ckpt_path, ck, /*force=*/true);

    FaebFile latents = encode_latents(train, enc, params, train.grid_h, train.grid_w);
    write_faeb(o.out_dir + "/train_latents.faeb", latents, /*force=*/true);

    log.row(tcfg.steps, "recon", res.final_recon);
    log.row(tcfg.steps, "kl", res.final_kl);
    log.row(tcfg.steps, "total", res.final_total);
    log.row(tcfg.steps, "val_cosine", cosine_val);
    log_info("train-fae: final total " + format_real(res.final_total) + ", held-out cosine " +
             format_real(cosine_val));
    return 0;
}

// ---- pixel stages ----

std::vector<Tensor> teacher_features(const FaebFile& emb) {
    std::vector<Tensor> out(emb.records.size());
    for (std::size_t i = 0; i < emb.records.size(); ++i) out[i] = emb.records[i].values;
    return out;
}

void save_pixel_bundle(const std::string& path, const RunConfig& cfg, const ParamStore& gen,
                       const ParamStore& disc, const ParamStore& perc, const AdamW& gen_opt,
                       const std::string& stream) {
    ParamStore all;
    for (std::size_t i = 0; i < gen.size(); ++i)
        all.add(gen.at(i).name, gen.at(i).value, gen.at(i).requires_grad);
    for (std::size_t i = 0; i < disc.size(); ++i)
        all.add(disc.at(i).name, disc.at(i).value, disc.at(i).requires_grad);
    for (std::size_t i = 0; i < perc.size(); ++i)
        all.add(perc.at(i).name, perc.at(i).value, false);
    Checkpoint ck = make_checkpoint(cfg.serialize(), all, &gen_opt,
                                    "seed=" + std::to_string(cfg.seed) + " stream=" + stream);
    save_checkpoint(path, ck, /*force=*/true);
}

void split_pixel_bundle(const Checkpoint& ck, ParamStore& gen, ParamStore& disc,
                        ParamStore& perc) {
    for (std::size_t i = 0; i < ck.params.size(); ++i) {
        const ParamTensor& p = ck.params.at(i);
        if (p.name.rfind("pix.", 0) == 0) gen.add(p.name, p.value, p.requires_grad);
        else if (p.name.rfind("disc.", 0) == 0) disc.add(p.name, p.value, p.requires_grad);
        else if (p.name.rfind("perc.", 0) == 0) perc.add(p.name, p.value, false);
    }
}

int cmd_train_pixel1(const CommonOpts& o, const std::string& in_dir) {
    RunConfig cfg = resolve_config(o);
    prepare_out(o, cfg);
    MetricsLogger log(o.out_dir, "pixel1", cfg.seed);

    FaebFile emb = load_faeb(in_dir + "/train_embeddings.faeb");
    DatasetManifest manifest = load_manifest(in_dir + "/train_manifest.txt");
    const real mean_norm = read_mean_norm(in_dir);

    const std::string ckpt_path = o.out_dir + "/pixel1.faec";
    require_fresh(ckpt_path, o.force);

    PixelDecoderConfig pcfg = cfg.pixel_decoder_config();
    // The calibration constant defaults to this teacher's own norm statistic,
    // so fixed and scaled modes coincide unless the config overrides it.
    NoiseStageConfig noise = cfg.noise_config(mean_norm);
    PixelLossWeights w = cfg.pixel_loss_weights();
    TrainConfig tcfg = cfg.pixel_train_config(1);

    ParamStore gen, disc, perc;
    AdamW gen_opt(&gen, tcfg.optim), disc_opt(&disc, tcfg.optim);
    PixelTrainResult res =
        train_pixel(teacher_features(emb), manifest, pcfg, w, &noise, mean_norm,
                    cfg.pixel.gan_start_step, tcfg, gen, gen_opt, disc, disc_opt, perc,
                    o.out_dir + "/pixel1_loss.csv");

    save_pixel_bundle(ckpt_path, cfg, gen, disc, perc, gen_opt, "stage/pixel1");

    log.row(tcfg.steps, "rec", res.final_rec);
    log.row(tcfg.steps, "perc", res.final_perc);
    log.row(tcfg.steps, "gan", res.final_gan);
    log.row(tcfg.steps, "total", res.final_total);
    log_info("train-pixel1: final rec " + format_real(res.final_rec));
    return 0;
}

int cmd_train_pixel2(const CommonOpts& o, const std::string& in_dir, const std::string& fae_ckpt,
                     const std::string& stage1_ckpt) {
    RunConfig cfg = resolve_config(o);
    prepare_out(o, cfg);
    MetricsLogger log(o.out_dir, "pixel2", cfg.seed);

    FaebFile emb = load_faeb(in_dir + "/train_embeddings.faeb");
    DatasetManifest manifest = load_manifest(in_dir + "/train_manifest.txt");
    const real mean_norm = read_mean_norm(in_dir);

    Checkpoint fae_ck = load_checkpoint(fae_ckpt);
    RunConfig fae_cfg = RunConfig::parse(fae_ck.config_text);
    Checkpoint s1 = load_checkpoint(stage1_ckpt);
    RunConfig s1_cfg = RunConfig::parse(s1.config_text);
    if (s1_cfg.teacher.image_size != cfg.teacher.image_size ||
        s1_cfg.pixel.patch_size != cfg.pixel.patch_size)
        throw config_error("train-pixel2: stage-1 checkpoint image/patch layout differs");

    const std::string ckpt_path = o.out_dir + "/pixel2.faec";
    require_fresh(ckpt_path, o.force);

    // Reconstructed embeddings from the frozen stage-Ia autoencoder.
    EncoderConfig enc = fae_cfg.encoder_config();
    FeatureDecoderConfig dec = fae_cfg.feature_decoder_config();
    const auto positions = grid_positions(emb.grid_h, emb.grid_w);
    std::vector<Tensor> recon(emb.records.size());
    for (std::size_t i = 0; i < emb.records.size(); ++i) {
        LatentPosterior post = encode(emb.records[i].values, enc, fae_ck.params);
        recon[i] = decode_features(post.mean, dec, fae_ck.params, positions);
    }

    PixelDecoderConfig pcfg = cfg.pixel_decoder_config();
    PixelLossWeights w = cfg.pixel_loss_weights();
    TrainConfig tcfg = cfg.pixel_train_config(2);

    ParamStore gen, disc, perc;
    split_pixel_bundle(s1, gen, disc, perc);
    AdamW gen_opt(&gen, tcfg.optim), disc_opt(&disc, tcfg.optim);
    PixelTrainResult res =
        train_pixel(recon, manifest, pcfg, w, nullptr, mean_norm, cfg.pixel.gan_start_step,
                    tcfg, gen, gen_opt, disc, disc_opt, perc, o.out_dir + "/pixel2_loss.csv");

    save_pixel_bundle(ckpt_path, cfg, gen, disc, perc, gen_opt, "stage/pixel2");

    log.row(tcfg.steps, "rec", res.final_rec);
    log.row(tcfg.steps, "total", res.final_total);
    log_info("train-pixel2: final rec " + format_real(res.final_rec));
    return 0;
}

// ---- train-ldm ----

int cmd_train_ldm(const CommonOpts& o, const std::string& latents_path) {
    RunConfig cfg = resolve_config(o);

    FaebFile latents = load_faeb(latents_path);
    cfg.ldm.latent_grid_h = latents.grid_h;
    cfg.ldm.latent_grid_w = latents.grid_w;
    cfg.ldm.latent_dim = latents.feature_dim;
    prepare_out(o, cfg);
    MetricsLogger log(o.out_dir, "ldm", cfg.seed);

    const std::string ckpt_path = o.out_dir + "/ldm.faec";
    require_fresh(ckpt_path, o.force);

    GenModelConfig gcfg =
        cfg.gen_model_config(latents.grid_h, latents.grid_w, latents.feature_dim);
    ShiftSpec shift{cfg.ldm.shift};
    TrainConfig tcfg = cfg.ldm_train_config();
    ParamStore params;
    AdamW opt(&params, tcfg.optim);
    LdmTrainResult res =
        train_ldm(latents, gcfg, shift, tcfg, params, opt, o.out_dir + "/ldm_loss.csv");

    Checkpoint ck = make_checkpoint(cfg.serialize(), params, &opt,
                                    "seed=" + std::to_string(cfg.seed) + " stream=stage/ldm");
    save_checkpoint(ckpt_path, ck, /*force=*/true);

    log.row(tcfg.steps, "loss", res.final_loss);
    log_info("train-ldm: final loss " + format_real(res.final_loss));
    return 0;
}

// ---- sample ----

int cmd_sample(const CommonOpts& o, const std::string& ldm_ckpt, const std::string& fae_ckpt,
               const std::string& pixel_ckpt, int n, const std::string& mode) {
    RunConfig cfg = resolve_config(o);
    prepare_out(o, cfg);
    MetricsLogger log(o.out_dir, "sample", cfg.seed);

    Checkpoint ldm = load_checkpoint(ldm_ckpt);
    RunConfig ldm_cfg = RunConfig::parse(ldm.config_text);
    GenModelConfig gcfg = ldm_cfg.gen_model_config(
        ldm_cfg.ldm.latent_grid_h, ldm_cfg.ldm.latent_grid_w, ldm_cfg.ldm.latent_dim);

    const std::string latents_path = o.out_dir + "/latents.faeb";
    require_fresh(latents_path, o.force);

    SampleConfig scfg;
    scfg.steps = cfg.sample.steps;
    scfg.shift = ShiftSpec{cfg.sample.shift};
    scfg.guidance = cfg.guidance_schedule();
    scfg.use_guidance = !cfg.sample.guidance.empty();
    scfg.seed = Rng::derive_key(cfg.seed, "stage/sample");

    std::vector<int> labels(n);
    for (int i = 0; i < n; ++i) labels[i] = i % gcfg.class_count;

    std::vector<Tensor> z;
    if (n > 0) {
        VelocityModel model = make_model_velocity(gcfg, ldm.params);
        const Shape latent_shape{gcfg.tokens(), gcfg.latent_dim};
        if (mode == "ode") {
            z = sample_ode(model, latent_shape, n, labels, scfg);
        } else if (mode == "sde") {
            z = sample_sde(model, latent_shape, n, labels, scfg);
        } else {
            throw usage_error("sample: mode must be ode|sde");
        }
        // Undo the training-time latent standardization.
        const Tensor& mu = ldm.params.get("latent_stats.mean").value;
        const Tensor& sd = ldm.params.get("latent_stats.std").value;
        for (auto& zi : z)
            for (int t = 0; t < zi.rows(); ++t)
                for (int d = 0; d < zi.cols(); ++d)
                    zi.at(t, d) = zi.at(t, d) * sd.v[d] + mu.v[d];
    }

    FaebFile out;
    out.grid_h = gcfg.grid_h;
    out.grid_w = gcfg.grid_w;
    out.feature_dim = gcfg.latent_dim;
    out.has_labels = true;
    for (int i = 0; i < n; ++i) {
        EmbeddingGrid g;
        g.image_id = "sample_" + std::to_string(i);
        g.label = labels[i];
        g.values = std::move(z[i]);
        out.records.push_back(std::move(g));
    }
    write_faeb(latents_path, out, /*force=*/true);
    log.row(0, "latents", static_cast<real>(n));

    if (n > 0 && !fae_ckpt.empty() && !pixel_ckpt.empty()) {
        Checkpoint fae_ck = load_checkpoint(fae_ckpt);
        RunConfig fae_cfg = RunConfig::parse(fae_ck.config_text);
        FeatureDecoderConfig dec = fae_cfg.feature_decoder_config();
        Checkpoint pix_ck = load_checkpoint(pixel_ckpt);
        RunConfig pix_cfg = RunConfig::parse(pix_ck.config_text);
        PixelDecoderConfig pcfg = pix_cfg.pixel_decoder_config();
        ParamStore gen, disc, perc;
        split_pixel_bundle(pix_ck, gen, disc, perc);

        const auto positions = grid_positions(gcfg.grid_h, gcfg.grid_w);
        std::vector<Tensor> images;
        images.reserve(out.records.size());
        for (const auto& rec : out.records) {
            Tensor x_hat = decode_features(rec.values, dec, fae_ck.params, positions);
            images.push_back(decode_pixels(x_hat, pcfg, gen));
        }
        write_ppm(o.out_dir + "/samples.ppm", tile_images(images, cfg.sample.sheet_cols),
                  /*force=*/true);
        log.row(0, "images", static_cast<real>(images.size()));
    }
    log_info("sample: wrote " + std::to_string(n) + " latents (" + mode + ")");
    return 0;
}

// ---- probe ----

int cmd_probe(const CommonOpts& o, const std::string& in_dir, const std::string& fae_ckpt,
              const std::string& gen_latents) {
    RunConfig cfg = resolve_config(o);
    prepare_out(o, cfg);
    MetricsLogger log(o.out_dir, "probe", cfg.seed);

    FaebFile train = load_faeb(in_dir + "/train_embeddings.faeb");
    FaebFile val = load_faeb(in_dir + "/val_embeddings.faeb");
    DatasetManifest val_manifest = load_manifest(in_dir + "/val_manifest.txt");
    Checkpoint fae_ck = load_checkpoint(fae_ckpt);
    RunConfig fae_cfg = RunConfig::parse(fae_ck.config_text);
    EncoderConfig enc = fae_cfg.encoder_config();
    FeatureDecoderConfig dec = fae_cfg.feature_decoder_config();
    const auto positions = grid_positions(val.grid_h, val.grid_w);

    CsvWriter csv(o.out_dir + "/probe_metrics.csv", "metric,split,value,seed");
    const std::string seed_s = std::to_string(cfg.seed);

    // Latents and reconstructions for the validation split.
    std::vector<Tensor> val_latents(val.records.size());
    std::vector<Tensor> val_recon(val.records.size());
    for (std::size_t i = 0; i < val.records.size(); ++i) {
        LatentPosterior post = encode(val.records[i].values, enc, fae_ck.params);
        val_latents[i] = post.mean;
        val_recon[i] = decode_features(post.mean, dec, fae_ck.params, positions);
    }

    // Similarity maps for the first record, original vs latent space.
    {
        const int qr = std::min(cfg.probe.query_row, val.grid_h - 1);
        const int qc = std::min(cfg.probe.query_col, val.grid_w - 1);
        SimilarityMap orig =
            patch_similarity_map(val.records[0].values, val.grid_h, val.grid_w, qr, qc);
        SimilarityMap lat = patch_similarity_map(val_latents[0], val.grid_h, val.grid_w, qr, qc);
        write_pgm(o.out_dir + "/simmap_teacher.pgm", similarity_map_image(orig), 0.0, 1.0,
                  true);
        write_pgm(o.out_dir + "/simmap_latent.pgm", similarity_map_image(lat), 0.0, 1.0, true);
    }

    // Spearman preservation averaged over the validation split.
    {
        real sum = 0.0;
        int used = 0;
        for (std::size_t i = 0; i < val.records.size(); ++i) {
            sum += similarity_preservation(val.records[i].values, val_latents[i]);
            ++used;
        }
        const real preservation = sum / used;
        csv.row("similarity_preservation,val," + format_real(preservation) + "," + seed_s);
        log.row(0, "similarity_preservation", preservation);
    }

    // Linear probe: head trained on pooled original train embeddings, then
    // evaluated on originals and on reconstructions of the val split.
    {
        Tensor train_x({static_cast<int>(train.records.size()), train.feature_dim});
        std::vector<int> train_y(train.records.size());
        for (std::size_t i = 0; i < train.records.size(); ++i) {
            Tensor pooled = mean_pool_rows(train.records[i].values);
            std::copy(pooled.v.begin(), pooled.v.end(),
                      train_x.v.begin() + i * train.feature_dim);
            train_y[i] = train.records[i].label.value_or(0);
        }
        Tensor val_x({static_cast<int>(val.records.size()), val.feature_dim});
        Tensor val_xhat({static_cast<int>(val.records.size()), val.feature_dim});
        std::vector<int> val_y(val.records.size());
        for (std::size_t i = 0; i < val.records.size(); ++i) {
            Tensor pooled = mean_pool_rows(val.records[i].values);
            std::copy(pooled.v.begin(), pooled.v.end(), val_x.v.begin() + i * val.feature_dim);
            Tensor pooled_hat = mean_pool_rows(val_recon[i]);
            std::copy(pooled_hat.v.begin(), pooled_hat.v.end(),
                      val_xhat.v.begin() + i * val.feature_dim);
            val_y[i] = val.records[i].label.value_or(0);
        }
        const int classes = val_manifest.num_classes;
        ProbeResult on_orig =
            linear_probe_fit(train_x, train_y, val_x, val_y, classes, cfg.probe.l2_reg);
        ProbeResult on_recon =
            linear_probe_fit(train_x, train_y, val_xhat, val_y, classes, cfg.probe.l2_reg);
        csv.row("linear_probe_top1,val_original," + format_real(on_orig.accuracy) + "," +
                seed_s);
        csv.row("linear_probe_top1,val_reconstructed," + format_real(on_recon.accuracy) + "," +
                seed_s);
        log.row(0, "probe_original", on_orig.accuracy);
        log.row(0, "probe_reconstructed", on_recon.accuracy);
    }

    // Paired-view retrieval: view-B teacher embeddings form the gallery;
    // view-A originals and their reconstructions are the queries.
    {
        Teacher teacher(fae_cfg.teacher_spec());
        const int nv = static_cast<int>(val.records.size());
        Tensor gallery({nv, val.feature_dim});
        Tensor q_orig({nv, val.feature_dim});
        Tensor q_recon({nv, val.feature_dim});
        std::vector<int> gt(nv);
        for (int i = 0; i < nv; ++i) {
            const ImageIdParts parts = parse_image_id(val_manifest.records[i].image_id);
            Tensor view_b = synth_image_view(parts.class_label, parts.instance_seed, 1,
                                             val_manifest.image_size);
            EmbeddingGrid emb_b = teacher.embed(view_b);
            Tensor pooled_b = mean_pool_rows(emb_b.values);
            std::copy(pooled_b.v.begin(), pooled_b.v.end(),
                      gallery.v.begin() + static_cast<std::size_t>(i) * val.feature_dim);
            Tensor pooled_a = mean_pool_rows(val.records[i].values);
            std::copy(pooled_a.v.begin(), pooled_a.v.end(),
                      q_orig.v.begin() + static_cast<std::size_t>(i) * val.feature_dim);
            Tensor pooled_r = mean_pool_rows(val_recon[i]);
            std::copy(pooled_r.v.begin(), pooled_r.v.end(),
                      q_recon.v.begin() + static_cast<std::size_t>(i) * val.feature_dim);
            gt[i] = i;
        }
        RetrievalResult r_orig = retrieval_top1(q_orig, gallery, gt);
        RetrievalResult r_recon = retrieval_top1(q_recon, gallery, gt);
        csv.row("retrieval_recall1_q2g,val_original," +
                format_real(r_orig.recall_query_to_gallery) + "," + seed_s);
        csv.row("retrieval_recall1_q2g,val_reconstructed," +
                format_real(r_recon.recall_query_to_gallery) + "," + seed_s);
        csv.row("retrieval_recall1_g2q,val_original," +
                format_real(r_orig.recall_gallery_to_query) + "," + seed_s);
        csv.row("retrieval_recall1_g2q,val_reconstructed," +
                format_real(r_recon.recall_gallery_to_query) + "," + seed_s);
        log.row(0, "retrieval_original", r_orig.recall_query_to_gallery);
        log.row(0, "retrieval_reconstructed", r_recon.recall_query_to_gallery);
    }

    // Cross-image matching demo on the first same-class pair in val.
    {
        int a = -1, b = -1;
        for (std::size_t i = 0; i < val.records.size() && b < 0; ++i)
            for (std::size_t j = i + 1; j < val.records.size(); ++j)
                if (val.records[i].label == val.records[j].label) {
                    a = static_cast<int>(i);
                    b = static_cast<int>(j);
                    break;
                }
        if (a >= 0) {
            // The foreground cluster bounds the pair count; shrink on demand.
            int n_pairs = cfg.probe.n_pairs;
            while (n_pairs >= 1) {
                try {
                    MatchSet ms = cross_image_match(
                        val_latents[a], val_latents[b], val.grid_h, val.grid_w,
                        std::min(cfg.probe.k_clusters, val.grid_h), n_pairs, cfg.seed);
                    real mean_score = 0.0;
                    for (const auto& p : ms.pairs) mean_score += p.score / ms.pairs.size();
                    csv.row("cross_image_match_score,val," + format_real(mean_score) + "," +
                            seed_s);
                    break;
                } catch (const Error& e) {
                    if (e.kind() != ErrorKind::Matching || n_pairs == 1) throw;
                    n_pairs /= 2;
                    log_info(std::string("probe: ") + e.what() + "; retrying with n_pairs=" +
                             std::to_string(n_pairs));
                }
            }
        }
    }

    // Frechet proxy in pooled teacher space: originals vs reconstructions,
    // plus generated latents when a sample file is supplied.
    {
        const int nv = static_cast<int>(val.records.size());
        Tensor pooled_x({nv, val.feature_dim});
        Tensor pooled_r({nv, val.feature_dim});
        for (int i = 0; i < nv; ++i) {
            Tensor px = mean_pool_rows(val.records[i].values);
            std::copy(px.v.begin(), px.v.end(),
                      pooled_x.v.begin() + static_cast<std::size_t>(i) * val.feature_dim);
            Tensor pr = mean_pool_rows(val_recon[i]);
            std::copy(pr.v.begin(), pr.v.end(),
                      pooled_r.v.begin() + static_cast<std::size_t>(i) * val.feature_dim);
        }
        const real fd_recon = frechet_distance(gaussian_stats(pooled_x),
                                               gaussian_stats(pooled_r));
        csv.row("frechet_proxy,reconstruction," + format_real(fd_recon) + "," + seed_s);
        log.row(0, "frechet_recon", fd_recon);

        if (!gen_latents.empty()) {
            FaebFile gen = load_faeb(gen_latents);
            Tensor pooled_g({static_cast<int>(gen.records.size()), val.feature_dim});
            for (std::size_t i = 0; i < gen.records.size(); ++i) {
                Tensor x_hat =
                    decode_features(gen.records[i].values, dec, fae_ck.params, positions);
                Tensor pg = mean_pool_rows(x_hat);
                std::copy(pg.v.begin(), pg.v.end(),
                          pooled_g.v.begin() + i * val.feature_dim);
            }
            const real fd_gen = frechet_distance(gaussian_stats(pooled_x),
                                                 gaussian_stats(pooled_g));
            csv.row("frechet_proxy,generation," + format_real(fd_gen) + "," + seed_s);
            log.row(0, "frechet_gen", fd_gen);
        }
    }
    csv.close();
    log_info("probe: metrics written to " + o.out_dir + "/probe_metrics.csv");
    return 0;
}

// ---- verify ----

int cmd_verify(const CommonOpts& o) {
    RunConfig cfg = resolve_config(o);
    std::vector<CheckResult> all;
    auto run = [&all](std::vector<CheckResult> rs) {
        for (auto& r : rs) {
            std::printf("[%s] %s: %s\n", r.pass ? "ok" : "FAIL", r.name.c_str(),
                        r.detail.c_str());
            all.push_back(std::move(r));
        }
        std::fflush(stdout);
    };
    run(run_gradient_suite(cfg.seed, 5));
    run(run_interpolant_checks(cfg.seed, 10000));
    run(run_kl_oracle_check(cfg.seed, 20, 1000000));
    run(run_sampler_oracle_checks(cfg.seed, 10000, 250, 4));
    const bool ok = all_passed(all);
    std::printf("%s\n", ok ? "verify: all checks passed" : "verify: FAILURES detected");
    return ok ? 0 : 1;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"feature-autoencoding pipeline: synthesize data, train the three stages, "
                 "sample, probe, verify"};
    app.require_subcommand(1);

    CommonOpts synth_o, fae_o, pix1_o, pix2_o, ldm_o, sample_o, probe_o, verify_o;
    std::string fae_in, pix1_in, pix2_in, pix2_fae, pix2_stage1, ldm_in;
    std::string sample_ldm, sample_fae, sample_pixel, sample_mode = "ode";
    int sample_n = -1;
    std::string probe_in, probe_fae, probe_gen;

    auto* synth = app.add_subcommand("synth", "generate the dataset and teacher embeddings");
    add_common(synth, synth_o);

    auto* tf = app.add_subcommand("train-fae", "stage Ia: train the feature autoencoder");
    add_common(tf, fae_o);
    tf->add_option("--in", fae_in, "dataset directory from synth")->required();

    auto* tp1 = app.add_subcommand("train-pixel1",
                                   "stage Ib: train the pixel decoder on noisy embeddings");
    add_common(tp1, pix1_o);
    tp1->add_option("--in", pix1_in, "dataset directory from synth")->required();

    auto* tp2 = app.add_subcommand("train-pixel2",
                                   "stage II: fine-tune the pixel decoder on reconstructions");
    add_common(tp2, pix2_o);
    tp2->add_option("--in", pix2_in, "dataset directory from synth")->required();
    tp2->add_option("--fae", pix2_fae, "stage Ia checkpoint")->required();
    tp2->add_option("--stage1", pix2_stage1, "stage Ib checkpoint")->required();

    auto* tl = app.add_subcommand("train-ldm", "train the latent generator");
    add_common(tl, ldm_o);
    tl->add_option("--in", ldm_in, "latent manifest (faeb)")->required();

    auto* sm = app.add_subcommand("sample", "sample latents and decode to images");
    add_common(sm, sample_o);
    sm->add_option("--ldm", sample_ldm, "generator checkpoint")->required();
    sm->add_option("--fae", sample_fae, "autoencoder checkpoint (for decoding)");
    sm->add_option("--pixel", sample_pixel, "pixel decoder checkpoint (for decoding)");
    sm->add_option("--n", sample_n, "sample count (overrides config)");
    sm->add_option("--mode", sample_mode, "ode|sde");

    auto* pb = app.add_subcommand("probe", "semantic preservation metrics");
    add_common(pb, probe_o);
    pb->add_option("--in", probe_in, "dataset directory from synth")->required();
    pb->add_option("--fae", probe_fae, "autoencoder checkpoint")->required();
    pb->add_option("--gen", probe_gen, "sampled latents for the generation Frechet proxy");

    auto* vf = app.add_subcommand("verify", "run the numeric invariant suite");
    add_common(vf, verify_o, /*needs_out=*/false);

    CLI11_PARSE(app, argc, argv);

    try {
        if (synth->parsed()) return cmd_synth(synth_o);
        if (tf->parsed()) return cmd_train_fae(fae_o, fae_in);
        if (tp1->parsed()) return cmd_train_pixel1(pix1_o, pix1_in);
        if (tp2->parsed()) return cmd_train_pixel2(pix2_o, pix2_in, pix2_fae, pix2_stage1);
        if (tl->parsed()) return cmd_train_ldm(ldm_o, ldm_in);
        if (sm->parsed()) {
            RunConfig cfg = resolve_config(sample_o);
            const int n = sample_n >= 0 ? sample_n : cfg.sample.n;
            const std::string mode = sm->count("--mode") > 0 ? sample_mode : cfg.sample.mode;
            return cmd_sample(sample_o, sample_ldm, sample_fae, sample_pixel, n, mode);
        }
        if (pb->parsed()) return cmd_probe(probe_o, probe_in, probe_fae, probe_gen);
        if (vf->parsed()) return cmd_verify(verify_o);
    } catch (const Error& e) {
        log_error(e.what());
        switch (e.kind()) {
            case ErrorKind::Numeric:
            case ErrorKind::Training:
            case ErrorKind::Sampler:
                return 3;
            default:
                return 2;
        }
    } catch (const std::exception& e) {
        log_error(e.what());
        return 2;
    }
    return 2;
}
