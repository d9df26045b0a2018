#pragma once

#include <cstdint>
#include <string>

#include "fae/autoencoder.hpp"
#include "fae/flow.hpp"
#include "fae/pixel.hpp"
#include "fae/teacher.hpp"

namespace fae {

// Fully-resolved run configuration. Canonical text form: '#' comments,
// "key = value" lines under [teacher]/[fae]/[pixel]/[ldm]/[sample]/[probe]
// sections, global keys first. Unknown keys are rejected and
// parse -> serialize is canonical.
struct RunConfig {
    std::uint64_t seed = 42;
    int workers = 1;

    struct TeacherSection {
        int grid_h = 8;
        int grid_w = 8;
        int feature_dim = 96;
        int num_heads = 4;
        int depth = 2;
        bool positional_mixing = true;
        bool standardize = true;
        int registers = 0;
        int image_size = 32;
        int num_classes = 8;
        int train_count = 384;
        int val_count = 64;
    } teacher;

    struct FaeSection {
        std::string variant = "single_attention";
        int num_heads = 4;
        int head_dim = 32;
        int latent_dim = 16;
        int decoder_depth = 4;
        int decoder_heads = 4;
        real beta = 1e-4;
        int steps = 1200;
        int batch_size = 16;
        real lr = 3e-4;
        int warmup = 100;
        std::string schedule = "cosine";
        real weight_decay = 0.0;
    } fae;

    struct PixelSection {
        int depth = 4;
        int hidden_dim = 128;
        int num_heads = 4;
        int patch_size = 4;
        real sigma_base = 0.4;
        std::string norm_scale_mode = "scaled";
        real reference_norm = 0.0;  // 0 = calibrate from the teacher norm stats
        real lambda_rec = 1.0;
        real lambda_perc = 0.5;
        real lambda_gan = 0.1;
        int gan_start_step = 400;
        int stage1_steps = 800;
        int stage2_steps = 300;
        int batch_size = 8;
        real lr = 3e-4;
        int warmup = 50;
        std::string schedule = "cosine";
        real weight_decay = 0.0;
    } pixel;

    struct LdmSection {
        int depth = 4;
        int hidden_dim = 96;
        int num_heads = 4;
        int class_count = 0;  // 0 = teacher.num_classes
        // Latent geometry, resolved from the training data and recorded in
        // checkpoints so sampling is self-contained. 0 = derive.
        int latent_grid_h = 0;
        int latent_grid_w = 0;
        int latent_dim = 0;
        bool use_swiglu = true;
        bool use_rope = true;
        bool use_rmsnorm = true;
        real cond_dropout = 0.1;
        real shift = 1.0;
        int steps = 2000;
        int batch_size = 32;
        real lr = 1e-3;
        int warmup = 0;
        std::string schedule = "constant";
        real weight_decay = 0.0;
        int time_embed_dim = 64;
    } ldm;

    struct SampleSection {
        int n = 16;
        int steps = 250;
        std::string mode = "ode";
        real shift = 1.0;
        std::string guidance = "";  // "scale@lo-hi,..."; empty = unguided
        int sheet_cols = 4;
    } sample;

    struct ProbeSection {
        real l2_reg = 1e-3;
        int k_clusters = 3;
        int n_pairs = 8;
        int query_row = 2;
        int query_col = 2;
    } probe;

    std::string serialize() const;
    static RunConfig parse(const std::string& text);
    static RunConfig load(const std::string& path);

    // Derived module configs.
    TeacherSpec teacher_spec() const;
    EncoderConfig encoder_config() const;
    FeatureDecoderConfig feature_decoder_config() const;
    PixelDecoderConfig pixel_decoder_config() const;
    NoiseStageConfig noise_config(real calibrated_reference) const;
    PixelLossWeights pixel_loss_weights() const;
    GenModelConfig gen_model_config(int latent_grid_h, int latent_grid_w, int latent_dim) const;
    GuidanceSchedule guidance_schedule() const;
    TrainConfig fae_train_config() const;
    TrainConfig pixel_train_config(int stage) const;
    TrainConfig ldm_train_config() const;
};

GuidanceSchedule parse_guidance(const std::string& text);
std::string format_guidance(const GuidanceSchedule& sched);

} // namespace fae
