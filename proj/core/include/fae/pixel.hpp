#pragma once

#include <string>
#include <vector>

#include "fae/attention.hpp"
#include "fae/autoencoder.hpp"
#include "fae/faeb.hpp"
#include "fae/teacher.hpp"
#include "fae/trainer.hpp"

namespace fae {

struct PixelDecoderConfig {
    int depth = 24;
    int hidden_dim = 1024;
    int num_heads = 16;
    int image_size = 256;
    int patch_size = 16;
    int feature_dim = 1536;  // embedding dim fed to the decoder
    int grid_h = 16;
    int grid_w = 16;
    bool use_rope = true;
    bool use_rmsnorm = true;
    bool use_swiglu = true;
    real mlp_ratio = 4.0;
    real rms_eps = 1e-6;

    void validate() const;
    BlockConfig block() const;
};

enum class NormScaleMode { Fixed, ScaledByMeanNorm };

struct NoiseStageConfig {
    real sigma_base = 0.4;
    NormScaleMode norm_scale_mode = NormScaleMode::Fixed;
    real reference_norm = 0.0;  // calibration constant for scaled mode

    real sigma_for(real teacher_mean_norm) const;
};

struct PixelLossWeights {
    real lambda_gan = 0.1;
    real lambda_perc = 0.5;
    real lambda_rec = 1.0;
    void validate() const;
};

std::vector<ParamSpec> pixel_decoder_param_specs(const PixelDecoderConfig& cfg);
std::vector<ParamSpec> discriminator_param_specs();
std::vector<ParamSpec> perceptual_param_specs();

// x~ = x + eps, eps ~ N(0, sigma^2 I); deterministic per rng stream.
Tensor inject_noise(const Tensor& x, const NoiseStageConfig& cfg, real teacher_mean_norm,
                    Rng rng);

ad::Var decode_pixels_vars(ad::Autograd& ctx, const ad::Var& features,
                           const PixelDecoderConfig& cfg, ParamStore& weights);
Tensor decode_pixels(const Tensor& features, const PixelDecoderConfig& cfg,
                     ParamStore& weights);

// Patch critic on [3,H,W] images -> logit map.
ad::Var discriminator_vars(ad::Autograd& ctx, const ad::Var& image, ParamStore& weights);
// Frozen random convnet feature stack (4 strided layers).
std::vector<ad::Var> perceptual_stack(ad::Autograd& ctx, const ad::Var& image,
                                      ParamStore& weights);

struct PixelLossParts {
    real total = 0.0;
    real rec = 0.0;
    real perc = 0.0;
    real gan = 0.0;
};

// rec = L1; perc = stacked L2 on the frozen convnet; gan = hinge generator
// loss through the critic. total = weighted sum.
ad::Var pixel_loss_vars(ad::Autograd& ctx, const ad::Var& pred, const ad::Var& target,
                        const PixelLossWeights& w, ParamStore* disc, ParamStore* perc,
                        ad::Var* rec_out, ad::Var* perc_out, ad::Var* gan_out);
PixelLossParts pixel_loss(const Tensor& pred, const Tensor& target, const PixelLossWeights& w,
                          ParamStore* disc, ParamStore* perc);

// Hinge critic loss: mean(relu(1 - D(real))) + mean(relu(1 + D(fake))).
ad::Var discriminator_loss_vars(ad::Autograd& ctx, const ad::Var& real_img,
                                const ad::Var& fake_img, ParamStore& disc);

struct PixelTrainResult {
    real final_total = 0.0;
    real final_rec = 0.0;
    real final_perc = 0.0;
    real final_gan = 0.0;
};

// Trains the pixel decoder against manifest images. Stage Ib passes `noise`
// to perturb the frozen embeddings each step; the stage-2 fine-tune passes
// nullptr and reconstructed features. Generator and critic alternate and
// live in disjoint parameter stores.
PixelTrainResult train_pixel(const std::vector<Tensor>& features,
                             const DatasetManifest& manifest, const PixelDecoderConfig& cfg,
                             const PixelLossWeights& w, const NoiseStageConfig* noise,
                             real teacher_mean_norm, int gan_start_step,
                             const TrainConfig& tcfg, ParamStore& gen_params, AdamW& gen_opt,
                             ParamStore& disc_params, AdamW& disc_opt, ParamStore& perc_params,
                             const std::string& loss_csv = "");

} // namespace fae
