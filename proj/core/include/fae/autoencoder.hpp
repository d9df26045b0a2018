#pragma once

#include <string>
#include <vector>

#include "fae/attention.hpp"
#include "fae/checkpoint.hpp"
#include "fae/faeb.hpp"
#include "fae/trainer.hpp"

namespace fae {

enum class EncoderVariant { SingleAttention, Linear, Transformer };

EncoderVariant encoder_variant_from_string(const std::string& kind);
std::string to_string(EncoderVariant v);

struct EncoderConfig {
    EncoderVariant variant = EncoderVariant::SingleAttention;
    int input_dim = 1536;
    int num_heads = 24;
    int head_dim = 256;
    int latent_dim = 32;
    int depth = 1;  // transformer variant only (4 or 6)

    int output_dim() const { return 2 * latent_dim; }
    void validate() const;
};

// Builds an ablation variant sharing the base dims and latent size.
EncoderConfig encoder_variant(const std::string& kind, const EncoderConfig& base);

struct FeatureDecoderConfig {
    int depth = 6;
    int hidden_dim = 1536;  // equals the teacher feature dim
    int num_heads = 24;
    int latent_dim = 32;
    bool use_rope = true;
    bool use_rmsnorm = true;
    bool use_swiglu = true;
    real mlp_ratio = 4.0;
    real rms_eps = 1e-6;

    void validate() const;
    BlockConfig block() const;
};

inline constexpr real kLogvarMin = -30.0;
inline constexpr real kLogvarMax = 20.0;

struct LatentPosterior {
    Tensor mean;    // [tokens, latent_dim]
    Tensor logvar;  // clamped to [kLogvarMin, kLogvarMax]
};

struct LatentCode {
    Tensor values;  // [tokens, latent_dim]
};

struct VaeLossWeights {
    real beta = 1e-4;
};

std::vector<ParamSpec> encoder_param_specs(const EncoderConfig& cfg);
std::vector<ParamSpec> feature_decoder_param_specs(const FeatureDecoderConfig& cfg);

struct PosteriorVars {
    ad::Var mean;
    ad::Var logvar;
};

PosteriorVars encode_vars(ad::Autograd& ctx, const ad::Var& x, const EncoderConfig& cfg,
                          ParamStore& weights, Tensor* attn_probs = nullptr);
LatentPosterior encode(const Tensor& x, const EncoderConfig& cfg, ParamStore& weights);

LatentCode reparameterize(const LatentPosterior& post, const Tensor& noise);
ad::Var reparameterize_vars(const PosteriorVars& post, const Tensor& noise);

ad::Var decode_features_vars(ad::Autograd& ctx, const ad::Var& z,
                             const FeatureDecoderConfig& cfg, ParamStore& weights,
                             const std::vector<GridPos>& positions);
Tensor decode_features(const Tensor& z, const FeatureDecoderConfig& cfg, ParamStore& weights,
                       const std::vector<GridPos>& positions);

struct VaeLossParts {
    real total = 0.0;
    real recon = 0.0;
    real kl = 0.0;
};

// recon = mean over patches of squared L2 error; kl = mean over patches of
// the closed-form diagonal-Gaussian KL against the unit prior.
VaeLossParts vae_loss(const Tensor& x, const Tensor& x_hat, const LatentPosterior& post,
                      const VaeLossWeights& w);
ad::Var vae_loss_vars(const ad::Var& x, const ad::Var& x_hat, const PosteriorVars& post,
                      const VaeLossWeights& w, ad::Var* recon_out, ad::Var* kl_out);

// ---- training ----

struct TrainConfig {
    int steps = 1000;
    int batch_size = 16;
    std::uint64_t seed = 0;
    int workers = 1;
    OptimConfig optim;
    real divergence_threshold = 1e6;
};

struct FaeTrainResult {
    real final_total = 0.0;
    real final_recon = 0.0;
    real final_kl = 0.0;
};

// Stage Ia. Initializes params when empty, trains with AdamW, logs per-step
// (step, recon, kl, total) when loss_csv is non-empty, and stores per-channel
// latent statistics under latent_stats.{mean,std}.
FaeTrainResult train_fae(const FaebFile& train, const EncoderConfig& ecfg,
                         const FeatureDecoderConfig& dcfg, const VaeLossWeights& w,
                         const TrainConfig& tcfg, ParamStore& params, AdamW& opt,
                         const std::string& loss_csv = "");

// Mean cosine between teacher features and their reconstructions (z = mean).
real eval_fae_cosine(const FaebFile& data, const EncoderConfig& ecfg,
                     const FeatureDecoderConfig& dcfg, ParamStore& params);

// Encodes every record (posterior mean) into a latent FaebFile.
FaebFile encode_latents(const FaebFile& data, const EncoderConfig& ecfg, ParamStore& params,
                        int grid_h, int grid_w);

} // namespace fae
