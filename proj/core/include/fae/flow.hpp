#pragma once

#include <functional>
#include <string>
#include <vector>

#include "fae/attention.hpp"
#include "fae/autoencoder.hpp"
#include "fae/faeb.hpp"
#include "fae/trainer.hpp"

namespace fae {

// Linear interpolant: x_t = (1-t) x0 + t eps, v-prediction target eps - x0,
// diffusion coefficient w(t) = sigma(t) = t. t=0 is clean, t=1 is noise.
struct InterpolantSpec {
    real alpha(real t) const { return 1.0 - t; }
    real sigma(real t) const { return t; }
    real diffusion_w(real t) const { return t; }
};

struct Interpolated {
    Tensor x_t;
    Tensor v_target;
};
Interpolated interpolate(const Tensor& x0, const Tensor& eps, real t);

struct VelocityEstimates {
    Tensor x0_hat;
    Tensor eps_hat;
    Tensor score;
};
// Algebraic inversion of the interpolant; score = -eps_hat / t is undefined
// at t = 0.
VelocityEstimates velocity_to_estimates(const Tensor& v, const Tensor& x_t, real t);

struct ShiftSpec {
    real s = 1.0;
    void validate() const;
};
// t' = s t / (1 + (s-1) t); strictly increasing bijection fixing 0 and 1.
real shift_time(real t, const ShiftSpec& spec);

struct GuidanceSegment {
    real t_low = 0.0;
    real t_high = 0.0;
    real scale = 1.0;
};
struct GuidanceSchedule {
    std::vector<GuidanceSegment> segments;
    real default_scale = 1.0;

    void validate() const;  // segments non-overlapping, 0 <= lo < hi <= 1
    real scale_at(real t) const;
    bool all_unit() const;
};

// v = v_uncond + g (v_cond - v_uncond); returns v_cond exactly at g = 1 and
// v_uncond exactly at g = 0.
Tensor apply_cfg(const Tensor& v_cond, const Tensor& v_uncond, const GuidanceSchedule& sched,
                 real t);

// ---- generative model ----

struct GenModelConfig {
    int depth = 28;
    int hidden_dim = 1152;
    int num_heads = 16;
    int latent_dim = 32;
    int grid_h = 16;
    int grid_w = 16;
    int class_count = 1000;
    bool use_swiglu = false;   // the three LightningDiT toggles; all-off is SiT
    bool use_rope = false;
    bool use_rmsnorm = false;
    real cond_dropout_prob = 0.1;
    real mlp_ratio = 4.0;
    real rms_eps = 1e-6;
    int time_embed_dim = 256;

    int tokens() const { return grid_h * grid_w; }
    int null_label() const { return class_count; }
    void validate() const;
};

std::vector<ParamSpec> gen_model_param_specs(const GenModelConfig& cfg);

// label == cfg.null_label() (or -1) selects the unconditional embedding.
ad::Var gen_model_vars(ad::Autograd& ctx, const ad::Var& x_t, real t, int label,
                       const GenModelConfig& cfg, ParamStore& weights);
Tensor gen_model_velocity(const Tensor& x_t, real t, int label, const GenModelConfig& cfg,
                          ParamStore& weights);

// Non-learned 2-D sin/cos position table, [grid_h*grid_w, dim].
Tensor sincos_pos_embed(int grid_h, int grid_w, int dim);

// ---- training ----

ad::Var fm_loss_record_vars(ad::Autograd& ctx, const Tensor& z0, real t, int label,
                            const Tensor& eps, const GenModelConfig& cfg, ParamStore& weights);

struct LdmTrainResult {
    real final_loss = 0.0;
};

// Trains v-prediction on a precomputed latent manifest. Latents are
// standardized per channel (stats stored under latent_stats.*); labels are
// dropped to the null token with cond_dropout_prob.
LdmTrainResult train_ldm(const FaebFile& latents, const GenModelConfig& cfg,
                         const ShiftSpec& shift, const TrainConfig& tcfg, ParamStore& params,
                         AdamW& opt, const std::string& loss_csv = "");

// ---- samplers ----

using VelocityModel = std::function<Tensor(const Tensor& x, real t, int label)>;

struct SampleConfig {
    int steps = 250;
    ShiftSpec shift;
    GuidanceSchedule guidance;
    bool use_guidance = false;   // evaluate the unconditional branch and blend
    real diffusion_scale = 1.0;  // scales w(t); 0 degenerates the SDE to the ODE
    std::uint64_t seed = 0;
};

// Euler integration of dx/dt = v from t=1 to t=0 on the shift-mapped uniform
// grid. The seed fixes the initial noise per chain.
std::vector<Tensor> sample_ode(const VelocityModel& model, const Shape& latent_shape, int n,
                               const std::vector<int>& labels, const SampleConfig& cfg);

// Euler-Maruyama on the reverse SDE dx = [v - w(t)/2 * score] dt + sqrt(w) dW,
// t: 1 -> 0; the final interval switches to the deterministic drift.
std::vector<Tensor> sample_sde(const VelocityModel& model, const Shape& latent_shape, int n,
                               const std::vector<int>& labels, const SampleConfig& cfg);

// Wraps trained weights as a VelocityModel (label -1 maps to the null token).
VelocityModel make_model_velocity(const GenModelConfig& cfg, ParamStore& weights);

} // namespace fae
