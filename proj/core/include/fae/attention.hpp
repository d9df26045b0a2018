#pragma once

#include <optional>
#include <string>
#include <vector>

#include "fae/autodiff.hpp"
#include "fae/params.hpp"

namespace fae {

struct GridPos {
    int row = 0;
    int col = 0;
};

// Row-major token order; optional register tokens lead the sequence and sit
// at the identity position.
std::vector<GridPos> grid_positions(int grid_h, int grid_w, int num_registers = 0);

struct AttentionConfig {
    int input_dim = 0;
    int num_heads = 1;
    int head_dim = 1;
    int output_dim = 0;
    bool merged_qkv = true;
    bool use_rope = false;
    real rope_base = 10000.0;

    int inner_dim() const { return num_heads * head_dim; }
    void validate() const;
};

namespace ad {

// Axial 2-D rotary embedding on per-head token vectors. The head is split
// into a row half and a column half, each rotated in 2-D planes by its grid
// coordinate. head_dim must be divisible by 4.
Var rope_apply(const Var& x, const std::vector<GridPos>& positions, int num_heads, real base);

// Multi-head scaled-dot-product attention over q,k,v of shape [N, H*Dh].
// probs_out (optional) receives the softmax rows, H*N rows of length N.
Var sdpa(const Var& q, const Var& k, const Var& v, int num_heads, Tensor* probs_out = nullptr);

} // namespace ad

std::vector<ParamSpec> attention_param_specs(const AttentionConfig& cfg,
                                             const std::string& prefix);

// x [N, input_dim] -> [N, output_dim]. positions required when cfg.use_rope.
ad::Var attention_forward(ad::Autograd& ctx, const ad::Var& x, const AttentionConfig& cfg,
                          ParamStore& weights, const std::string& prefix,
                          const std::vector<GridPos>* positions = nullptr,
                          Tensor* probs_out = nullptr);

// Pre-norm transformer block: attention + MLP with residuals.
struct BlockConfig {
    int hidden_dim = 0;
    int num_heads = 1;
    real mlp_ratio = 4.0;
    bool use_swiglu = true;
    bool use_rmsnorm = true;
    bool use_rope = true;
    real rms_eps = 1e-6;
    real rope_base = 10000.0;

    int head_dim() const { return hidden_dim / num_heads; }
    void validate() const;
};

// Gated-MLP width: round(hidden * ratio * 2/3) to the nearest multiple of 64.
int swiglu_hidden_width(int hidden_dim, real mlp_ratio);

ad::Var swiglu_forward(const ad::Var& x, const ad::Var& w_gate, const ad::Var& w_up,
                       const ad::Var& w_down);

std::vector<ParamSpec> block_param_specs(const BlockConfig& cfg, const std::string& prefix);

ad::Var transformer_block(ad::Autograd& ctx, const ad::Var& x, const BlockConfig& cfg,
                          ParamStore& weights, const std::string& prefix,
                          const std::vector<GridPos>* positions = nullptr);

} // namespace fae
