#pragma once

#include "fae/autodiff.hpp"

namespace fae::ad {

// x [Cin,H,W], w [Cout,Cin,kh,kw], b [Cout] -> [Cout,Ho,Wo]
Var conv2d(const Var& x, const Var& w, const Var& b, int stride, int pad);

// [C,H,W] -> [N, C*p*p] row-major over the patch grid; features ordered
// (channel, patch row, patch col). Exact inverse of unpatchify.
Var patchify(const Var& img, int patch);
Var unpatchify(const Var& tokens, int channels, int grid_h, int grid_w, int patch);

} // namespace fae::ad
