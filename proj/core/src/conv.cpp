#include "fae/conv.hpp"

#include <functional>

namespace fae::ad {

namespace {

Var make_node(Tensor val, std::vector<NodePtr> parents, std::function<void(Node&)> back) {
    auto n = std::make_shared<Node>();
    n->val = std::move(val);
    bool any = false;
    for (const auto& p : parents)
        if (p->needs_grad) any = true;
    n->needs_grad = any;
    if (any) {
        n->parents = std::move(parents);
        n->back = std::move(back);
    }
    return Var(n);
}

} // namespace

Var conv2d(const Var& x, const Var& w, const Var& b, int stride, int pad) {
    if (x.val().ndim() != 3) throw shape_error("conv2d: input must be [C,H,W]");
    if (w.val().ndim() != 4) throw shape_error("conv2d: weight must be [Cout,Cin,kh,kw]");
    const int cin = x.val().dim(0), h = x.val().dim(1), wd = x.val().dim(2);
    const int cout = w.val().dim(0), kh = w.val().dim(2), kw = w.val().dim(3);
    if (w.val().dim(1) != cin)
        throw shape_error("conv2d: weight cin " + std::to_string(w.val().dim(1)) +
                          " vs input channels " + std::to_string(cin));
    if (static_cast<int>(b.val().numel()) != cout) throw shape_error("conv2d: bias size");
    const int ho = (h + 2 * pad - kh) / stride + 1;
    const int wo = (wd + 2 * pad - kw) / stride + 1;
    if (ho < 1 || wo < 1) throw shape_error("conv2d: empty output");

    auto x_at = [&](const Tensor& t, int c, int y, int xx) -> real {
        return t.v[(static_cast<std::size_t>(c) * h + y) * wd + xx];
    };
    auto w_at = [&](const Tensor& t, int co, int ci, int i, int j) -> real {
        return t.v[((static_cast<std::size_t>(co) * cin + ci) * kh + i) * kw + j];
    };

    Tensor out({cout, ho, wo});
    for (int co = 0; co < cout; ++co) {
        for (int oy = 0; oy < ho; ++oy) {
            for (int ox = 0; ox < wo; ++ox) {
                real acc = b.val().v[co];
                const int y0 = oy * stride - pad;
                const int x0 = ox * stride - pad;
                for (int ci = 0; ci < cin; ++ci) {
                    for (int i = 0; i < kh; ++i) {
                        const int y = y0 + i;
                        if (y < 0 || y >= h) continue;
                        for (int j = 0; j < kw; ++j) {
                            const int xx = x0 + j;
                            if (xx < 0 || xx >= wd) continue;
                            acc += x_at(x.val(), ci, y, xx) * w_at(w.val(), co, ci, i, j);
                        }
                    }
                }
                out.v[(static_cast<std::size_t>(co) * ho + oy) * wo + ox] = acc;
            }
        }
    }

    Tensor xv = x.val(), wv = w.val();
    return make_node(std::move(out), {x.node(), w.node(), b.node()},
                     [xv = std::move(xv), wv = std::move(wv), cin, h, wd, cout, kh, kw, ho, wo,
                      stride, pad](Node& n) {
        NodePtr& px = n.parents[0];
        NodePtr& pw = n.parents[1];
        NodePtr& pb = n.parents[2];
        if (px->needs_grad) px->ensure_grad();
        if (pw->needs_grad) pw->ensure_grad();
        if (pb->needs_grad) pb->ensure_grad();
        for (int co = 0; co < cout; ++co) {
            for (int oy = 0; oy < ho; ++oy) {
                for (int ox = 0; ox < wo; ++ox) {
                    const real g =
                        n.grad.v[(static_cast<std::size_t>(co) * ho + oy) * wo + ox];
                    if (g == 0.0) continue;
                    if (pb->needs_grad) pb->grad.v[co] += g;
                    const int y0 = oy * stride - pad;
                    const int x0 = ox * stride - pad;
                    for (int ci = 0; ci < cin; ++ci) {
                        for (int i = 0; i < kh; ++i) {
                            const int y = y0 + i;
                            if (y < 0 || y >= h) continue;
                            for (int j = 0; j < kw; ++j) {
                                const int xx = x0 + j;
                                if (xx < 0 || xx >= wd) continue;
                                const std::size_t xi =
                                    (static_cast<std::size_t>(ci) * h + y) * wd + xx;
                                const std::size_t wi =
                                    ((static_cast<std::size_t>(co) * cin + ci) * kh + i) * kw + j;
                                if (pw->needs_grad) pw->grad.v[wi] += g * xv.v[xi];
                                if (px->needs_grad) px->grad.v[xi] += g * wv.v[wi];
                            }
                        }
                    }
                }
            }
        }
    });
}

Var patchify(const Var& img, int patch) {
    if (img.val().ndim() != 3) throw shape_error("patchify: input must be [C,H,W]");
    const int c = img.val().dim(0), h = img.val().dim(1), w = img.val().dim(2);
    if (h % patch != 0 || w % patch != 0)
        throw shape_error("patchify: image " + std::to_string(h) + "x" + std::to_string(w) +
                          " not divisible by patch " + std::to_string(patch));
    const int gh = h / patch, gw = w / patch;
    const int n = gh * gw, d = c * patch * patch;
    Tensor out({n, d});
    for (int gy = 0; gy < gh; ++gy)
        for (int gx = 0; gx < gw; ++gx) {
            real* row = out.data() + static_cast<std::size_t>(gy * gw + gx) * d;
            int f = 0;
            for (int ci = 0; ci < c; ++ci)
                for (int py = 0; py < patch; ++py)
                    for (int px = 0; px < patch; ++px)
                        row[f++] = img.val().v[(static_cast<std::size_t>(ci) * h +
                                                gy * patch + py) * w + gx * patch + px];
        }
    return make_node(std::move(out), {img.node()}, [c, h, w, gh, gw, patch, d](Node& nd) {
        NodePtr& p = nd.parents[0];
        if (!p->needs_grad) return;
        p->ensure_grad();
        for (int gy = 0; gy < gh; ++gy)
            for (int gx = 0; gx < gw; ++gx) {
                const real* row = nd.grad.data() + static_cast<std::size_t>(gy * gw + gx) * d;
                int f = 0;
                for (int ci = 0; ci < c; ++ci)
                    for (int py = 0; py < patch; ++py)
                        for (int px = 0; px < patch; ++px)
                            p->grad.v[(static_cast<std::size_t>(ci) * h + gy * patch + py) * w +
                                      gx * patch + px] += row[f++];
            }
    });
}

Var unpatchify(const Var& tokens, int channels, int grid_h, int grid_w, int patch) {
    const int n = tokens.val().rows(), d = tokens.val().cols();
    if (n != grid_h * grid_w)
        throw shape_error("unpatchify: token count " + std::to_string(n) + " vs grid " +
                          std::to_string(grid_h) + "x" + std::to_string(grid_w));
    if (d != channels * patch * patch)
        throw shape_error("unpatchify: token dim " + std::to_string(d) + " vs " +
                          std::to_string(channels * patch * patch));
    const int h = grid_h * patch, w = grid_w * patch;
    Tensor out({channels, h, w});
    for (int gy = 0; gy < grid_h; ++gy)
        for (int gx = 0; gx < grid_w; ++gx) {
            const real* row = tokens.val().data() + static_cast<std::size_t>(gy * grid_w + gx) * d;
            int f = 0;
            for (int ci = 0; ci < channels; ++ci)
                for (int py = 0; py < patch; ++py)
                    for (int px = 0; px < patch; ++px)
                        out.v[(static_cast<std::size_t>(ci) * h + gy * patch + py) * w +
                              gx * patch + px] = row[f++];
        }
    return make_node(std::move(out), {tokens.node()},
                     [channels, grid_h, grid_w, patch, d, h, w](Node& nd) {
        NodePtr& p = nd.parents[0];
        if (!p->needs_grad) return;
        p->ensure_grad();
        for (int gy = 0; gy < grid_h; ++gy)
            for (int gx = 0; gx < grid_w; ++gx) {
                real* row = p->grad.data() + static_cast<std::size_t>(gy * grid_w + gx) * d;
                int f = 0;
                for (int ci = 0; ci < channels; ++ci)
                    for (int py = 0; py < patch; ++py)
                        for (int px = 0; px < patch; ++px)
                            row[f++] += nd.grad.v[(static_cast<std::size_t>(ci) * h +
                                                   gy * patch + py) * w + gx * patch + px];
            }
    });
}

} // namespace fae::ad
