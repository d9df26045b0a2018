#include "fae/gradcheck.hpp"

#include <cmath>

#include "fae/params.hpp"

namespace fae {

GradCheckResult grad_check(const ScalarFn& f, const Tensor& point, real eps) {
    if (eps < 1e-7 || eps > 1e-3)
        throw usage_error("grad_check: eps must lie in [1e-7, 1e-3]");

    ad::Var leaf = ad::input(point);
    ad::Var out = f(leaf);
    if (out.val().numel() != 1) throw shape_error("grad_check: map must be scalar-valued");
    ad::backward(out);
    Tensor analytic = leaf.grad();
    if (analytic.numel() == 0) analytic = Tensor(point.shape);
    if (!analytic.all_finite()) throw numeric_error("grad_check: non-finite gradient");

    auto eval = [&](const Tensor& p) -> real {
        ad::Var c = ad::constant(p);
        ad::Var y = f(c);
        return y.val().v[0];
    };

    GradCheckResult res;
    Tensor probe = point;
    for (std::size_t i = 0; i < point.numel(); ++i) {
        const real orig = probe.v[i];
        probe.v[i] = orig + eps;
        const real fp = eval(probe);
        probe.v[i] = orig - eps;
        const real fm = eval(probe);
        probe.v[i] = orig;
        const real fd = (fp - fm) / (2.0 * eps);
        if (!std::isfinite(fd)) throw numeric_error("grad_check: non-finite finite-difference");
        const real a = analytic.v[i];
        const real denom = std::max({std::abs(a), std::abs(fd), static_cast<real>(1e-8)});
        const real rel = std::abs(a - fd) / denom;
        if (rel > res.max_rel_err) {
            res.max_rel_err = rel;
            res.worst_index = i;
            res.analytic_at_worst = a;
            res.fd_at_worst = fd;
        }
    }
    return res;
}

GradCheckResult grad_check_params(const ModuleScalarFn& f, ParamStore& store, real eps) {
    if (eps < 1e-7 || eps > 1e-3)
        throw usage_error("grad_check: eps must lie in [1e-7, 1e-3]");

    GradMap analytic;
    {
        ad::Autograd ctx;
        ad::Var out = f(ctx);
        if (out.val().numel() != 1)
            throw shape_error("grad_check_params: map must be scalar-valued");
        ad::backward(out);
        ctx.collect(analytic);
    }

    auto eval = [&]() {
        ad::Autograd ctx;
        return f(ctx).val().v[0];
    };

    GradCheckResult res;
    std::size_t coord = 0;
    for (std::size_t pi = 0; pi < store.size(); ++pi) {
        ParamTensor& p = store.at(pi);
        if (!p.requires_grad) continue;
        auto it = analytic.find(p.name);
        const Tensor* g = it != analytic.end() ? &it->second : nullptr;
        for (std::size_t j = 0; j < p.value.numel(); ++j, ++coord) {
            const real orig = p.value.v[j];
            p.value.v[j] = orig + eps;
            const real fp = eval();
            p.value.v[j] = orig - eps;
            const real fm = eval();
            p.value.v[j] = orig;
            const real fd = (fp - fm) / (2.0 * eps);
            const real a = g ? g->v[j] : 0.0;
            if (!std::isfinite(a) || !std::isfinite(fd))
                throw numeric_error("grad_check_params: non-finite gradient at " + p.name);
            const real denom = std::max({std::abs(a), std::abs(fd), static_cast<real>(1e-8)});
            const real rel = std::abs(a - fd) / denom;
            if (rel > res.max_rel_err) {
                res.max_rel_err = rel;
                res.worst_index = coord;
                res.analytic_at_worst = a;
                res.fd_at_worst = fd;
            }
        }
    }
    return res;
}

GradCheckResult grad_check_vector(const VectorFn& f, const Tensor& point, Rng rng, real eps) {
    // Probe the output size once, then freeze the functional.
    Tensor probe_out;
    {
        ad::Var c = ad::constant(point);
        probe_out = f(c).val();
    }
    Tensor w(probe_out.shape);
    rng.fill_normal(w);
    ScalarFn scalar = [&f, w](const ad::Var& p) {
        ad::Var y = f(p);
        return ad::sum_all(ad::mul(y, ad::constant(w)));
    };
    return grad_check(scalar, point, eps);
}

} // namespace fae
