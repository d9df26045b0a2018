#pragma once

#include <functional>

#include "fae/autodiff.hpp"
#include "fae/rng.hpp"

namespace fae {

// Scalar-valued map over a flat point; the closure reshapes/splits the point
// internally and must return a scalar Var built from the given leaf.
using ScalarFn = std::function<ad::Var(const ad::Var& point)>;

struct GradCheckResult {
    real max_rel_err = 0.0;
    std::size_t worst_index = 0;
    real analytic_at_worst = 0.0;
    real fd_at_worst = 0.0;
};

// Central finite differences against the reverse-mode gradient.
// rel error per coordinate: |analytic - fd| / max(|analytic|, |fd|, 1e-8).
GradCheckResult grad_check(const ScalarFn& f, const Tensor& point, real eps = 1e-5);

// Composes a vector-valued map with a fixed random linear functional so it
// can be checked; the functional is drawn once from `rng`.
using VectorFn = std::function<ad::Var(const ad::Var& point)>;
GradCheckResult grad_check_vector(const VectorFn& f, const Tensor& point, Rng rng,
                                  real eps = 1e-5);

class ParamStore;

// Checks d(scalar)/d(parameters) through a module's own forward: reverse-mode
// via the builder's Autograd bindings vs central differences on the store
// values. The builder must read every checked weight through ctx.param.
using ModuleScalarFn = std::function<ad::Var(ad::Autograd& ctx)>;
GradCheckResult grad_check_params(const ModuleScalarFn& f, ParamStore& store, real eps = 1e-5);

} // namespace fae
