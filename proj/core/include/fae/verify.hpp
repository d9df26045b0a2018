#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "fae/tensor.hpp"

namespace fae {

struct CheckResult {
    std::string name;
    bool pass = false;
    std::string detail;
};

// Finite-difference checks for every differentiable op and loss, `points`
// random points each, relative tolerance 1e-4 in double precision. Points are
// redrawn when a coordinate's analytic gradient sits below the finite-
// difference noise floor (structurally flat directions are not informative).
std::vector<CheckResult> run_gradient_suite(std::uint64_t seed, int points = 5);

// Interpolant inverse identities over n random triples, time-shift identity
// at s=1, and scale-1 guidance bit-identity on a random tiny model.
std::vector<CheckResult> run_interpolant_checks(std::uint64_t seed, int n_triples = 10000);

// Closed-form diagonal-Gaussian KL vs Monte-Carlo on random posteriors.
std::vector<CheckResult> run_kl_oracle_check(std::uint64_t seed, int n_posteriors = 20,
                                             int draws = 1000000);

// Analytic-velocity Gaussian flow: ODE and SDE samplers must reproduce the
// standard normal; zero-diffusion SDE must equal the ODE bit for bit.
std::vector<CheckResult> run_sampler_oracle_checks(std::uint64_t seed, int n_samples = 10000,
                                                   int steps = 250, int dim = 4);

bool all_passed(const std::vector<CheckResult>& results);

} // namespace fae
