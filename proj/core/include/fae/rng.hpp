#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "fae/tensor.hpp"

namespace fae {

// Deterministic counter-based generator. All randomness in a run flows from
// one master u64 seed through named substreams (rng.stream("fae/init")), so
// every stage is independently reproducible and results do not depend on
// call order elsewhere in the program.
//
// Core generator: splitmix64 applied to (stream_key, counter). Normals use
// Box-Muller on the raw uniform bits, never std::normal_distribution, so the
// byte stream is identical across standard libraries.
class Rng {
public:
    explicit Rng(std::uint64_t key = 0) : key_(key), counter_(0) {}

    static std::uint64_t derive_key(std::uint64_t seed, const std::string& stream_name);

    // Independent substream; safe to create in any order.
    Rng stream(const std::string& name) const { return Rng(derive_key(key_, name)); }
    Rng stream(std::uint64_t salt) const;

    std::uint64_t next_u64();
    // Uniform in [0, 1).
    real uniform();
    real uniform(real lo, real hi);
    // Standard normal via Box-Muller (two uniforms per pair, cached).
    real normal();
    // Integer in [0, n).
    std::uint64_t uniform_index(std::uint64_t n);

    void fill_normal(Tensor& t, real mean = 0.0, real stddev = 1.0);
    void fill_uniform(Tensor& t, real lo, real hi);

    std::uint64_t key() const { return key_; }
    std::uint64_t counter() const { return counter_; }
    void set_counter(std::uint64_t c) { counter_ = c; have_spare_ = false; }

private:
    std::uint64_t key_;
    std::uint64_t counter_;
    bool have_spare_ = false;
    real spare_ = 0.0;
};

} // namespace fae
