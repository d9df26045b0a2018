#include "fae/rng.hpp"

#include <cmath>

namespace fae {

static inline std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

std::uint64_t Rng::derive_key(std::uint64_t seed, const std::string& stream_name) {
    // FNV-1a over the name folded into the seed, then mixed.
    std::uint64_t h = 1469598103934665603ULL ^ seed;
    for (unsigned char c : stream_name) {
        h ^= c;
        h *= 1099511628211ULL;
    }
    return splitmix64(h);
}

Rng Rng::stream(std::uint64_t salt) const {
    return Rng(splitmix64(key_ ^ (salt * 0x9e3779b97f4a7c15ULL + 0x2545f4914f6cdd1dULL)));
}

std::uint64_t Rng::next_u64() {
    return splitmix64(key_ + 0x9e3779b97f4a7c15ULL * ++counter_);
}

real Rng::uniform() {
    // 53 mantissa bits -> [0, 1)
    return static_cast<real>(next_u64() >> 11) * 0x1.0p-53;
}

real Rng::uniform(real lo, real hi) {
    return lo + (hi - lo) * uniform();
}

real Rng::normal() {
    if (have_spare_) {
        have_spare_ = false;
        return spare_;
    }
    // Box-Muller; u1 kept away from zero.
    real u1 = 0.0;
    do {
        u1 = uniform();
    } while (u1 <= 0.0);
    const real u2 = uniform();
    const real r = std::sqrt(-2.0 * std::log(u1));
    const real theta = 2.0 * M_PI * u2;
    spare_ = r * std::sin(theta);
    have_spare_ = true;
    return r * std::cos(theta);
}

std::uint64_t Rng::uniform_index(std::uint64_t n) {
    if (n == 0) return 0;
    // Rejection sampling to avoid modulo bias.
    const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
    std::uint64_t x;
    do {
        x = next_u64();
    } while (x >= limit);
    return x % n;
}

void Rng::fill_normal(Tensor& t, real mean, real stddev) {
    for (real& x : t.v) x = mean + stddev * normal();
}

void Rng::fill_uniform(Tensor& t, real lo, real hi) {
    for (real& x : t.v) x = uniform(lo, hi);
}

} // namespace fae
