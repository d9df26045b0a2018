#pragma once

#include <string>

#include "fae/params.hpp"

namespace fae {

// "FAEC" container: magic, version, config blob (canonical key=value text),
// named parameter tensors, optional optimizer moments, RNG state, trailing
// CRC32. Doubles are stored raw, so save/load round-trips bit-exactly.
struct Checkpoint {
    std::string config_text;
    ParamStore params;
    bool has_optimizer = false;
    std::uint64_t optimizer_step = 0;
    GradMap opt_m;
    GradMap opt_v;
    std::string rng_state;
};

void save_checkpoint(const std::string& path, const Checkpoint& ck, bool force = true);
Checkpoint load_checkpoint(const std::string& path);

// Convenience: snapshot the live training state.
Checkpoint make_checkpoint(const std::string& config_text, const ParamStore& params,
                           const AdamW* opt, const std::string& rng_state);
// Restores optimizer moments saved in `ck` into `opt`.
void restore_optimizer(const Checkpoint& ck, AdamW& opt);

} // namespace fae
