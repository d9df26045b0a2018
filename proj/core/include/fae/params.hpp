#pragma once

#include <cstdint>
#include <memory>
#include <string>
#include <unordered_map>
#include <vector>

#include "fae/rng.hpp"
#include "fae/tensor.hpp"

namespace fae {

// Weight initialization families.
enum class Init : std::uint8_t {
    Zero,
    One,
    Normal02,    // N(0, 0.02^2), transformer default
    ScaledXavier // N(0, 1/sqrt(fan_in))
};

// Declarative parameter layout. Modules describe their parameters as specs
// first so configurations can be sized (parameter-count checks on paper-scale
// configs) without allocating gigabytes.
struct ParamSpec {
    std::string name;
    Shape shape;
    Init init = Init::Normal02;
};

std::size_t total_param_count(const std::vector<ParamSpec>& specs);

struct ParamTensor {
    std::string name;
    Tensor value;
    bool requires_grad = true;
};

// Ordered, name-addressable parameter set. Insertion order is the canonical
// serialization order.
class ParamStore {
public:
    ParamTensor& add(const std::string& name, Tensor value, bool requires_grad = true);
    ParamTensor& get(const std::string& name);
    const ParamTensor& get(const std::string& name) const;
    bool has(const std::string& name) const { return index_.count(name) != 0; }

    std::size_t size() const { return params_.size(); }
    std::size_t total_values() const;
    ParamTensor& at(std::size_t i) { return *params_[i]; }
    const ParamTensor& at(std::size_t i) const { return *params_[i]; }

    // Materializes specs with deterministic per-name init streams.
    void init_from_specs(const std::vector<ParamSpec>& specs, const Rng& rng,
                         bool requires_grad = true);

    void freeze();  // clears requires_grad on every parameter

    // Flat packing for gradient checks.
    Tensor pack() const;
    void unpack(const Tensor& flat);

private:
    std::vector<std::unique_ptr<ParamTensor>> params_;
    std::unordered_map<std::string, std::size_t> index_;
};

using GradMap = std::unordered_map<std::string, Tensor>;

// Learning-rate schedules.
enum class LrSchedule : std::uint8_t { Constant, Cosine };

struct OptimConfig {
    real lr = 1e-4;
    real beta1 = 0.9;
    real beta2 = 0.999;
    real eps = 1e-8;
    real weight_decay = 0.0;
    LrSchedule schedule = LrSchedule::Cosine;
    int warmup_steps = 1000;
    int total_steps = 0;  // required for cosine decay
};

real lr_at_step(const OptimConfig& cfg, int step);

// Decoupled-weight-decay Adam over a ParamStore.
class AdamW {
public:
    AdamW() = default;
    AdamW(ParamStore* params, OptimConfig cfg);

    void step(const GradMap& grads);
    int step_count() const { return step_; }
    const OptimConfig& config() const { return cfg_; }

    // Checkpoint access to the moment buffers.
    std::unordered_map<std::string, Tensor>& moments1() { return m_; }
    std::unordered_map<std::string, Tensor>& moments2() { return v_; }
    void set_step_count(int s) { step_ = s; }

private:
    ParamStore* params_ = nullptr;
    OptimConfig cfg_;
    int step_ = 0;
    std::unordered_map<std::string, Tensor> m_;
    std::unordered_map<std::string, Tensor> v_;
};

} // namespace fae
