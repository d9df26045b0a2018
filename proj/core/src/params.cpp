#include "fae/params.hpp"

#include <cmath>
#include <memory>

#include "fae/common.hpp"

namespace fae {

std::size_t total_param_count(const std::vector<ParamSpec>& specs) {
    std::size_t n = 0;
    for (const auto& s : specs) n += shape_numel(s.shape);
    return n;
}

ParamTensor& ParamStore::add(const std::string& name, Tensor value, bool requires_grad) {
    if (index_.count(name)) throw config_error("duplicate parameter name: " + name);
    auto p = std::make_unique<ParamTensor>();
    p->name = name;
    p->value = std::move(value);
    p->requires_grad = requires_grad;
    index_.emplace(name, params_.size());
    params_.push_back(std::move(p));
    return *params_.back();
}

ParamTensor& ParamStore::get(const std::string& name) {
    auto it = index_.find(name);
    if (it == index_.end()) throw config_error("unknown parameter: " + name);
    return *params_[it->second];
}

const ParamTensor& ParamStore::get(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw config_error("unknown parameter: " + name);
    return *params_[it->second];
}

std::size_t ParamStore::total_values() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += p->value.numel();
    return n;
}

void ParamStore::init_from_specs(const std::vector<ParamSpec>& specs, const Rng& rng,
                                 bool requires_grad) {
    for (const auto& s : specs) {
        Tensor t(s.shape);
        Rng sr = rng.stream(s.name);
        switch (s.init) {
            case Init::Zero:
                break;
            case Init::One:
                t.fill(1.0);
                break;
            case Init::Normal02:
                sr.fill_normal(t, 0.0, 0.02);
                break;
            case Init::ScaledXavier: {
                const int fan_in = s.shape.size() >= 2 ? s.shape[0] : static_cast<int>(t.numel());
                sr.fill_normal(t, 0.0, 1.0 / std::sqrt(static_cast<real>(fan_in)));
                break;
            }
        }
        add(s.name, std::move(t), requires_grad);
    }
}

void ParamStore::freeze() {
    for (auto& p : params_) p->requires_grad = false;
}

Tensor ParamStore::pack() const {
    Tensor flat({static_cast<int>(total_values())});
    std::size_t off = 0;
    for (const auto& p : params_) {
        std::copy(p->value.v.begin(), p->value.v.end(), flat.v.begin() + off);
        off += p->value.numel();
    }
    return flat;
}

void ParamStore::unpack(const Tensor& flat) {
    if (flat.numel() != total_values())
        throw shape_error("ParamStore::unpack: size mismatch");
    std::size_t off = 0;
    for (auto& p : params_) {
        std::copy(flat.v.begin() + off, flat.v.begin() + off + p->value.numel(),
                  p->value.v.begin());
        off += p->value.numel();
    }
}

real lr_at_step(const OptimConfig& cfg, int step) {
    real lr = cfg.lr;
    if (cfg.warmup_steps > 0 && step < cfg.warmup_steps)
        return lr * static_cast<real>(step + 1) / static_cast<real>(cfg.warmup_steps);
    if (cfg.schedule == LrSchedule::Cosine && cfg.total_steps > cfg.warmup_steps) {
        const real progress = static_cast<real>(step - cfg.warmup_steps) /
                              static_cast<real>(cfg.total_steps - cfg.warmup_steps);
        const real clamped = std::min<real>(1.0, std::max<real>(0.0, progress));
        return lr * 0.5 * (1.0 + std::cos(M_PI * clamped));
    }
    return lr;
}

AdamW::AdamW(ParamStore* params, OptimConfig cfg) : params_(params), cfg_(cfg) {}

void AdamW::step(const GradMap& grads) {
    ++step_;
    const real lr = lr_at_step(cfg_, step_ - 1);
    const real bc1 = 1.0 - std::pow(cfg_.beta1, step_);
    const real bc2 = 1.0 - std::pow(cfg_.beta2, step_);
    for (std::size_t i = 0; i < params_->size(); ++i) {
        ParamTensor& p = params_->at(i);
        if (!p.requires_grad) continue;
        auto git = grads.find(p.name);
        if (git == grads.end()) continue;
        const Tensor& g = git->second;
        Tensor& m = m_.try_emplace(p.name, Tensor(p.value.shape)).first->second;
        Tensor& v = v_.try_emplace(p.name, Tensor(p.value.shape)).first->second;
        for (std::size_t j = 0; j < p.value.numel(); ++j) {
            m.v[j] = cfg_.beta1 * m.v[j] + (1.0 - cfg_.beta1) * g.v[j];
            v.v[j] = cfg_.beta2 * v.v[j] + (1.0 - cfg_.beta2) * g.v[j] * g.v[j];
            const real mhat = m.v[j] / bc1;
            const real vhat = v.v[j] / bc2;
            p.value.v[j] -= lr * (mhat / (std::sqrt(vhat) + cfg_.eps) +
                                  cfg_.weight_decay * p.value.v[j]);
        }
    }
}

} // namespace fae
