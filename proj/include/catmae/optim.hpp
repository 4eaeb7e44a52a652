#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "catmae/error.hpp"
#include "catmae/model.hpp"
#include "catmae/tensor.hpp"

namespace catmae {

// Per-frame reconstruction loss scales for frames 2..N.
struct LossSpec {
    std::vector<double> scales;

    static LossSpec defaults_for(std::int64_t n_frames) {
        LossSpec s;
        s.scales.assign(static_cast<std::size_t>(n_frames - 1), 0.8);
        if (!s.scales.empty()) s.scales.back() = 1.0;
        return s;
    }

    void validate() const {
        for (double v : scales)
            if (!(v >= 0.0)) throw ConfigError("LossSpec: negative scale");
    }
};

template <typename T>
Tensor<T> total_loss(const ReconstructionBatch<T>& batch, const LossSpec& spec) {
    if (spec.scales.size() != batch.frame_losses.size())
        throw ConfigError("total_loss: " + std::to_string(spec.scales.size()) +
                          " scales for " + std::to_string(batch.frame_losses.size()) +
                          " reconstructed frames");
    spec.validate();
    Tensor<T> acc = scale(batch.frame_losses[0], spec.scales[0]);
    for (std::size_t i = 1; i < spec.scales.size(); ++i)
        acc = add(acc, scale(batch.frame_losses[i], spec.scales[i]));
    return acc;
}

struct OptimizerConfig {
    double base_lr = 1e-4;
    double min_lr = 0.0;
    double beta1 = 0.9;
    double beta2 = 0.95;
    double weight_decay = 0.05;
    double eps = 1e-8;
    std::int64_t warmup_steps = 0;
    std::int64_t total_steps = 0;

    void validate() const {
        if (!(base_lr > 0.0) || min_lr < 0.0 || min_lr > base_lr)
            throw ConfigError("OptimizerConfig: bad learning rates");
        if (!(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0))
            throw ConfigError("OptimizerConfig: betas must be in [0,1)");
        if (weight_decay < 0.0) throw ConfigError("OptimizerConfig: negative weight decay");
        if (total_steps < 1 || warmup_steps < 0 || warmup_steps > total_steps)
            throw ConfigError("OptimizerConfig: bad step counts");
    }
};

// Linear warmup from 0 over warmup_steps, then cosine decay to min_lr at
// total_steps. Steps are 1-based: the first optimizer step uses lr_at(1).
inline double lr_at(std::int64_t step, const OptimizerConfig& cfg) {
    if (cfg.warmup_steps > 0 && step <= cfg.warmup_steps)
        return cfg.base_lr * static_cast<double>(step) / static_cast<double>(cfg.warmup_steps);
    if (cfg.total_steps == cfg.warmup_steps) return cfg.base_lr;
    const double progress = static_cast<double>(step - cfg.warmup_steps) /
                            static_cast<double>(cfg.total_steps - cfg.warmup_steps);
    return cfg.min_lr + 0.5 * (cfg.base_lr - cfg.min_lr) * (1.0 + std::cos(M_PI * progress));
}

// One bias-corrected AdamW update over a flat array. `g` may be null (treated
// as all-zero), `step` is the 1-based count including this update, and decay
// is decoupled (applied to the parameter directly, before the moment step).
template <typename T>
void adamw_update(T* p, const T* g, T* m, T* v, std::size_t n, std::int64_t step,
                  const OptimizerConfig& cfg, double lr, bool decay, const std::string& name) {
    const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(step));
    const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(step));
    for (std::size_t i = 0; i < n; ++i) {
        const double gi = g == nullptr ? 0.0 : static_cast<double>(g[i]);
        if (!std::isfinite(gi))
            throw NumericError("AdamW: non-finite gradient in " + name + "[" +
                               std::to_string(i) + "]");
        const double mi = cfg.beta1 * static_cast<double>(m[i]) + (1.0 - cfg.beta1) * gi;
        const double vi = cfg.beta2 * static_cast<double>(v[i]) + (1.0 - cfg.beta2) * gi * gi;
        m[i] = static_cast<T>(mi);
        v[i] = static_cast<T>(vi);
        double pn = static_cast<double>(p[i]);
        if (decay && cfg.weight_decay > 0.0) pn -= lr * cfg.weight_decay * pn;
        pn -= lr * (mi / bc1) / (std::sqrt(vi / bc2) + cfg.eps);
        if (!std::isfinite(pn))
            throw NumericError("AdamW: non-finite parameter " + name + "[" + std::to_string(i) +
                               "] after step " + std::to_string(step));
        p[i] = static_cast<T>(pn);
    }
}

// Decoupled-weight-decay Adam with bias-corrected moments. Decay skips the
// parameters registered with decay=false (norms, biases, tokens).
template <typename T>
struct AdamW {
    OptimizerConfig cfg;
    std::int64_t step = 0;
    std::vector<std::vector<T>> m, v;  // parallel to params.entries

    void init(const ModelParams<T>& params) {
        cfg.validate();
        step = 0;
        m.clear();
        v.clear();
        for (const auto& e : params.entries) {
            m.emplace_back(e.tensor.values().size(), T(0));
            v.emplace_back(e.tensor.values().size(), T(0));
        }
    }

    void apply(ModelParams<T>& params, double lr) {
        if (m.size() != params.entries.size())
            throw ConfigError("AdamW: optimizer not initialized for this parameter set");
        ++step;
        for (std::size_t pi = 0; pi < params.entries.size(); ++pi) {
            auto& e = params.entries[pi];
            adamw_update(e.tensor.data(), e.tensor.has_grad() ? e.tensor.grad().data() : nullptr,
                         m[pi].data(), v[pi].data(), e.tensor.values().size(), step, cfg, lr,
                         e.decay, e.name);
        }
    }
};

}  // namespace catmae
