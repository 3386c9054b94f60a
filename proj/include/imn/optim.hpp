#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "imn/errors.hpp"
#include "imn/model.hpp"

namespace imn {

struct AdamConfig {
    double learning_rate = 0.001;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

// First/second moment accumulators, one pair per trainable array in
// collect_arrays order.
template <typename T>
struct AdamState {
    std::vector<std::vector<T>> m, v;
    std::uint64_t step = 0;
};

template <typename T>
AdamState<T> init_adam(const ModelConfig& cfg, ModelParams<T>& params) {
    AdamState<T> state;
    for (const auto& ref : collect_arrays(cfg, params)) {
        if (!ref.trainable) continue;
        state.m.emplace_back(ref.values->size(), T(0));
        state.v.emplace_back(ref.values->size(), T(0));
    }
    return state;
}

// One adaptive-moment update with bias correction. Aborts (and leaves both
// parameters and state untouched) if any gradient is non-finite.
template <typename T>
void adam_step(const ModelConfig& cfg, ModelParams<T>& params, ModelParams<T>& grads, AdamState<T>& state,
               const AdamConfig& ac) {
    auto param_refs = collect_arrays(cfg, params);
    auto grad_refs = collect_arrays(cfg, grads);

    for (std::size_t a = 0; a < grad_refs.size(); ++a) {
        if (!grad_refs[a].trainable) continue;
        for (const T g : *grad_refs[a].values)
            if (!std::isfinite(static_cast<double>(g)))
                throw numeric_error("adam_step: non-finite gradient in " + grad_refs[a].name);
    }

    state.step += 1;
    const double bc1 = 1.0 - std::pow(ac.beta1, static_cast<double>(state.step));
    const double bc2 = 1.0 - std::pow(ac.beta2, static_cast<double>(state.step));

    std::size_t slot = 0;
    for (std::size_t a = 0; a < param_refs.size(); ++a) {
        if (!param_refs[a].trainable) continue;
        auto& p = *param_refs[a].values;
        const auto& g = *grad_refs[a].values;
        auto& m = state.m[slot];
        auto& v = state.v[slot];
        for (std::size_t i = 0; i < p.size(); ++i) {
            m[i] = static_cast<T>(ac.beta1 * m[i] + (1.0 - ac.beta1) * g[i]);
            v[i] = static_cast<T>(ac.beta2 * v[i] + (1.0 - ac.beta2) * static_cast<double>(g[i]) * g[i]);
            const double m_hat = m[i] / bc1;
            const double v_hat = v[i] / bc2;
            p[i] = static_cast<T>(p[i] - ac.learning_rate * m_hat / (std::sqrt(v_hat) + ac.eps));
        }
        ++slot;
    }
}

} // namespace imn
