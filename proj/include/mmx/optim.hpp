#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "mmx/errors.hpp"

namespace mmx {

/// lr0 * gamma^epoch.
inline double lr_at(std::size_t epoch, double lr0, double gamma) {
    if (!(gamma > 0.0 && gamma <= 1.0)) {
        throw DomainError("lr_gamma must lie in (0, 1]");
    }
    return lr0 * std::pow(gamma, static_cast<double>(epoch));
}

struct AdamWHyper {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

/// One named parameter tensor with its gradient.
struct ParamSlot {
    std::string name;
    std::span<double> value;
    std::span<const double> grad;
    bool decay = true;
};

struct AdamWState {
    AdamWHyper hyper;
    std::vector<std::vector<double>> m;
    std::vector<std::vector<double>> v;
    std::uint64_t t = 0;

    bool operator==(const AdamWState&) const = default;
};

/// Decoupled weight decay (theta -= lr * wd * theta) followed by the
/// bias-corrected Adam update. Gradients are checked before anything is modified.
inline void adamw_step(std::span<const ParamSlot> slots, AdamWState& state, double lr,
                       double weight_decay) {
    if (state.m.empty()) {
        for (const auto& s : slots) {
            state.m.emplace_back(s.value.size(), 0.0);
            state.v.emplace_back(s.value.size(), 0.0);
        }
    }
    if (state.m.size() != slots.size()) {
        throw ShapeError("optimizer state has " + std::to_string(state.m.size()) +
                         " tensors, got " + std::to_string(slots.size()));
    }
    for (std::size_t k = 0; k < slots.size(); ++k) {
        const auto& s = slots[k];
        if (s.grad.size() != s.value.size() || state.m[k].size() != s.value.size()) {
            throw ShapeError("optimizer shape mismatch in tensor " + s.name);
        }
        for (std::size_t e = 0; e < s.grad.size(); ++e) {
            if (!std::isfinite(s.grad[e])) {
                throw NumericError(state.t + 1, s.name, e, "non-finite gradient");
            }
        }
    }

    state.t += 1;
    const auto& hp = state.hyper;
    const double bc1 = 1.0 - std::pow(hp.beta1, static_cast<double>(state.t));
    const double bc2 = 1.0 - std::pow(hp.beta2, static_cast<double>(state.t));
    for (std::size_t k = 0; k < slots.size(); ++k) {
        const auto& s = slots[k];
        auto& m = state.m[k];
        auto& v = state.v[k];
        for (std::size_t e = 0; e < s.value.size(); ++e) {
            double theta = s.value[e];
            if (s.decay) theta -= lr * weight_decay * theta;
            const double g = s.grad[e];
            m[e] = hp.beta1 * m[e] + (1.0 - hp.beta1) * g;
            v[e] = hp.beta2 * v[e] + (1.0 - hp.beta2) * g * g;
            const double m_hat = m[e] / bc1;
            const double v_hat = v[e] / bc2;
            s.value[e] = theta - lr * m_hat / (std::sqrt(v_hat) + hp.eps);
        }
    }
}

} // namespace mmx
