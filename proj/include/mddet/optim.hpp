#pragma once

#include <span>
#include <stdexcept>
#include <vector>

namespace mddet {

// SGD with momentum and coupled weight decay:
//   v <- momentum*v + grad + weight_decay*param
//   param <- param - lr*v
struct OptimizerState {
    double learning_rate = 1e-3;
    double momentum = 0.9;
    double weight_decay = 5e-4;
    std::vector<std::vector<double>> velocity;  // zero-initialized, aligned with params

    void init(const std::vector<std::span<double>>& params) {
        velocity.clear();
        velocity.reserve(params.size());
        for (const auto& p : params) velocity.emplace_back(p.size(), 0.0);
    }
};

inline void sgd_update(const std::vector<std::span<double>>& params,
                       const std::vector<std::span<const double>>& grads,
                       OptimizerState& state) {
    if (params.size() != grads.size() || params.size() != state.velocity.size())
        throw std::invalid_argument("sgd_update: params/grads/state count mismatch");
    for (std::size_t i = 0; i < params.size(); ++i) {
        auto p = params[i];
        auto g = grads[i];
        auto& v = state.velocity[i];
        if (p.size() != g.size() || p.size() != v.size())
            throw std::invalid_argument("sgd_update: size mismatch in parameter block " +
                                        std::to_string(i));
        for (std::size_t j = 0; j < p.size(); ++j) {
            v[j] = state.momentum * v[j] + g[j] + state.weight_decay * p[j];
            p[j] -= state.learning_rate * v[j];
        }
    }
}

}  // namespace mddet
