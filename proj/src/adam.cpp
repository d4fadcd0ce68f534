#include "octvae/adam.hpp"

#include <cmath>
#include <string>

#include "octvae/error.hpp"

namespace octvae {

template <typename T>
void adam_step(std::span<const std::span<T>> params, std::span<const std::span<const T>> grads, AdamState<T>& state,
               double learning_rate) {
    if (!(learning_rate > 0.0)) throw ContractViolation("adam_step: learning rate must be positive");
    if (params.size() != grads.size())
        throw ContractViolation("adam_step: " + std::to_string(params.size()) + " parameter blocks but " +
                                std::to_string(grads.size()) + " gradient blocks");
    const bool fresh = state.first_moment.empty() && state.second_moment.empty();
    if (!fresh && (state.first_moment.size() != params.size() || state.second_moment.size() != params.size()))
        throw ContractViolation("adam_step: optimizer state has " + std::to_string(state.first_moment.size()) +
                                " blocks, expected " + std::to_string(params.size()));
    for (std::size_t k = 0; k < params.size(); ++k) {
        if (grads[k].size() != params[k].size())
            throw ContractViolation("adam_step: gradient block " + std::to_string(k) + " has " +
                                    std::to_string(grads[k].size()) + " values, parameter has " +
                                    std::to_string(params[k].size()));
        if (!fresh && (state.first_moment[k].size() != params[k].size() ||
                       state.second_moment[k].size() != params[k].size()))
            throw ContractViolation("adam_step: moment block " + std::to_string(k) + " does not match parameter");
        for (std::size_t i = 0; i < grads[k].size(); ++i)
            if (!std::isfinite(static_cast<double>(grads[k][i])))
                throw NumericError("adam_step: non-finite gradient in block " + std::to_string(k) + " at index " +
                                   std::to_string(i) + "; step aborted");
    }
    if (fresh) {
        state.first_moment.resize(params.size());
        state.second_moment.resize(params.size());
        for (std::size_t k = 0; k < params.size(); ++k) {
            state.first_moment[k].assign(params[k].size(), T(0));
            state.second_moment[k].assign(params[k].size(), T(0));
        }
    }

    state.step_count += 1;
    const double t = static_cast<double>(state.step_count);
    const T b1 = static_cast<T>(state.beta1), b2 = static_cast<T>(state.beta2);
    const T correction1 = static_cast<T>(1.0 - std::pow(state.beta1, t));
    const T correction2 = static_cast<T>(1.0 - std::pow(state.beta2, t));
    const T lr = static_cast<T>(learning_rate), eps = static_cast<T>(state.epsilon);
    for (std::size_t k = 0; k < params.size(); ++k) {
        auto p = params[k];
        auto g = grads[k];
        auto& m = state.first_moment[k];
        auto& v = state.second_moment[k];
        for (std::size_t i = 0; i < p.size(); ++i) {
            m[i] = b1 * m[i] + (T(1) - b1) * g[i];
            v[i] = b2 * v[i] + (T(1) - b2) * g[i] * g[i];
            const T m_hat = m[i] / correction1;
            const T v_hat = v[i] / correction2;
            p[i] -= lr * m_hat / (std::sqrt(v_hat) + eps);
        }
    }
}

template void adam_step<float>(std::span<const std::span<float>>, std::span<const std::span<const float>>,
                               AdamState<float>&, double);
template void adam_step<double>(std::span<const std::span<double>>, std::span<const std::span<const double>>,
                                AdamState<double>&, double);

} // namespace octvae
