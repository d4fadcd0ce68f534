#pragma once

#include <cstdint>
#include <span>
#include <vector>

namespace octvae {

template <typename T>
struct AdamState {
    std::uint64_t step_count = 0;
    std::vector<std::vector<T>> first_moment;
    std::vector<std::vector<T>> second_moment;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
};

/// One bias-corrected Adam update of every parameter block.
///
/// Moments are allocated (zeroed) on the first call and must match the
/// parameter block sizes afterwards. All gradients are validated before any
/// value is written; a non-finite gradient throws NumericError naming the
/// block and leaves params and state unchanged. The update depends only on
/// the arguments, so equal inputs yield bit-identical outputs.
template <typename T>
void adam_step(std::span<const std::span<T>> params, std::span<const std::span<const T>> grads, AdamState<T>& state,
               double learning_rate);

} // namespace octvae
