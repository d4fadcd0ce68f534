#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "octvae/tensor.hpp"

namespace octvae::ops {

// Elementwise, same shape.
template <typename T> Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);

template <typename T> Tensor<T> add_scalar(const Tensor<T>& a, T s);
template <typename T> Tensor<T> scale(const Tensor<T>& a, T s);
template <typename T> Tensor<T> square(const Tensor<T>& a);
template <typename T> Tensor<T> exp(const Tensor<T>& a);
/// Natural log; inputs must be positive.
template <typename T> Tensor<T> log(const Tensor<T>& a);
template <typename T> Tensor<T> relu(const Tensor<T>& a);
template <typename T> Tensor<T> sigmoid(const Tensor<T>& a);

/// Sum / mean of all elements, shape [1].
template <typename T> Tensor<T> sum(const Tensor<T>& a);
template <typename T> Tensor<T> mean(const Tensor<T>& a);

template <typename T> Tensor<T> reshape(const Tensor<T>& a, Shape shape);

/// Input BxCxHxW, kernel OxCxKhxKw, optional bias O (pass an undefined tensor to omit).
template <typename T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& kernel, const Tensor<T>& bias, std::size_t stride,
                 std::size_t padding);

/// Input BxCxHxW, kernel CxOxKhxKw; output side (H-1)*stride - 2*padding + Kh. Adjoint of conv2d.
template <typename T>
Tensor<T> transposed_conv2d(const Tensor<T>& input, const Tensor<T>& kernel, const Tensor<T>& bias,
                            std::size_t stride, std::size_t padding);

/// Input BxF_in, weight F_outxF_in, optional bias F_out.
template <typename T>
Tensor<T> linear(const Tensor<T>& input, const Tensor<T>& weight, const Tensor<T>& bias);

template <typename T>
Tensor<T> max_pool2d(const Tensor<T>& input, std::size_t kernel, std::size_t stride, std::size_t padding);

/// BxCxHxW -> BxC.
template <typename T> Tensor<T> global_avg_pool(const Tensor<T>& input);

/// Nearest-neighbour upsampling of BxCxHxW by an integer factor.
template <typename T> Tensor<T> upsample_nearest(const Tensor<T>& input, std::size_t factor);

template <typename T>
struct BatchNormStats {
    std::vector<T> running_mean;
    std::vector<T> running_var;
};

/// Per-channel batch normalization of BxCxHxW (or BxC).
///
/// Training mode normalizes with biased batch statistics and folds the
/// unbiased variance into `stats` with the given momentum. Evaluation mode
/// uses `stats` and leaves it untouched.
template <typename T>
Tensor<T> batch_norm(const Tensor<T>& input, const Tensor<T>& gamma, const Tensor<T>& beta, BatchNormStats<T>& stats,
                     bool training, T momentum = T(0.1), T epsilon = T(1e-5));

/// Row-wise over the last axis of a BxK tensor.
template <typename T> Tensor<T> softmax(const Tensor<T>& logits);
template <typename T> Tensor<T> log_softmax(const Tensor<T>& logits);

/// Concatenation along axis 1 of tensors with equal leading dimension.
template <typename T> Tensor<T> concat(const std::vector<Tensor<T>>& parts);

/// out[b] = input[b, index[b]] for a BxK input; shape [B].
template <typename T> Tensor<T> pick(const Tensor<T>& input, std::span<const std::size_t> index);

} // namespace octvae::ops
