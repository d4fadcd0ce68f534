#pragma once

// Raw compute kernels on contiguous row-major buffers.
//
// Every kernel in `octvae::kernels` is OpenMP-parallel over independent
// output elements. Each output element is reduced in a fixed order that does
// not depend on the thread count, so results are bit-identical between
// single- and multi-threaded runs. `octvae::kernels::reference` holds naive
// serial loop versions of the same contracts; they exist for testing and
// benchmarking and are never used on the training path.

#include <cstddef>
#include <span>

namespace octvae::kernels {

struct ConvGeometry {
    std::size_t batch = 1;
    std::size_t in_channels = 1;
    std::size_t in_h = 1;
    std::size_t in_w = 1;
    std::size_t out_channels = 1;
    std::size_t kernel_h = 1;
    std::size_t kernel_w = 1;
    std::size_t stride = 1;
    std::size_t padding = 0;

    std::size_t out_h() const { return (in_h + 2 * padding - kernel_h) / stride + 1; }
    std::size_t out_w() const { return (in_w + 2 * padding - kernel_w) / stride + 1; }
    std::size_t input_size() const { return batch * in_channels * in_h * in_w; }
    std::size_t output_size() const { return batch * out_channels * out_h() * out_w(); }
    std::size_t weight_size() const { return out_channels * in_channels * kernel_h * kernel_w; }
};

/// C[MxN] += op(A) * B[KxN]; op(A) is A[MxK] or, if `transpose_a`, A[KxM]^T.
template <typename T>
void gemm_accumulate(std::size_t m, std::size_t n, std::size_t k, const T* a, bool transpose_a, const T* b, T* c);

/// out = cross-correlation(in, weight) + bias. `bias` may be empty.
template <typename T>
void conv2d_forward(const ConvGeometry& g, std::span<const T> in, std::span<const T> weight,
                    std::span<const T> bias, std::span<T> out);

/// grad_in += d out / d in applied to grad_out. Also the forward of a transposed convolution.
template <typename T>
void conv2d_backward_input(const ConvGeometry& g, std::span<const T> grad_out, std::span<const T> weight,
                           std::span<T> grad_in);

/// grad_weight += d out / d weight applied to grad_out.
template <typename T>
void conv2d_backward_weight(const ConvGeometry& g, std::span<const T> in, std::span<const T> grad_out,
                            std::span<T> grad_weight);

/// grad_bias[o] += sum over batch and space of grad_out.
template <typename T>
void conv2d_backward_bias(const ConvGeometry& g, std::span<const T> grad_out, std::span<T> grad_bias);

/// out[b, o] = bias[o] + sum_i weight[o, i] * in[b, i]. `bias` may be empty.
template <typename T>
void linear_forward(std::size_t batch, std::size_t in_features, std::size_t out_features, std::span<const T> in,
                    std::span<const T> weight, std::span<const T> bias, std::span<T> out);

/// grad_in += grad_out * weight; grad_weight += grad_out^T * in. Either target may be empty.
template <typename T>
void linear_backward(std::size_t batch, std::size_t in_features, std::size_t out_features, std::span<const T> in,
                     std::span<const T> weight, std::span<const T> grad_out, std::span<T> grad_in,
                     std::span<T> grad_weight);

namespace reference {

template <typename T>
void conv2d_forward(const ConvGeometry& g, std::span<const T> in, std::span<const T> weight,
                    std::span<const T> bias, std::span<T> out);
template <typename T>
void conv2d_backward_input(const ConvGeometry& g, std::span<const T> grad_out, std::span<const T> weight,
                           std::span<T> grad_in);
template <typename T>
void conv2d_backward_weight(const ConvGeometry& g, std::span<const T> in, std::span<const T> grad_out,
                            std::span<T> grad_weight);
template <typename T>
void linear_forward(std::size_t batch, std::size_t in_features, std::size_t out_features, std::span<const T> in,
                    std::span<const T> weight, std::span<const T> bias, std::span<T> out);

} // namespace reference

/// Number of worker threads the parallel kernels will use.
int thread_count();
void set_thread_count(int threads);

} // namespace octvae::kernels
