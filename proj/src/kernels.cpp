#include "octvae/kernels.hpp"

#include <algorithm>
#include <vector>

#include <omp.h>

namespace octvae::kernels {

namespace {

constexpr std::size_t kColumnBlock = 256;
// Weight-gradient partial sums are split over a fixed number of batch groups so
// the reduction order never depends on the thread count.
constexpr std::size_t kWeightGradGroups = 8;

template <typename T>
void gemm_rows(std::size_t row_begin, std::size_t row_end, std::size_t m, std::size_t n, std::size_t k,
               const T* a, bool transpose_a, const T* b, T* c) {
    auto a_at = [&](std::size_t i, std::size_t kk) { return transpose_a ? a[kk * m + i] : a[i * k + kk]; };
    for (std::size_t j0 = 0; j0 < n; j0 += kColumnBlock) {
        const std::size_t j1 = std::min(n, j0 + kColumnBlock);
        std::size_t i = row_begin;
        for (; i + 4 <= row_end; i += 4) {
            T* __restrict c0 = c + i * n;
            T* __restrict c1 = c0 + n;
            T* __restrict c2 = c1 + n;
            T* __restrict c3 = c2 + n;
            for (std::size_t kk = 0; kk < k; ++kk) {
                const T a0 = a_at(i, kk), a1 = a_at(i + 1, kk), a2 = a_at(i + 2, kk), a3 = a_at(i + 3, kk);
                const T* __restrict brow = b + kk * n;
                for (std::size_t j = j0; j < j1; ++j) {
                    const T bv = brow[j];
                    c0[j] += a0 * bv;
                    c1[j] += a1 * bv;
                    c2[j] += a2 * bv;
                    c3[j] += a3 * bv;
                }
            }
        }
        for (; i < row_end; ++i) {
            T* __restrict c0 = c + i * n;
            for (std::size_t kk = 0; kk < k; ++kk) {
                const T a0 = a_at(i, kk);
                const T* __restrict brow = b + kk * n;
                for (std::size_t j = j0; j < j1; ++j) c0[j] += a0 * brow[j];
            }
        }
    }
}

// Serial GEMM for use inside an enclosing parallel region.
template <typename T>
void gemm_serial(std::size_t m, std::size_t n, std::size_t k, const T* a, bool transpose_a, const T* b, T* c) {
    gemm_rows(0, m, m, n, k, a, transpose_a, b, c);
}

// col[(c*kh + i)*kw + j][oh*ow + ow_] for one image.
template <typename T>
void im2col(const ConvGeometry& g, const T* image, T* col) {
    const std::size_t oh = g.out_h(), ow = g.out_w();
    const long pad = static_cast<long>(g.padding);
    for (std::size_t c = 0; c < g.in_channels; ++c) {
        const T* plane = image + c * g.in_h * g.in_w;
        for (std::size_t ki = 0; ki < g.kernel_h; ++ki) {
            for (std::size_t kj = 0; kj < g.kernel_w; ++kj) {
                T* row = col + ((c * g.kernel_h + ki) * g.kernel_w + kj) * oh * ow;
                for (std::size_t y = 0; y < oh; ++y) {
                    const long iy = static_cast<long>(y * g.stride + ki) - pad;
                    T* dst = row + y * ow;
                    if (iy < 0 || iy >= static_cast<long>(g.in_h)) {
                        std::fill(dst, dst + ow, T(0));
                        continue;
                    }
                    const T* src = plane + iy * g.in_w;
                    for (std::size_t x = 0; x < ow; ++x) {
                        const long ix = static_cast<long>(x * g.stride + kj) - pad;
                        dst[x] = (ix < 0 || ix >= static_cast<long>(g.in_w)) ? T(0) : src[ix];
                    }
                }
            }
        }
    }
}

// Transposed layout of im2col: row[p][(c*kh + i)*kw + j].
template <typename T>
void im2row(const ConvGeometry& g, const T* image, T* rows) {
    const std::size_t oh = g.out_h(), ow = g.out_w();
    const std::size_t ckk = g.in_channels * g.kernel_h * g.kernel_w;
    const long pad = static_cast<long>(g.padding);
    for (std::size_t y = 0; y < oh; ++y) {
        for (std::size_t x = 0; x < ow; ++x) {
            T* dst = rows + (y * ow + x) * ckk;
            for (std::size_t c = 0; c < g.in_channels; ++c) {
                const T* plane = image + c * g.in_h * g.in_w;
                for (std::size_t ki = 0; ki < g.kernel_h; ++ki) {
                    const long iy = static_cast<long>(y * g.stride + ki) - pad;
                    for (std::size_t kj = 0; kj < g.kernel_w; ++kj) {
                        const long ix = static_cast<long>(x * g.stride + kj) - pad;
                        const bool inside = iy >= 0 && iy < static_cast<long>(g.in_h) && ix >= 0 &&
                                            ix < static_cast<long>(g.in_w);
                        *dst++ = inside ? plane[iy * g.in_w + ix] : T(0);
                    }
                }
            }
        }
    }
}

template <typename T>
void col2im_accumulate(const ConvGeometry& g, const T* col, T* image) {
    const std::size_t oh = g.out_h(), ow = g.out_w();
    const long pad = static_cast<long>(g.padding);
    for (std::size_t c = 0; c < g.in_channels; ++c) {
        T* plane = image + c * g.in_h * g.in_w;
        for (std::size_t ki = 0; ki < g.kernel_h; ++ki) {
            for (std::size_t kj = 0; kj < g.kernel_w; ++kj) {
                const T* row = col + ((c * g.kernel_h + ki) * g.kernel_w + kj) * oh * ow;
                for (std::size_t y = 0; y < oh; ++y) {
                    const long iy = static_cast<long>(y * g.stride + ki) - pad;
                    if (iy < 0 || iy >= static_cast<long>(g.in_h)) continue;
                    T* dst = plane + iy * g.in_w;
                    const T* src = row + y * ow;
                    for (std::size_t x = 0; x < ow; ++x) {
                        const long ix = static_cast<long>(x * g.stride + kj) - pad;
                        if (ix >= 0 && ix < static_cast<long>(g.in_w)) dst[ix] += src[x];
                    }
                }
            }
        }
    }
}

bool is_pointwise(const ConvGeometry& g) {
    return g.kernel_h == 1 && g.kernel_w == 1 && g.stride == 1 && g.padding == 0;
}

} // namespace

int thread_count() { return omp_get_max_threads(); }
void set_thread_count(int threads) { omp_set_num_threads(std::max(1, threads)); }

template <typename T>
void gemm_accumulate(std::size_t m, std::size_t n, std::size_t k, const T* a, bool transpose_a, const T* b, T* c) {
    const std::size_t blocks = (m + 3) / 4;
#pragma omp parallel for schedule(static) if (m * n * k > 32768)
    for (std::size_t blk = 0; blk < blocks; ++blk) {
        const std::size_t r0 = blk * 4;
        gemm_rows(r0, std::min(m, r0 + 4), m, n, k, a, transpose_a, b, c);
    }
}

template <typename T>
void conv2d_forward(const ConvGeometry& g, std::span<const T> in, std::span<const T> weight,
                    std::span<const T> bias, std::span<T> out) {
    const std::size_t positions = g.out_h() * g.out_w();
    const std::size_t ckk = g.in_channels * g.kernel_h * g.kernel_w;
    const std::size_t in_stride = g.in_channels * g.in_h * g.in_w;
    const std::size_t out_stride = g.out_channels * positions;
    const bool pointwise = is_pointwise(g);
#pragma omp parallel
    {
        std::vector<T> col(pointwise ? 0 : ckk * positions);
#pragma omp for schedule(static)
        for (std::size_t b = 0; b < g.batch; ++b) {
            T* dst = out.data() + b * out_stride;
            for (std::size_t o = 0; o < g.out_channels; ++o)
                std::fill(dst + o * positions, dst + (o + 1) * positions, bias.empty() ? T(0) : bias[o]);
            const T* src = in.data() + b * in_stride;
            if (!pointwise) {
                im2col(g, src, col.data());
                src = col.data();
            }
            gemm_serial(g.out_channels, positions, ckk, weight.data(), false, src, dst);
        }
    }
}

template <typename T>
void conv2d_backward_input(const ConvGeometry& g, std::span<const T> grad_out, std::span<const T> weight,
                           std::span<T> grad_in) {
    const std::size_t positions = g.out_h() * g.out_w();
    const std::size_t ckk = g.in_channels * g.kernel_h * g.kernel_w;
    const std::size_t in_stride = g.in_channels * g.in_h * g.in_w;
    const std::size_t out_stride = g.out_channels * positions;
    const bool pointwise = is_pointwise(g);
#pragma omp parallel
    {
        std::vector<T> col(ckk * positions);
#pragma omp for schedule(static)
        for (std::size_t b = 0; b < g.batch; ++b) {
            T* dst = grad_in.data() + b * in_stride;
            if (pointwise) {
                gemm_serial(ckk, positions, g.out_channels, weight.data(), true, grad_out.data() + b * out_stride,
                            dst);
                continue;
            }
            std::fill(col.begin(), col.end(), T(0));
            gemm_serial(ckk, positions, g.out_channels, weight.data(), true, grad_out.data() + b * out_stride,
                        col.data());
            col2im_accumulate(g, col.data(), dst);
        }
    }
}

template <typename T>
void conv2d_backward_weight(const ConvGeometry& g, std::span<const T> in, std::span<const T> grad_out,
                            std::span<T> grad_weight) {
    const std::size_t positions = g.out_h() * g.out_w();
    const std::size_t ckk = g.in_channels * g.kernel_h * g.kernel_w;
    const std::size_t in_stride = g.in_channels * g.in_h * g.in_w;
    const std::size_t out_stride = g.out_channels * positions;
    const std::size_t groups = std::min(g.batch, kWeightGradGroups);
    const std::size_t wsize = g.weight_size();
    std::vector<T> partial(groups * wsize, T(0));
#pragma omp parallel
    {
        std::vector<T> rows(positions * ckk);
#pragma omp for schedule(static)
        for (std::size_t grp = 0; grp < groups; ++grp) {
            const std::size_t b0 = grp * g.batch / groups;
            const std::size_t b1 = (grp + 1) * g.batch / groups;
            T* acc = partial.data() + grp * wsize;
            for (std::size_t b = b0; b < b1; ++b) {
                im2row(g, in.data() + b * in_stride, rows.data());
                gemm_serial(g.out_channels, ckk, positions, grad_out.data() + b * out_stride, false, rows.data(),
                            acc);
            }
        }
    }
#pragma omp parallel for schedule(static)
    for (std::size_t i = 0; i < wsize; ++i) {
        T sum = partial[i];
        for (std::size_t grp = 1; grp < groups; ++grp) sum += partial[grp * wsize + i];
        grad_weight[i] += sum;
    }
}

template <typename T>
void conv2d_backward_bias(const ConvGeometry& g, std::span<const T> grad_out, std::span<T> grad_bias) {
    const std::size_t positions = g.out_h() * g.out_w();
#pragma omp parallel for schedule(static)
    for (std::size_t o = 0; o < g.out_channels; ++o) {
        T sum = T(0);
        for (std::size_t b = 0; b < g.batch; ++b) {
            const T* src = grad_out.data() + (b * g.out_channels + o) * positions;
            for (std::size_t p = 0; p < positions; ++p) sum += src[p];
        }
        grad_bias[o] += sum;
    }
}

template <typename T>
void linear_forward(std::size_t batch, std::size_t in_features, std::size_t out_features, std::span<const T> in,
                    std::span<const T> weight, std::span<const T> bias, std::span<T> out) {
    std::vector<T> transposed(in_features * out_features);
    for (std::size_t o = 0; o < out_features; ++o)
        for (std::size_t i = 0; i < in_features; ++i) transposed[i * out_features + o] = weight[o * in_features + i];
    for (std::size_t b = 0; b < batch; ++b)
        for (std::size_t o = 0; o < out_features; ++o) out[b * out_features + o] = bias.empty() ? T(0) : bias[o];
    gemm_accumulate(batch, out_features, in_features, in.data(), false, transposed.data(), out.data());
}

template <typename T>
void linear_backward(std::size_t batch, std::size_t in_features, std::size_t out_features, std::span<const T> in,
                     std::span<const T> weight, std::span<const T> grad_out, std::span<T> grad_in,
                     std::span<T> grad_weight) {
    if (!grad_in.empty())
        gemm_accumulate(batch, in_features, out_features, grad_out.data(), false, weight.data(), grad_in.data());
    if (!grad_weight.empty())
        gemm_accumulate(out_features, in_features, batch, grad_out.data(), true, in.data(), grad_weight.data());
}

namespace reference {

template <typename T>
void conv2d_forward(const ConvGeometry& g, std::span<const T> in, std::span<const T> weight,
                    std::span<const T> bias, std::span<T> out) {
    const std::size_t oh = g.out_h(), ow = g.out_w();
    for (std::size_t b = 0; b < g.batch; ++b)
        for (std::size_t o = 0; o < g.out_channels; ++o)
            for (std::size_t y = 0; y < oh; ++y)
                for (std::size_t x = 0; x < ow; ++x) {
                    T sum = bias.empty() ? T(0) : bias[o];
                    for (std::size_t c = 0; c < g.in_channels; ++c)
                        for (std::size_t ki = 0; ki < g.kernel_h; ++ki)
                            for (std::size_t kj = 0; kj < g.kernel_w; ++kj) {
                                const long iy = static_cast<long>(y * g.stride + ki) - static_cast<long>(g.padding);
                                const long ix = static_cast<long>(x * g.stride + kj) - static_cast<long>(g.padding);
                                if (iy < 0 || ix < 0 || iy >= static_cast<long>(g.in_h) ||
                                    ix >= static_cast<long>(g.in_w))
                                    continue;
                                sum += weight[((o * g.in_channels + c) * g.kernel_h + ki) * g.kernel_w + kj] *
                                       in[((b * g.in_channels + c) * g.in_h + iy) * g.in_w + ix];
                            }
                    out[((b * g.out_channels + o) * oh + y) * ow + x] = sum;
                }
}

template <typename T>
void conv2d_backward_input(const ConvGeometry& g, std::span<const T> grad_out, std::span<const T> weight,
                           std::span<T> grad_in) {
    const std::size_t oh = g.out_h(), ow = g.out_w();
    for (std::size_t b = 0; b < g.batch; ++b)
        for (std::size_t o = 0; o < g.out_channels; ++o)
            for (std::size_t y = 0; y < oh; ++y)
                for (std::size_t x = 0; x < ow; ++x) {
                    const T go = grad_out[((b * g.out_channels + o) * oh + y) * ow + x];
                    for (std::size_t c = 0; c < g.in_channels; ++c)
                        for (std::size_t ki = 0; ki < g.kernel_h; ++ki)
                            for (std::size_t kj = 0; kj < g.kernel_w; ++kj) {
                                const long iy = static_cast<long>(y * g.stride + ki) - static_cast<long>(g.padding);
                                const long ix = static_cast<long>(x * g.stride + kj) - static_cast<long>(g.padding);
                                if (iy < 0 || ix < 0 || iy >= static_cast<long>(g.in_h) ||
                                    ix >= static_cast<long>(g.in_w))
                                    continue;
                                grad_in[((b * g.in_channels + c) * g.in_h + iy) * g.in_w + ix] +=
                                    go * weight[((o * g.in_channels + c) * g.kernel_h + ki) * g.kernel_w + kj];
                            }
                }
}

template <typename T>
void conv2d_backward_weight(const ConvGeometry& g, std::span<const T> in, std::span<const T> grad_out,
                            std::span<T> grad_weight) {
    const std::size_t oh = g.out_h(), ow = g.out_w();
    for (std::size_t b = 0; b < g.batch; ++b)
        for (std::size_t o = 0; o < g.out_channels; ++o)
            for (std::size_t y = 0; y < oh; ++y)
                for (std::size_t x = 0; x < ow; ++x) {
                    const T go = grad_out[((b * g.out_channels + o) * oh + y) * ow + x];
                    for (std::size_t c = 0; c < g.in_channels; ++c)
                        for (std::size_t ki = 0; ki < g.kernel_h; ++ki)
                            for (std::size_t kj = 0; kj < g.kernel_w; ++kj) {
                                const long iy = static_cast<long>(y * g.stride + ki) - static_cast<long>(g.padding);
                                const long ix = static_cast<long>(x * g.stride + kj) - static_cast<long>(g.padding);
                                if (iy < 0 || ix < 0 || iy >= static_cast<long>(g.in_h) ||
                                    ix >= static_cast<long>(g.in_w))
                                    continue;
                                grad_weight[((o * g.in_channels + c) * g.kernel_h + ki) * g.kernel_w + kj] +=
                                    go * in[((b * g.in_channels + c) * g.in_h + iy) * g.in_w + ix];
                            }
                }
}

template <typename T>
void linear_forward(std::size_t batch, std::size_t in_features, std::size_t out_features, std::span<const T> in,
                    std::span<const T> weight, std::span<const T> bias, std::span<T> out) {
    for (std::size_t b = 0; b < batch; ++b)
        for (std::size_t o = 0; o < out_features; ++o) {
            T sum = bias.empty() ? T(0) : bias[o];
            for (std::size_t i = 0; i < in_features; ++i) sum += weight[o * in_features + i] * in[b * in_features + i];
            out[b * out_features + o] = sum;
        }
}

} // namespace reference

#define OCTVAE_INSTANTIATE_KERNELS(T)                                                                               \
    template void gemm_accumulate<T>(std::size_t, std::size_t, std::size_t, const T*, bool, const T*, T*);          \
    template void conv2d_forward<T>(const ConvGeometry&, std::span<const T>, std::span<const T>, std::span<const T>, \
                                    std::span<T>);                                                                 \
    template void conv2d_backward_input<T>(const ConvGeometry&, std::span<const T>, std::span<const T>,             \
                                           std::span<T>);                                                          \
    template void conv2d_backward_weight<T>(const ConvGeometry&, std::span<const T>, std::span<const T>,            \
                                            std::span<T>);                                                         \
    template void conv2d_backward_bias<T>(const ConvGeometry&, std::span<const T>, std::span<T>);                   \
    template void linear_forward<T>(std::size_t, std::size_t, std::size_t, std::span<const T>, std::span<const T>,  \
                                    std::span<const T>, std::span<T>);                                             \
    template void linear_backward<T>(std::size_t, std::size_t, std::size_t, std::span<const T>, std::span<const T>, \
                                     std::span<const T>, std::span<T>, std::span<T>);                              \
    template void reference::conv2d_forward<T>(const ConvGeometry&, std::span<const T>, std::span<const T>,         \
                                               std::span<const T>, std::span<T>);                                  \
    template void reference::conv2d_backward_input<T>(const ConvGeometry&, std::span<const T>, std::span<const T>,  \
                                                      std::span<T>);                                               \
    template void reference::conv2d_backward_weight<T>(const ConvGeometry&, std::span<const T>, std::span<const T>, \
                                                       std::span<T>);                                              \
    template void reference::linear_forward<T>(std::size_t, std::size_t, std::size_t, std::span<const T>,           \
                                               std::span<const T>, std::span<const T>, std::span<T>);

OCTVAE_INSTANTIATE_KERNELS(float)
OCTVAE_INSTANTIATE_KERNELS(double)

} // namespace octvae::kernels
