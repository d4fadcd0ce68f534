#include "octvae/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "octvae/kernels.hpp"

namespace octvae::ops {

namespace {

template <typename T>
using Node = detail::Node<T>;

template <typename T>
bool needs_grad(const Node<T>& self, std::size_t i) {
    return self.inputs[i]->requires_grad;
}

template <typename T>
void require_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
    if (a.shape() != b.shape())
        throw ContractViolation(std::string(op) + ": shape mismatch " + shape_to_string(a.shape()) + " vs " +
                                shape_to_string(b.shape()));
}

template <typename T>
void require_rank(const Tensor<T>& a, std::size_t rank, const char* op, const char* what) {
    if (!a.defined()) throw ContractViolation(std::string(op) + ": " + what + " is undefined");
    if (a.rank() != rank)
        throw ContractViolation(std::string(op) + ": " + what + " must have rank " + std::to_string(rank) +
                                ", got " + shape_to_string(a.shape()));
}

// y = f(x) elementwise; dy/dx = df(x, y).
template <typename T, typename F, typename DF>
Tensor<T> unary(const Tensor<T>& a, F f, DF df) {
    auto x = a.values();
    std::vector<T> out(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) out[i] = f(x[i]);
    return record_op<T>(a.shape(), std::move(out), {a}, [df](Node<T>& self) {
        auto& in = *self.inputs[0];
        auto& gin = in.ensure_grad();
        for (std::size_t i = 0; i < gin.size(); ++i) gin[i] += self.grad[i] * df(in.value[i], self.value[i]);
    });
}

} // namespace

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
    require_same_shape(a, b, "add");
    auto x = a.values(), y = b.values();
    std::vector<T> out(x.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] + y[i];
    return record_op<T>(a.shape(), std::move(out), {a, b}, [](Node<T>& self) {
        for (std::size_t k = 0; k < 2; ++k) {
            if (!needs_grad(self, k)) continue;
            auto& g = self.inputs[k]->ensure_grad();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
        }
    });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
    require_same_shape(a, b, "sub");
    auto x = a.values(), y = b.values();
    std::vector<T> out(x.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] - y[i];
    return record_op<T>(a.shape(), std::move(out), {a, b}, [](Node<T>& self) {
        if (needs_grad(self, 0)) {
            auto& g = self.inputs[0]->ensure_grad();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
        }
        if (needs_grad(self, 1)) {
            auto& g = self.inputs[1]->ensure_grad();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] -= self.grad[i];
        }
    });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
    require_same_shape(a, b, "mul");
    auto x = a.values(), y = b.values();
    std::vector<T> out(x.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] * y[i];
    return record_op<T>(a.shape(), std::move(out), {a, b}, [](Node<T>& self) {
        auto& lhs = *self.inputs[0];
        auto& rhs = *self.inputs[1];
        if (lhs.requires_grad) {
            auto& g = lhs.ensure_grad();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * rhs.value[i];
        }
        if (rhs.requires_grad) {
            auto& g = rhs.ensure_grad();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * lhs.value[i];
        }
    });
}

template <typename T>
Tensor<T> add_scalar(const Tensor<T>& a, T s) {
    return unary(a, [s](T x) { return x + s; }, [](T, T) { return T(1); });
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T s) {
    return unary(a, [s](T x) { return x * s; }, [s](T, T) { return s; });
}

template <typename T>
Tensor<T> square(const Tensor<T>& a) {
    return unary(a, [](T x) { return x * x; }, [](T x, T) { return T(2) * x; });
}

template <typename T>
Tensor<T> exp(const Tensor<T>& a) {
    return unary(a, [](T x) { return std::exp(x); }, [](T, T y) { return y; });
}

template <typename T>
Tensor<T> log(const Tensor<T>& a) {
    for (T v : a.values())
        if (!(v > T(0))) throw ContractViolation("log: non-positive input");
    return unary(a, [](T x) { return std::log(x); }, [](T x, T) { return T(1) / x; });
}

template <typename T>
Tensor<T> relu(const Tensor<T>& a) {
    auto* trace = BranchTrace::current();
    if (!trace) return unary(a, [](T x) { return x > T(0) ? x : T(0); }, [](T x, T) { return x > T(0) ? T(1) : T(0); });
    auto x = a.values();
    std::vector<std::uint8_t> natural(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) natural[i] = x[i] > T(0) ? 1 : 0;
    const auto* forced = trace->relu(natural);
    std::vector<std::uint8_t> mask = forced ? *forced : std::move(natural);
    std::vector<T> out(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) out[i] = mask[i] ? x[i] : T(0);
    return record_op<T>(a.shape(), std::move(out), {a}, [mask = std::move(mask)](Node<T>& self) {
        auto& g = self.inputs[0]->ensure_grad();
        for (std::size_t i = 0; i < mask.size(); ++i)
            if (mask[i]) g[i] += self.grad[i];
    });
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& a) {
    return unary(
        a,
        [](T x) {
            if (x >= T(0)) return T(1) / (T(1) + std::exp(-x));
            const T e = std::exp(x);
            return e / (T(1) + e);
        },
        [](T, T y) { return y * (T(1) - y); });
}

template <typename T>
Tensor<T> sum(const Tensor<T>& a) {
    T total = T(0);
    for (T v : a.values()) total += v;
    return record_op<T>({1}, {total}, {a}, [](Node<T>& self) {
        auto& g = self.inputs[0]->ensure_grad();
        for (auto& v : g) v += self.grad[0];
    });
}

template <typename T>
Tensor<T> mean(const Tensor<T>& a) {
    return scale(sum(a), T(1) / static_cast<T>(a.numel()));
}

template <typename T>
Tensor<T> reshape(const Tensor<T>& a, Shape shape) {
    if (shape_numel(shape) != a.numel())
        throw ContractViolation("reshape: " + shape_to_string(a.shape()) + " -> " + shape_to_string(shape));
    std::vector<T> out(a.values().begin(), a.values().end());
    return record_op<T>(std::move(shape), std::move(out), {a}, [](Node<T>& self) {
        auto& g = self.inputs[0]->ensure_grad();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    });
}

template <typename T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& kernel, const Tensor<T>& bias, std::size_t stride,
                 std::size_t padding) {
    require_rank(input, 4, "conv2d", "input");
    require_rank(kernel, 4, "conv2d", "kernel");
    if (stride == 0) throw ContractViolation("conv2d: stride must be positive");
    kernels::ConvGeometry g{input.dim(0), input.dim(1), input.dim(2), input.dim(3), kernel.dim(0),
                            kernel.dim(2), kernel.dim(3), stride, padding};
    if (kernel.dim(1) != g.in_channels)
        throw ContractViolation("conv2d: input has C=" + std::to_string(g.in_channels) + " channels but kernel " +
                                shape_to_string(kernel.shape()) + " expects C=" + std::to_string(kernel.dim(1)));
    if (g.in_h + 2 * padding < g.kernel_h || g.in_w + 2 * padding < g.kernel_w)
        throw ContractViolation("conv2d: padded input " + std::to_string(g.in_h + 2 * padding) + "x" +
                                std::to_string(g.in_w + 2 * padding) + " smaller than kernel " +
                                std::to_string(g.kernel_h) + "x" + std::to_string(g.kernel_w));
    const bool has_bias = bias.defined();
    if (has_bias && (bias.rank() != 1 || bias.dim(0) != g.out_channels))
        throw ContractViolation("conv2d: bias " + shape_to_string(bias.shape()) + " does not match O=" +
                                std::to_string(g.out_channels));
    std::vector<T> out(g.output_size());
    kernels::conv2d_forward<T>(g, input.values(), kernel.values(),
                               has_bias ? bias.values() : std::span<const T>{}, out);
    std::vector<Tensor<T>> inputs{input, kernel};
    if (has_bias) inputs.push_back(bias);
    return record_op<T>({g.batch, g.out_channels, g.out_h(), g.out_w()}, std::move(out), std::move(inputs),
                        [g, has_bias](Node<T>& self) {
                            auto& x = *self.inputs[0];
                            auto& w = *self.inputs[1];
                            if (x.requires_grad)
                                kernels::conv2d_backward_input<T>(g, self.grad, w.value, x.ensure_grad());
                            if (w.requires_grad)
                                kernels::conv2d_backward_weight<T>(g, x.value, self.grad, w.ensure_grad());
                            if (has_bias && needs_grad(self, 2))
                                kernels::conv2d_backward_bias<T>(g, self.grad, self.inputs[2]->ensure_grad());
                        });
}

template <typename T>
Tensor<T> transposed_conv2d(const Tensor<T>& input, const Tensor<T>& kernel, const Tensor<T>& bias,
                            std::size_t stride, std::size_t padding) {
    require_rank(input, 4, "transposed_conv2d", "input");
    require_rank(kernel, 4, "transposed_conv2d", "kernel");
    if (stride == 0) throw ContractViolation("transposed_conv2d: stride must be positive");
    const std::size_t batch = input.dim(0), channels = input.dim(1), h = input.dim(2), w = input.dim(3);
    if (kernel.dim(0) != channels)
        throw ContractViolation("transposed_conv2d: input has C=" + std::to_string(channels) + " channels but kernel " +
                                shape_to_string(kernel.shape()) + " expects C=" + std::to_string(kernel.dim(0)));
    const std::size_t out_channels = kernel.dim(1), kh = kernel.dim(2), kw = kernel.dim(3);
    if ((h - 1) * stride + kh <= 2 * padding || (w - 1) * stride + kw <= 2 * padding)
        throw ContractViolation("transposed_conv2d: padding " + std::to_string(padding) + " leaves no output");
    const std::size_t out_h = (h - 1) * stride + kh - 2 * padding;
    const std::size_t out_w = (w - 1) * stride + kw - 2 * padding;
    // Geometry of the convolution this operator is the adjoint of.
    kernels::ConvGeometry g{batch, out_channels, out_h, out_w, channels, kh, kw, stride, padding};
    const bool has_bias = bias.defined();
    if (has_bias && (bias.rank() != 1 || bias.dim(0) != out_channels))
        throw ContractViolation("transposed_conv2d: bias " + shape_to_string(bias.shape()) + " does not match O=" +
                                std::to_string(out_channels));
    std::vector<T> out(g.input_size(), T(0));
    kernels::conv2d_backward_input<T>(g, input.values(), kernel.values(), out);
    if (has_bias) {
        const std::size_t plane = out_h * out_w;
        auto bv = bias.values();
        for (std::size_t b = 0; b < batch; ++b)
            for (std::size_t o = 0; o < out_channels; ++o) {
                T* dst = out.data() + (b * out_channels + o) * plane;
                for (std::size_t p = 0; p < plane; ++p) dst[p] += bv[o];
            }
    }
    std::vector<Tensor<T>> inputs{input, kernel};
    if (has_bias) inputs.push_back(bias);
    return record_op<T>({batch, out_channels, out_h, out_w}, std::move(out), std::move(inputs),
                        [g, has_bias](Node<T>& self) {
                            auto& x = *self.inputs[0];
                            auto& w = *self.inputs[1];
                            if (x.requires_grad) {
                                std::vector<T> tmp(x.value.size());
                                kernels::conv2d_forward<T>(g, self.grad, w.value, {}, tmp);
                                auto& gx = x.ensure_grad();
                                for (std::size_t i = 0; i < tmp.size(); ++i) gx[i] += tmp[i];
                            }
                            if (w.requires_grad)
                                kernels::conv2d_backward_weight<T>(g, self.grad, x.value, w.ensure_grad());
                            if (has_bias && needs_grad(self, 2)) {
                                auto& gb = self.inputs[2]->ensure_grad();
                                const std::size_t plane = g.in_h * g.in_w;
                                for (std::size_t o = 0; o < g.in_channels; ++o) {
                                    T s = T(0);
                                    for (std::size_t b = 0; b < g.batch; ++b) {
                                        const T* src = self.grad.data() + (b * g.in_channels + o) * plane;
                                        for (std::size_t p = 0; p < plane; ++p) s += src[p];
                                    }
                                    gb[o] += s;
                                }
                            }
                        });
}

template <typename T>
Tensor<T> linear(const Tensor<T>& input, const Tensor<T>& weight, const Tensor<T>& bias) {
    require_rank(input, 2, "linear", "input");
    require_rank(weight, 2, "linear", "weight");
    const std::size_t batch = input.dim(0), fin = input.dim(1), fout = weight.dim(0);
    if (weight.dim(1) != fin)
        throw ContractViolation("linear: input has F_in=" + std::to_string(fin) + " but weight " +
                                shape_to_string(weight.shape()) + " expects F_in=" + std::to_string(weight.dim(1)));
    const bool has_bias = bias.defined();
    if (has_bias && (bias.rank() != 1 || bias.dim(0) != fout))
        throw ContractViolation("linear: bias " + shape_to_string(bias.shape()) + " does not match F_out=" +
                                std::to_string(fout));
    std::vector<T> out(batch * fout);
    kernels::linear_forward<T>(batch, fin, fout, input.values(), weight.values(),
                               has_bias ? bias.values() : std::span<const T>{}, out);
    std::vector<Tensor<T>> inputs{input, weight};
    if (has_bias) inputs.push_back(bias);
    return record_op<T>({batch, fout}, std::move(out), std::move(inputs), [=](Node<T>& self) {
        auto& x = *self.inputs[0];
        auto& w = *self.inputs[1];
        kernels::linear_backward<T>(batch, fin, fout, x.value, w.value, self.grad,
                                    x.requires_grad ? std::span<T>(x.ensure_grad()) : std::span<T>{},
                                    w.requires_grad ? std::span<T>(w.ensure_grad()) : std::span<T>{});
        if (has_bias && needs_grad(self, 2)) {
            auto& gb = self.inputs[2]->ensure_grad();
            for (std::size_t o = 0; o < fout; ++o) {
                T s = T(0);
                for (std::size_t b = 0; b < batch; ++b) s += self.grad[b * fout + o];
                gb[o] += s;
            }
        }
    });
}

template <typename T>
Tensor<T> max_pool2d(const Tensor<T>& input, std::size_t kernel, std::size_t stride, std::size_t padding) {
    require_rank(input, 4, "max_pool2d", "input");
    if (kernel == 0 || stride == 0) throw ContractViolation("max_pool2d: kernel and stride must be positive");
    if (2 * padding > kernel) throw ContractViolation("max_pool2d: padding exceeds half the kernel");
    const std::size_t batch = input.dim(0), channels = input.dim(1), h = input.dim(2), w = input.dim(3);
    if (h + 2 * padding < kernel || w + 2 * padding < kernel)
        throw ContractViolation("max_pool2d: input " + shape_to_string(input.shape()) + " smaller than window");
    const std::size_t oh = (h + 2 * padding - kernel) / stride + 1;
    const std::size_t ow = (w + 2 * padding - kernel) / stride + 1;
    auto x = input.values();
    std::vector<T> out(batch * channels * oh * ow);
    std::vector<std::size_t> argmax(out.size());
#pragma omp parallel for schedule(static)
    for (std::size_t plane = 0; plane < batch * channels; ++plane) {
        const T* src = x.data() + plane * h * w;
        for (std::size_t y = 0; y < oh; ++y)
            for (std::size_t xo = 0; xo < ow; ++xo) {
                T best = -std::numeric_limits<T>::infinity();
                std::size_t best_at = 0;
                for (std::size_t ki = 0; ki < kernel; ++ki) {
                    const long iy = static_cast<long>(y * stride + ki) - static_cast<long>(padding);
                    if (iy < 0 || iy >= static_cast<long>(h)) continue;
                    for (std::size_t kj = 0; kj < kernel; ++kj) {
                        const long ix = static_cast<long>(xo * stride + kj) - static_cast<long>(padding);
                        if (ix < 0 || ix >= static_cast<long>(w)) continue;
                        const std::size_t at = static_cast<std::size_t>(iy) * w + static_cast<std::size_t>(ix);
                        if (src[at] > best) {
                            best = src[at];
                            best_at = at;
                        }
                    }
                }
                const std::size_t o = (plane * oh + y) * ow + xo;
                out[o] = best;
                argmax[o] = plane * h * w + best_at;
            }
    }
    if (auto* trace = BranchTrace::current())
        if (const auto* forced = trace->pool(argmax)) {
            argmax = *forced;
            for (std::size_t o = 0; o < out.size(); ++o) out[o] = x[argmax[o]];
        }
    return record_op<T>({batch, channels, oh, ow}, std::move(out), {input},
                        [argmax = std::move(argmax)](Node<T>& self) {
                            auto& g = self.inputs[0]->ensure_grad();
                            for (std::size_t o = 0; o < argmax.size(); ++o) g[argmax[o]] += self.grad[o];
                        });
}

template <typename T>
Tensor<T> global_avg_pool(const Tensor<T>& input) {
    require_rank(input, 4, "global_avg_pool", "input");
    const std::size_t batch = input.dim(0), channels = input.dim(1), plane = input.dim(2) * input.dim(3);
    auto x = input.values();
    std::vector<T> out(batch * channels);
    const T inv = T(1) / static_cast<T>(plane);
    for (std::size_t bc = 0; bc < batch * channels; ++bc) {
        T s = T(0);
        for (std::size_t p = 0; p < plane; ++p) s += x[bc * plane + p];
        out[bc] = s * inv;
    }
    return record_op<T>({batch, channels}, std::move(out), {input}, [plane, inv](Node<T>& self) {
        auto& g = self.inputs[0]->ensure_grad();
        for (std::size_t bc = 0; bc < self.grad.size(); ++bc) {
            const T v = self.grad[bc] * inv;
            for (std::size_t p = 0; p < plane; ++p) g[bc * plane + p] += v;
        }
    });
}

template <typename T>
Tensor<T> upsample_nearest(const Tensor<T>& input, std::size_t factor) {
    require_rank(input, 4, "upsample_nearest", "input");
    if (factor == 0) throw ContractViolation("upsample_nearest: factor must be positive");
    const std::size_t planes = input.dim(0) * input.dim(1), h = input.dim(2), w = input.dim(3);
    const std::size_t oh = h * factor, ow = w * factor;
    auto x = input.values();
    std::vector<T> out(planes * oh * ow);
    for (std::size_t p = 0; p < planes; ++p)
        for (std::size_t y = 0; y < oh; ++y)
            for (std::size_t xo = 0; xo < ow; ++xo)
                out[(p * oh + y) * ow + xo] = x[(p * h + y / factor) * w + xo / factor];
    return record_op<T>({input.dim(0), input.dim(1), oh, ow}, std::move(out), {input}, [=](Node<T>& self) {
        auto& g = self.inputs[0]->ensure_grad();
        for (std::size_t p = 0; p < planes; ++p)
            for (std::size_t y = 0; y < oh; ++y)
                for (std::size_t xo = 0; xo < ow; ++xo)
                    g[(p * h + y / factor) * w + xo / factor] += self.grad[(p * oh + y) * ow + xo];
    });
}

template <typename T>
Tensor<T> batch_norm(const Tensor<T>& input, const Tensor<T>& gamma, const Tensor<T>& beta, BatchNormStats<T>& stats,
                     bool training, T momentum, T epsilon) {
    if (!input.defined() || (input.rank() != 4 && input.rank() != 2))
        throw ContractViolation("batch_norm: input must be BxCxHxW or BxC");
    const std::size_t batch = input.dim(0), channels = input.dim(1);
    const std::size_t plane = input.numel() / (batch * channels);
    if (gamma.numel() != channels || beta.numel() != channels || stats.running_mean.size() != channels ||
        stats.running_var.size() != channels)
        throw ContractViolation("batch_norm: parameters do not match C=" + std::to_string(channels));
    const std::size_t count = batch * plane;
    if (training && count < 2)
        throw ContractViolation("batch_norm: training mode needs more than one value per channel");

    auto x = input.values();
    auto gm = gamma.values();
    auto bt = beta.values();
    std::vector<T> out(x.size());
    std::vector<T> normalized(x.size());
    std::vector<T> inv_std(channels);

#pragma omp parallel for schedule(static)
    for (std::size_t c = 0; c < channels; ++c) {
        T mu, var;
        if (training) {
            T s = T(0);
            for (std::size_t b = 0; b < batch; ++b)
                for (std::size_t p = 0; p < plane; ++p) s += x[(b * channels + c) * plane + p];
            mu = s / static_cast<T>(count);
            T ss = T(0);
            for (std::size_t b = 0; b < batch; ++b)
                for (std::size_t p = 0; p < plane; ++p) {
                    const T d = x[(b * channels + c) * plane + p] - mu;
                    ss += d * d;
                }
            var = ss / static_cast<T>(count);
            stats.running_mean[c] = (T(1) - momentum) * stats.running_mean[c] + momentum * mu;
            stats.running_var[c] = (T(1) - momentum) * stats.running_var[c] +
                                   momentum * ss / static_cast<T>(count - 1);
        } else {
            mu = stats.running_mean[c];
            var = stats.running_var[c];
        }
        const T is = T(1) / std::sqrt(var + epsilon);
        inv_std[c] = is;
        for (std::size_t b = 0; b < batch; ++b)
            for (std::size_t p = 0; p < plane; ++p) {
                const std::size_t i = (b * channels + c) * plane + p;
                normalized[i] = (x[i] - mu) * is;
                out[i] = gm[c] * normalized[i] + bt[c];
            }
    }

    return record_op<T>(input.shape(), std::move(out), {input, gamma, beta},
                        [=, normalized = std::move(normalized), inv_std = std::move(inv_std)](Node<T>& self) {
                            auto& xin = *self.inputs[0];
                            auto& gam = *self.inputs[1];
                            const auto& dy = self.grad;
                            std::vector<T> sum_dy(channels, T(0)), sum_dy_xhat(channels, T(0));
                            for (std::size_t c = 0; c < channels; ++c)
                                for (std::size_t b = 0; b < batch; ++b)
                                    for (std::size_t p = 0; p < plane; ++p) {
                                        const std::size_t i = (b * channels + c) * plane + p;
                                        sum_dy[c] += dy[i];
                                        sum_dy_xhat[c] += dy[i] * normalized[i];
                                    }
                            if (gam.requires_grad) {
                                auto& g = gam.ensure_grad();
                                for (std::size_t c = 0; c < channels; ++c) g[c] += sum_dy_xhat[c];
                            }
                            if (needs_grad(self, 2)) {
                                auto& g = self.inputs[2]->ensure_grad();
                                for (std::size_t c = 0; c < channels; ++c) g[c] += sum_dy[c];
                            }
                            if (!xin.requires_grad) return;
                            auto& gx = xin.ensure_grad();
                            const T n = static_cast<T>(count);
                            for (std::size_t c = 0; c < channels; ++c) {
                                const T k = gam.value[c] * inv_std[c];
                                for (std::size_t b = 0; b < batch; ++b)
                                    for (std::size_t p = 0; p < plane; ++p) {
                                        const std::size_t i = (b * channels + c) * plane + p;
                                        if (training)
                                            gx[i] += k * (dy[i] - sum_dy[c] / n - normalized[i] * sum_dy_xhat[c] / n);
                                        else
                                            gx[i] += k * dy[i];
                                    }
                            }
                        });
}

template <typename T>
Tensor<T> softmax(const Tensor<T>& logits) {
    require_rank(logits, 2, "softmax", "logits");
    const std::size_t rows = logits.dim(0), cols = logits.dim(1);
    auto x = logits.values();
    std::vector<T> out(x.size());
    for (std::size_t r = 0; r < rows; ++r) {
        const T* src = x.data() + r * cols;
        T* dst = out.data() + r * cols;
        const T mx = *std::max_element(src, src + cols);
        T z = T(0);
        for (std::size_t c = 0; c < cols; ++c) z += (dst[c] = std::exp(src[c] - mx));
        for (std::size_t c = 0; c < cols; ++c) dst[c] /= z;
    }
    return record_op<T>(logits.shape(), std::move(out), {logits}, [rows, cols](Node<T>& self) {
        auto& g = self.inputs[0]->ensure_grad();
        for (std::size_t r = 0; r < rows; ++r) {
            T dot = T(0);
            for (std::size_t c = 0; c < cols; ++c) dot += self.grad[r * cols + c] * self.value[r * cols + c];
            for (std::size_t c = 0; c < cols; ++c)
                g[r * cols + c] += self.value[r * cols + c] * (self.grad[r * cols + c] - dot);
        }
    });
}

template <typename T>
Tensor<T> log_softmax(const Tensor<T>& logits) {
    require_rank(logits, 2, "log_softmax", "logits");
    const std::size_t rows = logits.dim(0), cols = logits.dim(1);
    auto x = logits.values();
    std::vector<T> out(x.size());
    for (std::size_t r = 0; r < rows; ++r) {
        const T* src = x.data() + r * cols;
        const T mx = *std::max_element(src, src + cols);
        T z = T(0);
        for (std::size_t c = 0; c < cols; ++c) z += std::exp(src[c] - mx);
        const T lse = mx + std::log(z);
        for (std::size_t c = 0; c < cols; ++c) out[r * cols + c] = src[c] - lse;
    }
    return record_op<T>(logits.shape(), std::move(out), {logits}, [rows, cols](Node<T>& self) {
        auto& g = self.inputs[0]->ensure_grad();
        for (std::size_t r = 0; r < rows; ++r) {
            T total = T(0);
            for (std::size_t c = 0; c < cols; ++c) total += self.grad[r * cols + c];
            for (std::size_t c = 0; c < cols; ++c)
                g[r * cols + c] += self.grad[r * cols + c] - std::exp(self.value[r * cols + c]) * total;
        }
    });
}

template <typename T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts) {
    if (parts.empty()) throw ContractViolation("concat: no inputs");
    const Tensor<T>& first = parts.front();
    if (first.rank() < 2) throw ContractViolation("concat: inputs need at least two axes");
    const std::size_t batch = first.dim(0);
    Shape out_shape = first.shape();
    out_shape[1] = 0;
    std::vector<std::size_t> widths;
    for (const auto& p : parts) {
        bool compatible = p.rank() == first.rank() && p.dim(0) == batch;
        for (std::size_t a = 2; compatible && a < p.rank(); ++a) compatible = p.dim(a) == first.dim(a);
        if (!compatible)
            throw ContractViolation("concat: " + shape_to_string(p.shape()) + " incompatible with " +
                                    shape_to_string(first.shape()));
        out_shape[1] += p.dim(1);
        widths.push_back(p.numel() / batch);
    }
    std::size_t row = 0;
    for (auto w : widths) row += w;
    std::vector<T> out(batch * row);
    for (std::size_t b = 0; b < batch; ++b) {
        std::size_t offset = 0;
        for (std::size_t k = 0; k < parts.size(); ++k) {
            auto v = parts[k].values();
            std::copy_n(v.begin() + b * widths[k], widths[k], out.begin() + b * row + offset);
            offset += widths[k];
        }
    }
    return record_op<T>(std::move(out_shape), std::move(out), parts, [=](Node<T>& self) {
        std::size_t offset = 0;
        for (std::size_t k = 0; k < widths.size(); ++k) {
            if (needs_grad(self, k)) {
                auto& g = self.inputs[k]->ensure_grad();
                for (std::size_t b = 0; b < batch; ++b)
                    for (std::size_t i = 0; i < widths[k]; ++i) g[b * widths[k] + i] += self.grad[b * row + offset + i];
            }
            offset += widths[k];
        }
    });
}

template <typename T>
Tensor<T> pick(const Tensor<T>& input, std::span<const std::size_t> index) {
    require_rank(input, 2, "pick", "input");
    const std::size_t rows = input.dim(0), cols = input.dim(1);
    if (index.size() != rows)
        throw ContractViolation("pick: " + std::to_string(index.size()) + " indices for " + std::to_string(rows) +
                                " rows");
    std::vector<std::size_t> idx(index.begin(), index.end());
    std::vector<T> out(rows);
    for (std::size_t r = 0; r < rows; ++r) {
        if (idx[r] >= cols)
            throw ContractViolation("pick: index " + std::to_string(idx[r]) + " out of range for " +
                                    std::to_string(cols) + " columns");
        out[r] = input.values()[r * cols + idx[r]];
    }
    return record_op<T>({rows}, std::move(out), {input}, [cols, idx = std::move(idx)](Node<T>& self) {
        auto& g = self.inputs[0]->ensure_grad();
        for (std::size_t r = 0; r < idx.size(); ++r) g[r * cols + idx[r]] += self.grad[r];
    });
}

#define OCTVAE_INSTANTIATE_OPS(T)                                                                                \
    template Tensor<T> add(const Tensor<T>&, const Tensor<T>&);                                                  \
    template Tensor<T> sub(const Tensor<T>&, const Tensor<T>&);                                                  \
    template Tensor<T> mul(const Tensor<T>&, const Tensor<T>&);                                                  \
    template Tensor<T> add_scalar(const Tensor<T>&, T);                                                          \
    template Tensor<T> scale(const Tensor<T>&, T);                                                               \
    template Tensor<T> square(const Tensor<T>&);                                                                 \
    template Tensor<T> exp(const Tensor<T>&);                                                                    \
    template Tensor<T> log(const Tensor<T>&);                                                                    \
    template Tensor<T> relu(const Tensor<T>&);                                                                   \
    template Tensor<T> sigmoid(const Tensor<T>&);                                                                \
    template Tensor<T> sum(const Tensor<T>&);                                                                    \
    template Tensor<T> mean(const Tensor<T>&);                                                                   \
    template Tensor<T> reshape(const Tensor<T>&, Shape);                                                         \
    template Tensor<T> conv2d(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, std::size_t, std::size_t);   \
    template Tensor<T> transposed_conv2d(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, std::size_t,      \
                                         std::size_t);                                                           \
    template Tensor<T> linear(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);                             \
    template Tensor<T> max_pool2d(const Tensor<T>&, std::size_t, std::size_t, std::size_t);                      \
    template Tensor<T> global_avg_pool(const Tensor<T>&);                                                        \
    template Tensor<T> upsample_nearest(const Tensor<T>&, std::size_t);                                          \
    template Tensor<T> batch_norm(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, BatchNormStats<T>&, bool, \
                                  T, T);                                                                         \
    template Tensor<T> softmax(const Tensor<T>&);                                                                \
    template Tensor<T> log_softmax(const Tensor<T>&);                                                            \
    template Tensor<T> concat(const std::vector<Tensor<T>>&);                                                    \
    template Tensor<T> pick(const Tensor<T>&, std::span<const std::size_t>);

OCTVAE_INSTANTIATE_OPS(float)
OCTVAE_INSTANTIATE_OPS(double)

} // namespace octvae::ops
