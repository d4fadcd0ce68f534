#include "octvae/losses.hpp"

#include <cmath>

#include "octvae/error.hpp"
#include "octvae/ops.hpp"

namespace octvae {

namespace {

template <typename T>
void require_finite(const Tensor<T>& t, const char* what) {
    for (T v : t.values())
        if (!std::isfinite(v)) throw NumericError(std::string(what) + " contains a non-finite value");
}

} // namespace

template <typename T>
Tensor<T> kld_loss(const Tensor<T>& mu, const Tensor<T>& sigma) {
    if (mu.shape() != sigma.shape() || mu.rank() != 2)
        throw ContractViolation("kld_loss: mu " + shape_to_string(mu.shape()) + " and sigma " +
                                shape_to_string(sigma.shape()) + " must be equal BxN shapes");
    require_finite(mu, "kld_loss mu");
    require_finite(sigma, "kld_loss sigma");
    const T batch = static_cast<T>(mu.dim(0));
    const auto var = ops::square(sigma);
    for (T v : var.values())
        if (!(v > T(0))) throw NumericError("kld_loss sigma underflowed to zero");
    // 1 + log var - mu^2 - var, summed, scaled by -1/(2B)
    auto inner = ops::sub(ops::sub(ops::add_scalar(ops::log(var), T(1)), ops::square(mu)), var);
    return ops::scale(ops::sum(inner), T(-0.5) / batch);
}

template <typename T>
Tensor<T> recon_loss(const Tensor<T>& x_hat, const Tensor<T>& x, ReconReduction reduction) {
    if (x_hat.shape() != x.shape())
        throw ContractViolation("recon_loss: x_hat " + shape_to_string(x_hat.shape()) + " vs x " +
                                shape_to_string(x.shape()));
    const auto sq = ops::square(ops::sub(x_hat, x));
    if (reduction == ReconReduction::Mean) return ops::mean(sq);
    return ops::scale(ops::sum(sq), T(1) / static_cast<T>(x.dim(0)));
}

template <typename T>
Tensor<T> class_loss(const Tensor<T>& logits, std::span<const std::size_t> labels) {
    if (logits.rank() != 2 || logits.dim(0) != labels.size())
        throw ContractViolation("class_loss: logits " + shape_to_string(logits.shape()) + " vs " +
                                std::to_string(labels.size()) + " labels");
    for (auto l : labels)
        if (l >= logits.dim(1))
            throw ContractViolation("class_loss: label " + std::to_string(l) + " out of range 0.." +
                                    std::to_string(logits.dim(1) - 1));
    return ops::scale(ops::mean(ops::pick(ops::log_softmax(logits), labels)), T(-1));
}

LossBreakdown combined_loss(double l_c, double l_r, double l_z, double weight_r, double weight_z) {
    LossBreakdown b{l_c, l_r, l_z, 0.0, weight_r, weight_z};
    b.combined = l_c;
    if (weight_r != 0.0) b.combined += weight_r * l_r;
    if (weight_z != 0.0) b.combined += weight_z * l_z;
    return b;
}

template <typename T>
LossTerms<T> compute_losses(const ForwardOutput<T>& out, const Tensor<T>& x, std::span<const std::size_t> labels,
                            const LossWeights& weights) {
    LossTerms<T> terms;
    terms.class_term = class_loss(out.y_hat, labels);
    terms.recon_term = recon_loss(out.x_hat, x, weights.recon_reduction);
    terms.kld_term = kld_loss(out.mu, out.sigma);
    terms.total = terms.class_term;
    if (weights.recon != 0.0)
        terms.total = ops::add(terms.total, ops::scale(terms.recon_term, static_cast<T>(weights.recon)));
    if (weights.kld != 0.0)
        terms.total = ops::add(terms.total, ops::scale(terms.kld_term, static_cast<T>(weights.kld)));
    terms.breakdown = combined_loss(terms.class_term.item(), terms.recon_term.item(), terms.kld_term.item(),
                                    weights.recon, weights.kld);
    return terms;
}

#define OCTVAE_INSTANTIATE(T)                                                                                  \
    template Tensor<T> kld_loss<T>(const Tensor<T>&, const Tensor<T>&);                                       \
    template Tensor<T> recon_loss<T>(const Tensor<T>&, const Tensor<T>&, ReconReduction);                    \
    template Tensor<T> class_loss<T>(const Tensor<T>&, std::span<const std::size_t>);                         \
    template LossTerms<T> compute_losses<T>(const ForwardOutput<T>&, const Tensor<T>&,                        \
                                            std::span<const std::size_t>, const LossWeights&);

OCTVAE_INSTANTIATE(float)
OCTVAE_INSTANTIATE(double)

} // namespace octvae
