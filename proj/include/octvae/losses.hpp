#pragma once

#include <span>

#include "octvae/model.hpp"
#include "octvae/tensor.hpp"

namespace octvae {

enum class ReconReduction { Mean, Sum };

/// Batch mean of -1/2 * sum_j (1 + log sigma_j^2 - mu_j^2 - sigma_j^2).
/// Non-finite inputs throw NumericError.
template <typename T>
Tensor<T> kld_loss(const Tensor<T>& mu, const Tensor<T>& sigma);

/// Squared error averaged over every pixel and sample (Mean) or summed over
/// pixels and averaged over samples (Sum).
template <typename T>
Tensor<T> recon_loss(const Tensor<T>& x_hat, const Tensor<T>& x, ReconReduction reduction = ReconReduction::Mean);

/// Batch mean of -log softmax(logits)[label].
template <typename T>
Tensor<T> class_loss(const Tensor<T>& logits, std::span<const std::size_t> labels);

struct LossBreakdown {
    double l_c = 0.0;
    double l_r = 0.0;
    double l_z = 0.0;
    double combined = 0.0;
    double weight_r = 0.1;
    double weight_z = 0.1;

    friend bool operator==(const LossBreakdown&, const LossBreakdown&) = default;
};

LossBreakdown combined_loss(double l_c, double l_r, double l_z, double weight_r = 0.1, double weight_z = 0.1);

struct LossWeights {
    double recon = 0.1;
    double kld = 0.1;
    ReconReduction recon_reduction = ReconReduction::Mean;
};

template <typename T>
struct LossTerms {
    Tensor<T> class_term;
    Tensor<T> recon_term;
    Tensor<T> kld_term;
    // Differentiable weighted sum; terms with weight exactly zero are left out.
    Tensor<T> total;
    LossBreakdown breakdown;
};

/// All three terms for one forward pass. The reconstruction target is the encoder input.
template <typename T>
LossTerms<T> compute_losses(const ForwardOutput<T>& out, const Tensor<T>& x, std::span<const std::size_t> labels,
                            const LossWeights& weights);

} // namespace octvae
