#include <gtest/gtest.h>

#include <cmath>
#include <numbers>

#include "octvae/losses.hpp"
#include "octvae/rng.hpp"

using namespace octvae;

namespace {

// Monte-Carlo estimate of KL(N(mu, sigma^2) || N(0, 1)) summed over dimensions,
// as the sample mean of log q(z) - log p(z) with z ~ q.
double monte_carlo_kl(const std::vector<double>& mu, const std::vector<double>& sigma, std::size_t samples,
                      std::uint64_t seed) {
    Rng rng(seed);
    double total = 0.0;
    for (std::size_t s = 0; s < samples; ++s) {
        double log_ratio = 0.0;
        for (std::size_t j = 0; j < mu.size(); ++j) {
            const double e = rng.normal();
            const double z = mu[j] + sigma[j] * e;
            log_ratio += -std::log(sigma[j]) - 0.5 * e * e + 0.5 * z * z;
        }
        total += log_ratio;
    }
    return total / double(samples);
}

double kld_value(const std::vector<double>& mu, const std::vector<double>& sigma) {
    const std::size_t n = mu.size();
    return kld_loss(Tensor<double>::from_values({1, n}, mu), Tensor<double>::from_values({1, n}, sigma)).item();
}

} // namespace

TEST(KldLoss, WorkedValues) {
    EXPECT_EQ(kld_value({0, 0, 0}, {1, 1, 1}), 0.0);
    EXPECT_NEAR(kld_value({1}, {1}), 0.5, 1e-12);
    EXPECT_NEAR(kld_value({0, 0}, {2, 2}), 3.0 - std::log(4.0), 1e-12);
    EXPECT_NEAR(monte_carlo_kl({1}, {1}, 1000000, 1), 0.5, 0.005);
    EXPECT_NEAR(monte_carlo_kl({0, 0}, {2, 2}, 1000000, 2), 3.0 - std::log(4.0), 0.01 * 1.6137);
}

TEST(KldLoss, BatchMean) {
    auto mu = Tensor<double>::from_values({2, 1}, {1.0, 0.0});
    auto sigma = Tensor<double>::from_values({2, 1}, {1.0, 1.0});
    EXPECT_NEAR(kld_loss(mu, sigma).item(), 0.25, 1e-12);
}

TEST(KldLoss, NonNegativeWithZeroOnlyAtPrior) {
    Rng rng(3);
    for (int t = 0; t < 500; ++t) {
        const std::size_t n = 1 + rng.uniform_index(6);
        std::vector<double> mu(n), sigma(n);
        for (std::size_t j = 0; j < n; ++j) {
            mu[j] = rng.uniform(-3, 3);
            sigma[j] = rng.uniform(0.05, 4);
        }
        EXPECT_GT(kld_value(mu, sigma), 0.0);
    }
    EXPECT_EQ(kld_value({0}, {1}), 0.0);
}

TEST(KldLoss, RejectsNonFinite) {
    auto mu = Tensor<float>::from_values({1, 2}, {0.0f, NAN});
    auto sigma = Tensor<float>::from_values({1, 2}, {1.0f, 1.0f});
    EXPECT_THROW(kld_loss(mu, sigma), NumericError);
    EXPECT_THROW(kld_loss(sigma, Tensor<float>::from_values({1, 2}, {1.0f, INFINITY})), NumericError);
    // exp(logvar / 2) flushed to zero
    EXPECT_THROW(kld_loss(sigma, Tensor<float>::from_values({1, 2}, {1.0f, 0.0f})), NumericError);
}

TEST(ReconLoss, Values) {
    auto x = Tensor<float>::from_values({1, 1, 2, 2}, {0.1f, 0.2f, 0.3f, 0.4f});
    EXPECT_EQ(recon_loss(x, x).item(), 0.0f);
    auto shifted = Tensor<double>::from_values({1, 1, 2, 2}, {0.6, 0.7, 0.8, 0.9});
    auto xd = Tensor<double>::from_values({1, 1, 2, 2}, {0.1, 0.2, 0.3, 0.4});
    EXPECT_NEAR(recon_loss(shifted, xd).item(), 0.25, 1e-15);
    EXPECT_NEAR(recon_loss(shifted, xd, ReconReduction::Sum).item(), 1.0, 1e-15);

    Rng rng(4);
    std::vector<float> a(2 * 3 * 5 * 5), b(a.size());
    for (std::size_t i = 0; i < a.size(); ++i) {
        a[i] = float(rng.uniform());
        b[i] = float(rng.uniform());
    }
    double oracle = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) oracle += (double(a[i]) - b[i]) * (double(a[i]) - b[i]);
    oracle /= double(a.size());
    auto got = recon_loss(Tensor<float>::from_values({2, 3, 5, 5}, a), Tensor<float>::from_values({2, 3, 5, 5}, b));
    EXPECT_NEAR(got.item(), oracle, 1e-7);
    EXPECT_THROW(recon_loss(x, Tensor<float>::zeros({1, 1, 2, 3})), ContractViolation);
}

TEST(ClassLoss, Values) {
    const std::vector<std::size_t> labels{2};
    EXPECT_NEAR(class_loss(Tensor<double>::full({1, 4}, 3.7), labels).item(), std::log(4.0), 1e-12);
    auto peaked = Tensor<float>::from_values({1, 4}, {0.0f, 0.0f, 50.0f, 0.0f});
    EXPECT_LT(class_loss(peaked, labels).item(), 1e-6f);
    const std::vector<std::size_t> bad{4};
    EXPECT_THROW(class_loss(peaked, bad), ContractViolation);

    Rng rng(5);
    std::vector<double> logits(16 * 4);
    std::vector<std::size_t> lab(16);
    for (auto& v : logits) v = rng.uniform(-8, 8);
    for (auto& l : lab) l = rng.uniform_index(4);
    double oracle = 0.0;
    for (std::size_t b = 0; b < 16; ++b) {
        double denom = 0.0;
        for (std::size_t k = 0; k < 4; ++k) denom += std::exp(logits[b * 4 + k]);
        oracle -= std::log(std::exp(logits[b * 4 + lab[b]]) / denom);
    }
    oracle /= 16.0;
    EXPECT_NEAR(class_loss(Tensor<double>::from_values({16, 4}, logits), lab).item(), oracle, 1e-6);
}

TEST(CombinedLoss, Arithmetic) {
    EXPECT_NEAR(combined_loss(1.0, 2.0, 3.0).combined, 1.5, 1e-15);
    EXPECT_EQ(combined_loss(0.7, 0.0, 0.0).combined, 0.7);
    EXPECT_EQ(combined_loss(0.7, 5.0, 9.0, 0.0, 0.0).combined, 0.7);
}

TEST(CombinedLoss, Superposition) {
    Rng rng(6);
    for (int t = 0; t < 200; ++t) {
        const double a1 = rng.uniform(0, 5), a2 = rng.uniform(0, 5), b1 = rng.uniform(0, 5), b2 = rng.uniform(0, 5),
                     c1 = rng.uniform(0, 5), c2 = rng.uniform(0, 5);
        const double lhs = combined_loss(a1 + a2, b1 + b2, c1 + c2).combined;
        const double rhs = combined_loss(a1, b1, c1).combined + combined_loss(a2, b2, c2).combined;
        EXPECT_NEAR(lhs, rhs, 1e-12);
    }
}
