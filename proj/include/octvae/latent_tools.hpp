#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "octvae/data.hpp"
#include "octvae/image_io.hpp"
#include "octvae/model.hpp"

namespace octvae {

enum class LatentSource { Mu, Z, H };
std::string_view latent_source_name(LatentSource source);
std::optional<LatentSource> parse_latent_source(std::string_view text);

/// One row per sample.
struct LatentMatrix {
    std::size_t rows = 0;
    std::size_t dim = 0;
    std::vector<double> values; // rows x dim
    std::vector<std::size_t> labels;
    std::vector<std::string> ids;

    std::span<const double> row(std::size_t i) const { return std::span(values).subspan(i * dim, dim); }
};

/// Decoder outputs for `count` prior draws z ~ N(0, I), or z = 0 when `mean` is set.
/// Uses only const model access.
template <typename T>
Tensor<T> decode_prior(const Model<T>& model, std::size_t count, std::uint64_t seed, bool mean = false);

/// Rounds [0, 1] pixel planes of a B x C x S x S tensor to 8-bit images.
template <typename T>
std::vector<Image8> to_images(const Tensor<T>& pixels);

/// Writes `sample_0000.png`, ... (or a single `prior_mean.png` when `mean`) into `out_dir`.
template <typename T>
std::vector<std::filesystem::path> sample_prior(const Model<T>& model, std::size_t count, std::uint64_t seed,
                                                const std::filesystem::path& out_dir, bool mean = false);

/// Eval-mode latent rows for a split in manifest order. For LatentSource::Z
/// the noise of each row is drawn from a stream keyed by its manifest index,
/// so rows do not depend on batching.
template <typename T>
LatentMatrix extract_latents(Model<T>& model, const DatasetManifest& manifest, Split split,
                             LatentSource source = LatentSource::Mu, std::uint64_t seed = 0,
                             std::size_t batch_size = 64);

struct TsneConfig {
    double perplexity = 30.0;
    std::size_t iterations = 1000;
    std::uint64_t seed = 0;
    double early_exaggeration = 12.0;
    std::size_t exaggeration_iterations = 250;
    double learning_rate = 200.0;
    double initial_momentum = 0.5;
    double final_momentum = 0.8;
    std::size_t momentum_switch = 250;
    double entropy_tolerance_bits = 1e-3;
    std::size_t max_bisection_steps = 50;
    std::size_t max_points = 20000;
};

struct TsneAffinities {
    std::size_t n = 0;
    std::vector<double> conditional;  // n x n, row i is p_{j|i}
    std::vector<double> joint;        // n x n, symmetric, sums to 1
    std::vector<double> entropy_bits; // per row
    std::vector<double> beta;         // per row precision 1 / (2 sigma^2)
    std::size_t fallbacks = 0;        // rows whose search did not converge
};

/// Throws ConfigError unless 3 * perplexity < n.
void check_perplexity(double perplexity, std::size_t n);

/// Gaussian conditional affinities with per-row bisection on the precision,
/// then symmetrized joint affinities.
TsneAffinities tsne_affinities(std::span<const double> points, std::size_t n, std::size_t dim,
                               const TsneConfig& config);

struct Embedding2D {
    std::size_t rows = 0;
    std::vector<double> coords; // rows x 2, input order
    std::vector<std::size_t> labels;
    std::vector<std::string> ids;
    double final_kl = 0;
    std::size_t iterations_run = 0;
    std::vector<double> kl_trace; // KL(P || Q) entering each iteration
    std::size_t bandwidth_fallbacks = 0;
};

/// Exact t-SNE. Rows are processed in order of id so the result is
/// equivariant under permutations of the input; the output is centered.
/// After early exaggeration, steps that raise KL are rolled back with momentum
/// reset and a halved step, so the trace is non-increasing from there on.
Embedding2D tsne_2d(const LatentMatrix& latents, const TsneConfig& config = {});

/// CSV `id,label,x,y` with shortest round-trip decimals.
std::string embedding_to_csv(const Embedding2D& embedding);
Embedding2D embedding_from_csv(std::string_view text);

/// Class-coloured scatter plot with a legend, as an RGB image.
Image8 render_scatter(const Embedding2D& embedding, std::size_t width = 640, std::size_t height = 480);

/// Writes `<stem>.csv` and `<stem>.png`.
void export_embedding(const Embedding2D& embedding, const std::filesystem::path& stem);

} // namespace octvae
