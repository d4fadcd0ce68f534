#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <type_traits>
#include <vector>

#include "octvae/checkpoint.hpp"
#include "octvae/grad_check.hpp"
#include "octvae/ops.hpp"
#include "octvae/rng.hpp"
#include "octvae/tensor.hpp"

namespace octvae {

struct ArchitectureConfig {
    std::size_t input_size = 224;
    std::size_t input_channels = 1;
    std::size_t feature_dim = 1000;
    std::size_t latent_dim = 128;
    std::size_t num_classes = 4;
    std::size_t decoder_base_channels = 64;
    // Width of the first residual stage; later stages double it.
    std::size_t encoder_width = 64;
    // Feed raw logits instead of class probabilities into the latent heads.
    bool concat_logits = false;
    std::optional<std::filesystem::path> pretrained_weights_path;

    /// Throws ConfigError on an invalid combination.
    void validate() const;

    /// Metadata entries; the pretrained path is not part of the identity of a model.
    std::map<std::string, std::string> to_metadata() const;
    static ArchitectureConfig from_metadata(const std::map<std::string, std::string>& meta);

    friend bool operator==(const ArchitectureConfig&, const ArchitectureConfig&) = default;
};

enum class Mode { Train, Eval };

template <typename T>
struct ForwardOutput {
    Tensor<T> y_hat;  // B x classes, logits
    Tensor<T> h;      // B x feature_dim
    Tensor<T> mu;     // B x N
    Tensor<T> logvar; // B x N
    Tensor<T> sigma;  // B x N, exp(logvar / 2)
    Tensor<T> z;      // B x N
    Tensor<T> x_hat;  // B x C x S x S
};

/// z = mu + sigma * eps with eps drawn row-major from Rng(noise_seed).
template <typename T>
Tensor<T> reparameterize(const Tensor<T>& mu, const Tensor<T>& sigma, std::uint64_t noise_seed);

/// The noise reparameterize() would draw, as a constant tensor.
template <typename T>
Tensor<T> standard_normal_noise(const Shape& shape, std::uint64_t noise_seed);

/// Encoder (34-layer residual network), classifier head, latent heads and
/// transposed-convolution decoder. Owns its parameters and batch-norm
/// statistics; not thread-safe while training.
template <typename T>
class Model {
public:
    Model(const ArchitectureConfig& config, std::uint64_t init_seed);

    const ArchitectureConfig& config() const { return config_; }

    Tensor<T> encode(const Tensor<T>& x, Mode mode);
    Tensor<T> classify(const Tensor<T>& h) const;
    /// Returns {mu, logvar}.
    std::pair<Tensor<T>, Tensor<T>> latent_params(const Tensor<T>& h, const Tensor<T>& y_hat) const;
    Tensor<T> decode(const Tensor<T>& z) const;

    /// Eval mode uses z = mu and running batch-norm statistics.
    ForwardOutput<T> forward(const Tensor<T>& x, Mode mode, std::uint64_t noise_seed);
    /// z = mu + sigma * noise with caller-supplied, constant noise; `mode` only selects batch-norm behaviour.
    ForwardOutput<T> forward_with_noise(const Tensor<T>& x, Mode mode, const Tensor<T>& noise);

    /// One residual block of encoder stage `stage` (0..3).
    Tensor<T> residual_block(std::size_t stage, std::size_t index, const Tensor<T>& x, Mode mode);

    std::vector<NamedTensor<T>>& parameters() { return params_; }
    const std::vector<NamedTensor<T>>& parameters() const { return params_; }
    Tensor<T>& parameter(const std::string& name);
    std::size_t parameter_count() const;
    /// Parameter counts grouped by sub-network prefix (encoder, classifier, latent.mu, ...).
    std::map<std::string, std::size_t> parameter_counts_by_group() const;

    void zero_grad();

    /// Parameters and batch-norm statistics as float32 arrays plus architecture metadata.
    Checkpoint state() const;
    /// Loads parameters and statistics; errors name the offending array.
    void load_state(const Checkpoint& checkpoint);
    /// Loads every array of `checkpoint` whose name starts with "encoder.".
    void load_encoder_weights(const Checkpoint& checkpoint);

    /// FNV-1a over all parameter and statistic bytes.
    std::uint64_t checksum() const;

private:
    struct ConvBn {
        std::size_t weight, gamma, beta, stats;
        std::size_t stride, padding;
    };
    struct Block {
        ConvBn first, second;
        std::optional<ConvBn> shortcut;
    };
    struct Dense {
        std::size_t weight, bias;
    };
    struct Conv {
        std::size_t weight, bias;
        std::size_t stride, padding;
    };
    struct Stage {
        Conv up, refine1, refine2;
    };

    std::size_t add_param(std::string name, Shape shape, std::size_t fan_in, bool rectified, Rng& rng);
    std::size_t add_constant(std::string name, Shape shape, T fill);
    ConvBn make_conv_bn(const std::string& prefix, std::size_t in, std::size_t out, std::size_t kernel,
                        std::size_t stride, std::size_t padding, Rng& rng);
    Dense make_dense(const std::string& prefix, std::size_t in, std::size_t out, bool rectified, Rng& rng);
    Conv make_conv(const std::string& prefix, std::size_t in, std::size_t out, std::size_t kernel,
                   std::size_t stride, std::size_t padding, bool transposed, bool rectified, Rng& rng);

    Tensor<T> apply(const ConvBn& layer, const Tensor<T>& x, Mode mode);
    Tensor<T> apply(const Dense& layer, const Tensor<T>& x) const;
    ForwardOutput<T> finish_forward(const Tensor<T>& x, Mode mode, const Tensor<T>* noise, std::uint64_t seed);

    ArchitectureConfig config_;
    std::vector<NamedTensor<T>> params_;
    std::vector<std::string> stat_names_;
    std::vector<ops::BatchNormStats<T>> stats_;

    ConvBn stem_;
    std::vector<std::vector<Block>> stages_;
    Dense encoder_fc_, classifier_, mu_head_, logvar_head_, decoder_fc_;
    std::vector<Stage> decoder_stages_;
    Conv decoder_out_;
};

/// Pixels as loaded (float) converted to the model's precision.
template <typename T>
Tensor<T> to_precision(const Tensor<float>& pixels) {
    if constexpr (std::is_same_v<T, float>) {
        return pixels;
    } else {
        const auto v = pixels.values();
        return Tensor<T>::from_values(pixels.shape(), std::vector<T>(v.begin(), v.end()));
    }
}

/// Builds a model from a checkpoint's metadata and loads its state.
template <typename T>
Model<T> model_from_checkpoint(const Checkpoint& checkpoint);

extern template class Model<float>;
extern template class Model<double>;

} // namespace octvae
