#include "octvae/model.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

#include "octvae/error.hpp"
#include "octvae/log.hpp"

namespace octvae {

namespace {

constexpr std::size_t kStageBlocks[4] = {3, 4, 6, 3};
constexpr std::size_t kDecoderStages = 5;

std::size_t parse_size(const std::map<std::string, std::string>& meta, const std::string& key) {
    auto it = meta.find(key);
    if (it == meta.end()) throw IoError("checkpoint metadata lacks '" + key + "'");
    try {
        std::size_t used = 0;
        const auto v = std::stoull(it->second, &used);
        if (used != it->second.size()) throw std::invalid_argument(key);
        return static_cast<std::size_t>(v);
    } catch (const std::exception&) {
        throw IoError("checkpoint metadata '" + key + "' is not an integer: " + it->second);
    }
}

std::string group_of(const std::string& name) {
    if (name.rfind("latent.mu.", 0) == 0) return "latent.mu";
    if (name.rfind("latent.logvar.", 0) == 0) return "latent.logvar";
    return name.substr(0, name.find('.'));
}

} // namespace

void ArchitectureConfig::validate() const {
    if (input_channels != 1 && input_channels != 3)
        throw ConfigError("input_channels must be 1 or 3, got " + std::to_string(input_channels));
    if (input_size == 0 || input_size % 32 != 0)
        throw ConfigError("input_size must be a positive multiple of 32, got " + std::to_string(input_size));
    if (latent_dim < 1) throw ConfigError("latent_dim must be >= 1");
    if (num_classes < 2) throw ConfigError("num_classes must be >= 2, got " + std::to_string(num_classes));
    if (feature_dim < num_classes)
        throw ConfigError("feature_dim (" + std::to_string(feature_dim) + ") must be >= num_classes (" +
                          std::to_string(num_classes) + ")");
    if (decoder_base_channels < 1) throw ConfigError("decoder_base_channels must be >= 1");
    if (encoder_width < 1) throw ConfigError("encoder_width must be >= 1");
}

std::map<std::string, std::string> ArchitectureConfig::to_metadata() const {
    return {
        {"arch.input_size", std::to_string(input_size)},
        {"arch.input_channels", std::to_string(input_channels)},
        {"arch.feature_dim", std::to_string(feature_dim)},
        {"arch.latent_dim", std::to_string(latent_dim)},
        {"arch.num_classes", std::to_string(num_classes)},
        {"arch.decoder_base_channels", std::to_string(decoder_base_channels)},
        {"arch.encoder_width", std::to_string(encoder_width)},
        {"arch.concat_logits", concat_logits ? "1" : "0"},
    };
}

ArchitectureConfig ArchitectureConfig::from_metadata(const std::map<std::string, std::string>& meta) {
    ArchitectureConfig c;
    c.input_size = parse_size(meta, "arch.input_size");
    c.input_channels = parse_size(meta, "arch.input_channels");
    c.feature_dim = parse_size(meta, "arch.feature_dim");
    c.latent_dim = parse_size(meta, "arch.latent_dim");
    c.num_classes = parse_size(meta, "arch.num_classes");
    c.decoder_base_channels = parse_size(meta, "arch.decoder_base_channels");
    c.encoder_width = parse_size(meta, "arch.encoder_width");
    c.concat_logits = parse_size(meta, "arch.concat_logits") != 0;
    c.validate();
    return c;
}

template <typename T>
Tensor<T> standard_normal_noise(const Shape& shape, std::uint64_t noise_seed) {
    Rng rng(noise_seed);
    std::vector<T> eps(shape_numel(shape));
    for (auto& e : eps) e = static_cast<T>(rng.normal());
    return Tensor<T>::from_values(shape, std::move(eps));
}

template <typename T>
Tensor<T> reparameterize(const Tensor<T>& mu, const Tensor<T>& sigma, std::uint64_t noise_seed) {
    if (mu.shape() != sigma.shape())
        throw ContractViolation("reparameterize: mu " + shape_to_string(mu.shape()) + " vs sigma " +
                                shape_to_string(sigma.shape()));
    return ops::add(mu, ops::mul(sigma, standard_normal_noise<T>(mu.shape(), noise_seed)));
}

template <typename T>
Model<T>::Model(const ArchitectureConfig& config, std::uint64_t init_seed) : config_(config) {
    config_.validate();
    Rng rng(init_seed);
    const std::size_t w = config_.encoder_width;

    stem_ = make_conv_bn("encoder.stem", config_.input_channels, w, 7, 2, 3, rng);
    std::size_t in = w;
    for (std::size_t s = 0; s < 4; ++s) {
        const std::size_t out = w << s;
        std::vector<Block> blocks;
        for (std::size_t b = 0; b < kStageBlocks[s]; ++b) {
            const std::string prefix = "encoder.layer" + std::to_string(s + 1) + "." + std::to_string(b);
            const std::size_t stride = (b == 0 && s > 0) ? 2 : 1;
            Block block{make_conv_bn(prefix + ".conv1", in, out, 3, stride, 1, rng),
                        make_conv_bn(prefix + ".conv2", out, out, 3, 1, 1, rng), std::nullopt};
            if (stride != 1 || in != out) block.shortcut = make_conv_bn(prefix + ".downsample", in, out, 1, stride, 0, rng);
            blocks.push_back(block);
            in = out;
        }
        stages_.push_back(std::move(blocks));
    }
    encoder_fc_ = make_dense("encoder.fc", in, config_.feature_dim, false, rng);
    classifier_ = make_dense("classifier", config_.feature_dim, config_.num_classes, false, rng);
    const std::size_t u = config_.feature_dim + config_.num_classes;
    mu_head_ = make_dense("latent.mu", u, config_.latent_dim, false, rng);
    logvar_head_ = make_dense("latent.logvar", u, config_.latent_dim, false, rng);

    const std::size_t side = config_.input_size / 32;
    decoder_fc_ = make_dense("decoder.fc", config_.latent_dim, config_.decoder_base_channels * side * side, true, rng);
    std::size_t channels = config_.decoder_base_channels;
    for (std::size_t k = 0; k < kDecoderStages; ++k) {
        const std::size_t out = std::max<std::size_t>(1, channels / 2);
        const std::string prefix = "decoder.stage" + std::to_string(k + 1);
        decoder_stages_.push_back({make_conv(prefix + ".up", channels, out, 2, 2, 0, true, true, rng),
                                   make_conv(prefix + ".conv1", out, out, 3, 1, 1, false, true, rng),
                                   make_conv(prefix + ".conv2", out, out, 3, 1, 1, false, true, rng)});
        channels = out;
    }
    decoder_out_ = make_conv("decoder.out", channels, config_.input_channels, 1, 1, 0, false, false, rng);

    if (config_.pretrained_weights_path) load_encoder_weights(load_checkpoint(*config_.pretrained_weights_path));
}

template <typename T>
std::size_t Model<T>::add_param(std::string name, Shape shape, std::size_t fan_in, bool rectified, Rng& rng) {
    std::vector<T> values(shape_numel(shape));
    // Kaiming-uniform: gain sqrt(2) before a rectifier, 1 otherwise.
    const double gain_sq = rectified ? 2.0 : 1.0;
    const double bound = std::sqrt(3.0 * gain_sq / static_cast<double>(std::max<std::size_t>(fan_in, 1)));
    for (auto& v : values) v = static_cast<T>(rng.uniform(-bound, bound));
    params_.push_back({std::move(name), Tensor<T>::from_values(std::move(shape), std::move(values), true)});
    return params_.size() - 1;
}

template <typename T>
std::size_t Model<T>::add_constant(std::string name, Shape shape, T fill) {
    params_.push_back({std::move(name), Tensor<T>::full(std::move(shape), fill, true)});
    return params_.size() - 1;
}

template <typename T>
typename Model<T>::ConvBn Model<T>::make_conv_bn(const std::string& prefix, std::size_t in, std::size_t out,
                                                 std::size_t kernel, std::size_t stride, std::size_t padding,
                                                 Rng& rng) {
    ConvBn layer{};
    layer.weight = add_param(prefix + ".weight", {out, in, kernel, kernel}, in * kernel * kernel, true, rng);
    layer.gamma = add_constant(prefix + ".bn.weight", {out}, T(1));
    layer.beta = add_constant(prefix + ".bn.bias", {out}, T(0));
    stat_names_.push_back(prefix + ".bn");
    stats_.push_back({std::vector<T>(out, T(0)), std::vector<T>(out, T(1))});
    layer.stats = stats_.size() - 1;
    layer.stride = stride;
    layer.padding = padding;
    return layer;
}

template <typename T>
typename Model<T>::Dense Model<T>::make_dense(const std::string& prefix, std::size_t in, std::size_t out,
                                             bool rectified, Rng& rng) {
    Dense layer{};
    layer.weight = add_param(prefix + ".weight", {out, in}, in, rectified, rng);
    layer.bias = add_constant(prefix + ".bias", {out}, T(0));
    return layer;
}

template <typename T>
typename Model<T>::Conv Model<T>::make_conv(const std::string& prefix, std::size_t in, std::size_t out,
                                            std::size_t kernel, std::size_t stride, std::size_t padding,
                                            bool transposed, bool rectified, Rng& rng) {
    Conv layer{};
    // A stride-s transposed kernel of side K feeds each output from in * (K/s)^2 inputs.
    const std::size_t fan_in = transposed ? in * kernel * kernel / (stride * stride) : in * kernel * kernel;
    const Shape shape = transposed ? Shape{in, out, kernel, kernel} : Shape{out, in, kernel, kernel};
    layer.weight = add_param(prefix + ".weight", shape, fan_in, rectified, rng);
    layer.bias = add_constant(prefix + ".bias", {out}, T(0));
    layer.stride = stride;
    layer.padding = padding;
    return layer;
}

template <typename T>
Tensor<T> Model<T>::apply(const ConvBn& layer, const Tensor<T>& x, Mode mode) {
    auto y = ops::conv2d(x, params_[layer.weight].tensor, Tensor<T>(), layer.stride, layer.padding);
    return ops::batch_norm(y, params_[layer.gamma].tensor, params_[layer.beta].tensor, stats_[layer.stats],
                           mode == Mode::Train);
}

template <typename T>
Tensor<T> Model<T>::apply(const Dense& layer, const Tensor<T>& x) const {
    return ops::linear(x, params_[layer.weight].tensor, params_[layer.bias].tensor);
}

template <typename T>
Tensor<T> Model<T>::residual_block(std::size_t stage, std::size_t index, const Tensor<T>& x, Mode mode) {
    const Block& block = stages_.at(stage).at(index);
    auto y = ops::relu(apply(block.first, x, mode));
    y = apply(block.second, y, mode);
    const auto shortcut = block.shortcut ? apply(*block.shortcut, x, mode) : x;
    return ops::relu(ops::add(y, shortcut));
}

template <typename T>
Tensor<T> Model<T>::encode(const Tensor<T>& x, Mode mode) {
    const Shape expected{x.rank() == 4 ? x.dim(0) : 0, config_.input_channels, config_.input_size,
                         config_.input_size};
    if (x.rank() != 4 || x.shape() != expected)
        throw ContractViolation("encode: input " + shape_to_string(x.shape()) + " does not match configured Bx" +
                                std::to_string(config_.input_channels) + "x" + std::to_string(config_.input_size) +
                                "x" + std::to_string(config_.input_size));
    auto y = ops::relu(apply(stem_, x, mode));
    y = ops::max_pool2d(y, 3, 2, 1);
    for (std::size_t s = 0; s < stages_.size(); ++s)
        for (std::size_t b = 0; b < stages_[s].size(); ++b) y = residual_block(s, b, y, mode);
    return apply(encoder_fc_, ops::global_avg_pool(y));
}

template <typename T>
Tensor<T> Model<T>::classify(const Tensor<T>& h) const {
    if (h.rank() != 2 || h.dim(1) != config_.feature_dim)
        throw ContractViolation("classify: expected Bx" + std::to_string(config_.feature_dim) + " features, got " +
                                shape_to_string(h.shape()));
    return apply(classifier_, h);
}

template <typename T>
std::pair<Tensor<T>, Tensor<T>> Model<T>::latent_params(const Tensor<T>& h, const Tensor<T>& y_hat) const {
    if (h.rank() != 2 || h.dim(1) != config_.feature_dim || y_hat.rank() != 2 ||
        y_hat.dim(1) != config_.num_classes || y_hat.dim(0) != h.dim(0))
        throw ContractViolation("latent_params: h " + shape_to_string(h.shape()) + " and y_hat " +
                                shape_to_string(y_hat.shape()) + " do not match Bx" +
                                std::to_string(config_.feature_dim) + " and Bx" +
                                std::to_string(config_.num_classes));
    const auto u = ops::concat<T>({h, config_.concat_logits ? y_hat : ops::softmax(y_hat)});
    return {apply(mu_head_, u), apply(logvar_head_, u)};
}

template <typename T>
Tensor<T> Model<T>::decode(const Tensor<T>& z) const {
    if (z.rank() != 2 || z.dim(1) != config_.latent_dim)
        throw ContractViolation("decode: expected Bx" + std::to_string(config_.latent_dim) + " latents, got " +
                                shape_to_string(z.shape()));
    const std::size_t side = config_.input_size / 32;
    auto y = ops::relu(apply(decoder_fc_, z));
    y = ops::reshape(y, {z.dim(0), config_.decoder_base_channels, side, side});
    for (const auto& stage : decoder_stages_) {
        y = ops::relu(ops::transposed_conv2d(y, params_[stage.up.weight].tensor, params_[stage.up.bias].tensor,
                                             stage.up.stride, stage.up.padding));
        for (const Conv* c : {&stage.refine1, &stage.refine2})
            y = ops::relu(ops::conv2d(y, params_[c->weight].tensor, params_[c->bias].tensor, c->stride, c->padding));
    }
    y = ops::conv2d(y, params_[decoder_out_.weight].tensor, params_[decoder_out_.bias].tensor, 1, 0);
    return ops::sigmoid(y);
}

template <typename T>
ForwardOutput<T> Model<T>::finish_forward(const Tensor<T>& x, Mode mode, const Tensor<T>* noise, std::uint64_t seed) {
    ForwardOutput<T> out;
    out.h = encode(x, mode);
    out.y_hat = classify(out.h);
    std::tie(out.mu, out.logvar) = latent_params(out.h, out.y_hat);
    out.sigma = ops::exp(ops::scale(out.logvar, T(0.5)));
    if (noise)
        out.z = ops::add(out.mu, ops::mul(out.sigma, *noise));
    else if (mode == Mode::Eval)
        out.z = out.mu;
    else
        out.z = reparameterize(out.mu, out.sigma, seed);
    out.x_hat = decode(out.z);
    return out;
}

template <typename T>
ForwardOutput<T> Model<T>::forward(const Tensor<T>& x, Mode mode, std::uint64_t noise_seed) {
    return finish_forward(x, mode, nullptr, noise_seed);
}

template <typename T>
ForwardOutput<T> Model<T>::forward_with_noise(const Tensor<T>& x, Mode mode, const Tensor<T>& noise) {
    return finish_forward(x, mode, &noise, 0);
}

template <typename T>
Tensor<T>& Model<T>::parameter(const std::string& name) {
    for (auto& p : params_)
        if (p.name == name) return p.tensor;
    throw ContractViolation("no parameter named '" + name + "'");
}

template <typename T>
std::size_t Model<T>::parameter_count() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += p.tensor.numel();
    return n;
}

template <typename T>
std::map<std::string, std::size_t> Model<T>::parameter_counts_by_group() const {
    std::map<std::string, std::size_t> counts;
    for (const auto& p : params_) counts[group_of(p.name)] += p.tensor.numel();
    return counts;
}

template <typename T>
void Model<T>::zero_grad() {
    for (auto& p : params_) p.tensor.zero_grad();
}

template <typename T>
Checkpoint Model<T>::state() const {
    Checkpoint ck;
    ck.metadata = config_.to_metadata();
    for (const auto& p : params_)
        ck.put(p.name, p.tensor.shape(), std::vector<float>(p.tensor.values().begin(), p.tensor.values().end()));
    for (std::size_t i = 0; i < stats_.size(); ++i) {
        const auto& s = stats_[i];
        ck.put(stat_names_[i] + ".running_mean", {s.running_mean.size()},
               std::vector<float>(s.running_mean.begin(), s.running_mean.end()));
        ck.put(stat_names_[i] + ".running_var", {s.running_var.size()},
               std::vector<float>(s.running_var.begin(), s.running_var.end()));
    }
    return ck;
}

namespace {

template <typename T>
void copy_array(const Checkpoint& ck, const std::string& name, const Shape& shape, std::span<T> target) {
    const NamedArray* a = ck.find(name);
    if (!a) throw IoError("checkpoint lacks array for layer '" + name + "'");
    if (a->shape != shape)
        throw IoError("shape mismatch for layer '" + name + "': checkpoint " + shape_to_string(a->shape) +
                      ", model " + shape_to_string(shape));
    std::transform(a->values.begin(), a->values.end(), target.begin(), [](float v) { return static_cast<T>(v); });
}

} // namespace

template <typename T>
void Model<T>::load_state(const Checkpoint& ck) {
    const auto other = ArchitectureConfig::from_metadata(ck.metadata);
    auto mine = config_;
    mine.pretrained_weights_path.reset();
    if (!(other == mine)) {
        for (const auto& [k, v] : config_.to_metadata())
            if (ck.meta(k) != v)
                throw IoError("checkpoint architecture mismatch: " + k + " is " + ck.meta(k).value_or("?") +
                              ", model has " + v);
    }
    // Validate every array before touching the model.
    for (const auto& p : params_) {
        const NamedArray* a = ck.find(p.name);
        if (!a) throw IoError("checkpoint lacks array for layer '" + p.name + "'");
        if (a->shape != p.tensor.shape())
            throw IoError("shape mismatch for layer '" + p.name + "': checkpoint " + shape_to_string(a->shape) +
                          ", model " + shape_to_string(p.tensor.shape()));
    }
    for (auto& p : params_) copy_array<T>(ck, p.name, p.tensor.shape(), p.tensor.mutable_values());
    for (std::size_t i = 0; i < stats_.size(); ++i) {
        auto& s = stats_[i];
        copy_array<T>(ck, stat_names_[i] + ".running_mean", {s.running_mean.size()}, s.running_mean);
        copy_array<T>(ck, stat_names_[i] + ".running_var", {s.running_var.size()}, s.running_var);
    }
}

template <typename T>
void Model<T>::load_encoder_weights(const Checkpoint& ck) {
    std::size_t loaded = 0;
    for (auto& p : params_) {
        if (p.name.rfind("encoder.", 0) != 0) continue;
        copy_array<T>(ck, p.name, p.tensor.shape(), p.tensor.mutable_values());
        ++loaded;
    }
    for (std::size_t i = 0; i < stats_.size(); ++i) {
        auto& s = stats_[i];
        if (ck.find(stat_names_[i] + ".running_mean")) {
            copy_array<T>(ck, stat_names_[i] + ".running_mean", {s.running_mean.size()}, s.running_mean);
            copy_array<T>(ck, stat_names_[i] + ".running_var", {s.running_var.size()}, s.running_var);
        }
    }
    log_info("loaded " + std::to_string(loaded) + " pretrained encoder arrays");
}

template <typename T>
std::uint64_t Model<T>::checksum() const {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    auto mix = [&](std::span<const T> values) {
        const auto* bytes = reinterpret_cast<const unsigned char*>(values.data());
        for (std::size_t i = 0; i < values.size_bytes(); ++i) {
            h ^= bytes[i];
            h *= 0x100000001b3ULL;
        }
    };
    for (const auto& p : params_) mix(p.tensor.values());
    for (const auto& s : stats_) {
        mix(s.running_mean);
        mix(s.running_var);
    }
    return h;
}

template <typename T>
Model<T> model_from_checkpoint(const Checkpoint& checkpoint) {
    Model<T> model(ArchitectureConfig::from_metadata(checkpoint.metadata), 0);
    model.load_state(checkpoint);
    return model;
}

template class Model<float>;
template class Model<double>;
template Model<float> model_from_checkpoint<float>(const Checkpoint&);
template Model<double> model_from_checkpoint<double>(const Checkpoint&);
template Tensor<float> reparameterize<float>(const Tensor<float>&, const Tensor<float>&, std::uint64_t);
template Tensor<double> reparameterize<double>(const Tensor<double>&, const Tensor<double>&, std::uint64_t);
template Tensor<float> standard_normal_noise<float>(const Shape&, std::uint64_t);
template Tensor<double> standard_normal_noise<double>(const Shape&, std::uint64_t);

} // namespace octvae
