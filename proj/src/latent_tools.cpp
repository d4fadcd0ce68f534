#include "octvae/latent_tools.hpp"

#include <cmath>

#include "octvae/checkpoint.hpp"
#include "octvae/error.hpp"
#include "octvae/rng.hpp"
#include "octvae/text.hpp"

namespace octvae {

namespace fs = std::filesystem;

std::string_view latent_source_name(LatentSource source) {
    switch (source) {
    case LatentSource::Mu: return "mu";
    case LatentSource::Z: return "z";
    case LatentSource::H: return "h";
    }
    return "?";
}

std::optional<LatentSource> parse_latent_source(std::string_view text) {
    if (text == "mu") return LatentSource::Mu;
    if (text == "z") return LatentSource::Z;
    if (text == "h") return LatentSource::H;
    return std::nullopt;
}

template <typename T>
Tensor<T> decode_prior(const Model<T>& model, std::size_t count, std::uint64_t seed, bool mean) {
    if (count == 0) throw ContractViolation("decode_prior: count must be at least 1");
    const Shape shape{count, model.config().latent_dim};
    NoGradGuard no_grad;
    return model.decode(mean ? Tensor<T>::zeros(shape) : standard_normal_noise<T>(shape, seed));
}

template <typename T>
std::vector<Image8> to_images(const Tensor<T>& pixels) {
    if (pixels.rank() != 4) throw ContractViolation("to_images: expected BxCxHxW, got " + shape_to_string(pixels.shape()));
    const std::size_t b = pixels.dim(0), c = pixels.dim(1), h = pixels.dim(2), w = pixels.dim(3);
    const auto v = pixels.values();
    std::vector<Image8> out;
    for (std::size_t i = 0; i < b; ++i) {
        Image8 img{c, h, w, std::vector<std::uint8_t>(c * h * w)};
        for (std::size_t k = 0; k < img.pixels.size(); ++k) {
            const double x = std::clamp(double(v[i * c * h * w + k]), 0.0, 1.0);
            img.pixels[k] = static_cast<std::uint8_t>(std::lround(x * 255.0));
        }
        out.push_back(std::move(img));
    }
    return out;
}

template <typename T>
std::vector<fs::path> sample_prior(const Model<T>& model, std::size_t count, std::uint64_t seed,
                                   const fs::path& out_dir, bool mean) {
    fs::create_directories(out_dir);
    const auto images = to_images(decode_prior(model, mean ? 1 : count, seed, mean));
    std::vector<fs::path> paths;
    for (std::size_t i = 0; i < images.size(); ++i) {
        char name[32];
        std::snprintf(name, sizeof name, "sample_%04zu.png", i);
        paths.push_back(out_dir / (mean ? "prior_mean.png" : name));
        write_png(paths.back(), images[i]);
    }
    return paths;
}

template <typename T>
LatentMatrix extract_latents(Model<T>& model, const DatasetManifest& manifest, Split split, LatentSource source,
                             std::uint64_t seed, std::size_t batch_size) {
    if (manifest.indices(split).empty())
        throw ContractViolation("extract_latents: split " + std::string(split_name(split)) + " is empty");
    const PreprocessConfig pre{model.config().input_size, model.config().input_channels};
    NoGradGuard no_grad;
    LatentMatrix m;
    m.dim = source == LatentSource::H ? model.config().feature_dim : model.config().latent_dim;
    BatchStream stream(manifest, manifest.indices(split), batch_size, pre);
    while (auto batch = stream.next()) {
        const auto h = model.encode(to_precision<T>(batch->pixels), Mode::Eval);
        Tensor<T> rows = h;
        if (source != LatentSource::H) {
            const auto [mu, logvar] = model.latent_params(h, model.classify(h));
            rows = mu;
            if (source == LatentSource::Z) {
                const auto sigma = ops::exp(ops::scale(logvar, T(0.5)));
                std::vector<T> noise;
                for (std::size_t entry : batch->entries) {
                    const auto e = standard_normal_noise<T>({1, m.dim}, derive_seed(seed, entry));
                    noise.insert(noise.end(), e.values().begin(), e.values().end());
                }
                rows = ops::add(mu, ops::mul(sigma, Tensor<T>::from_values(mu.shape(), std::move(noise))));
            }
        }
        for (T v : rows.values()) {
            if (!std::isfinite(v)) throw NumericError("extract_latents: non-finite latent value");
            m.values.push_back(double(v));
        }
        for (std::size_t b = 0; b < batch->entries.size(); ++b) {
            m.labels.push_back(batch->labels[b]);
            m.ids.push_back(manifest.entries[batch->entries[b]].path);
        }
        m.rows += batch->entries.size();
    }
    return m;
}

std::string embedding_to_csv(const Embedding2D& e) {
    std::string out = "id,label,x,y\n";
    for (std::size_t i = 0; i < e.rows; ++i) {
        const std::string label =
            e.labels[i] < kNumClasses ? std::string(class_name(e.labels[i])) : std::to_string(e.labels[i]);
        out += csv_field(e.ids[i]) + "," + label + "," + format_double(e.coords[2 * i]) + "," +
               format_double(e.coords[2 * i + 1]) + "\n";
    }
    return out;
}

Embedding2D embedding_from_csv(std::string_view text) {
    const auto lines = split_lines(text);
    if (lines.empty() || lines[0] != "id,label,x,y") throw IoError("embedding CSV header must be 'id,label,x,y'");
    Embedding2D e;
    for (std::size_t i = 1; i < lines.size(); ++i) {
        if (lines[i].empty()) continue;
        const auto f = split_csv_line(lines[i], i + 1, "embedding CSV");
        double x = 0, y = 0;
        const auto label = f.size() == 4 ? parse_class(f[1]) : std::nullopt;
        if (!label || !parse_double(f[2], x) || !parse_double(f[3], y))
            throw IoError("embedding CSV line " + std::to_string(i + 1) + " is malformed");
        e.ids.push_back(f[0]);
        e.labels.push_back(*label);
        e.coords.push_back(x);
        e.coords.push_back(y);
        ++e.rows;
    }
    return e;
}

void export_embedding(const Embedding2D& embedding, const fs::path& stem) {
    auto with = [&](const char* ext) {
        auto p = stem;
        p += ext;
        return p;
    };
    if (stem.has_parent_path()) fs::create_directories(stem.parent_path());
    write_file_atomic(with(".csv"), embedding_to_csv(embedding));
    write_png(with(".png"), render_scatter(embedding));
}

#define OCTVAE_INSTANTIATE(T)                                                                                   \
    template Tensor<T> decode_prior<T>(const Model<T>&, std::size_t, std::uint64_t, bool);                     \
    template std::vector<Image8> to_images<T>(const Tensor<T>&);                                               \
    template std::vector<fs::path> sample_prior<T>(const Model<T>&, std::size_t, std::uint64_t, const fs::path&, \
                                                   bool);                                                      \
    template LatentMatrix extract_latents<T>(Model<T>&, const DatasetManifest&, Split, LatentSource,           \
                                             std::uint64_t, std::size_t);

OCTVAE_INSTANTIATE(float)
OCTVAE_INSTANTIATE(double)

} // namespace octvae
