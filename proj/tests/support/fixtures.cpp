#include "fixtures.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numbers>
#include <vector>

#include <jpeglib.h>
#include <unistd.h>

#include "octvae/error.hpp"
#include "octvae/rng.hpp"

namespace octvae::testing {

namespace fs = std::filesystem;

Image8 synthetic_oct(std::size_t label, std::size_t size, std::uint64_t seed, double difficulty) {
    Rng rng(derive_seed(seed, label));
    const double n = static_cast<double>(size);
    const double feature = 1.0 - 0.6 * difficulty;
    const double speckle = 0.04 + 0.25 * difficulty;

    const double center = n * rng.uniform(0.42, 0.55);
    const double curvature = rng.uniform(-0.25, 0.25) / n;
    const double thickness = n * rng.uniform(0.16, 0.2) * (label == 2 ? 1.0 + 0.35 * feature : 1.0);

    struct Blob {
        double x, y, rx, ry;
    };
    std::vector<Blob> blobs;
    if (label == 1) { // drusen: dome-shaped elevations of the lower boundary
        const int count = 3 + static_cast<int>(rng.uniform_index(3));
        for (int i = 0; i < count; ++i)
            blobs.push_back({n * rng.uniform(0.12, 0.88), 0.0, n * rng.uniform(0.04, 0.07), n * 0.09 * feature});
    } else if (label == 2) { // DME: dark intraretinal cysts
        const int count = 2 + static_cast<int>(rng.uniform_index(3));
        for (int i = 0; i < count; ++i)
            blobs.push_back({n * rng.uniform(0.2, 0.8), rng.uniform(-0.15, 0.15), n * rng.uniform(0.05, 0.09) * feature,
                             n * rng.uniform(0.03, 0.05) * feature});
    } else if (label == 3) { // CNV: bright mass below the band lifting it
        blobs.push_back({n * rng.uniform(0.35, 0.65), 0.0, n * rng.uniform(0.14, 0.2), n * 0.16 * feature});
    }

    Image8 img{1, size, size, std::vector<std::uint8_t>(size * size)};
    for (std::size_t yi = 0; yi < size; ++yi) {
        for (std::size_t xi = 0; xi < size; ++xi) {
            const double x = static_cast<double>(xi), y = static_cast<double>(yi);
            double top = center + curvature * (x - n / 2) * (x - n / 2) - thickness / 2;
            double bottom = top + thickness;
            double lift = 0.0;
            if (label == 1 || label == 3) {
                for (const auto& b : blobs) {
                    const double t = (x - b.x) / b.rx;
                    if (std::abs(t) < 1.0) lift = std::max(lift, b.ry * std::sqrt(1.0 - t * t));
                }
            }
            if (label == 3) top -= lift;
            bottom -= (label == 1 ? lift : 0.0);
            double v = 0.08;
            if (y >= top && y <= bottom) {
                const double depth = (y - top) / std::max(1.0, bottom - top);
                v = 0.45 + 0.3 * std::cos(depth * 3.0 * std::numbers::pi) * 0.5 + (depth > 0.85 ? 0.35 : 0.0);
                if (label == 2) {
                    for (const auto& b : blobs) {
                        const double cy = (top + bottom) / 2 + b.y * thickness;
                        const double d = ((x - b.x) / b.rx) * ((x - b.x) / b.rx) + ((y - cy) / b.ry) * ((y - cy) / b.ry);
                        if (d < 1.0) v = 0.1;
                    }
                }
            } else if (label == 3 && y > bottom && lift > 0.0 && y < bottom + lift * 0.6) {
                v = 0.7;
            }
            v += speckle * rng.normal();
            img.pixels[yi * size + xi] = static_cast<std::uint8_t>(std::clamp(std::lround(v * 255.0), 0L, 255L));
        }
    }
    return img;
}

void write_synthetic_dataset(const fs::path& root, std::size_t per_class, std::size_t size, std::uint64_t seed,
                             double difficulty) {
    for (std::size_t c = 0; c < kNumClasses; ++c) {
        const fs::path dir = root / std::string(class_name(c));
        fs::create_directories(dir);
        for (std::size_t i = 0; i < per_class; ++i) {
            char name[32];
            std::snprintf(name, sizeof(name), "img_%04zu.png", i);
            write_png(dir / name, synthetic_oct(c, size, derive_seed(seed, c * 100003 + i), difficulty));
        }
    }
}

DatasetManifest synthetic_manifest(const fs::path& root, std::size_t per_class, std::size_t size, std::uint64_t seed,
                                   std::size_t train_per_class, std::size_t val_per_class, double difficulty) {
    write_synthetic_dataset(root, per_class, size, seed, difficulty);
    return make_splits(scan_dataset(root), seed, train_per_class, val_per_class);
}

Image8 texture_image(std::size_t label, std::size_t size, std::uint64_t seed, double noise) {
    // Per class: band of spatial frequencies (cycles per image) and orientation spread.
    struct Band {
        double f_lo, f_hi, angle, spread;
    };
    constexpr double pi = std::numbers::pi;
    constexpr Band bands[kNumClasses] = {
        {2.0, 4.5, 0.0, pi},         // coarse, any orientation
        {5.0, 9.0, 0.0, pi / 6},     // near horizontal waves
        {5.0, 9.0, pi / 2, pi / 6},  // near vertical waves
        {10.0, 16.0, 0.0, pi},       // fine, any orientation
    };
    const Band& b = bands[label];
    Rng rng(seed);
    constexpr int kWaves = 6;
    double fx[kWaves], fy[kWaves], phase[kWaves], amp[kWaves];
    for (int k = 0; k < kWaves; ++k) {
        const double f = rng.uniform(b.f_lo, b.f_hi);
        const double a = b.angle + rng.uniform(-b.spread / 2, b.spread / 2);
        fx[k] = f * std::cos(a);
        fy[k] = f * std::sin(a);
        phase[k] = rng.uniform(0.0, 2 * pi);
        amp[k] = rng.uniform(0.5, 1.0);
    }
    const double contrast = rng.uniform(0.15, 0.3), level = rng.uniform(0.35, 0.65);
    Image8 img{1, size, size, std::vector<std::uint8_t>(size * size)};
    for (std::size_t yi = 0; yi < size; ++yi)
        for (std::size_t xi = 0; xi < size; ++xi) {
            const double x = double(xi) / double(size), y = double(yi) / double(size);
            double v = 0.0;
            for (int k = 0; k < kWaves; ++k) v += amp[k] * std::sin(2 * pi * (fx[k] * x + fy[k] * y) + phase[k]);
            v = level + contrast * v / std::sqrt(double(kWaves)) + noise * rng.normal();
            img.pixels[yi * size + xi] = static_cast<std::uint8_t>(std::clamp(std::lround(v * 255.0), 0L, 255L));
        }
    return img;
}

DatasetManifest texture_manifest(const fs::path& root, std::size_t per_class, std::size_t size, std::uint64_t seed,
                                 std::size_t train_per_class, std::size_t val_per_class, double noise) {
    for (std::size_t c = 0; c < kNumClasses; ++c) {
        const fs::path dir = root / std::string(class_name(c));
        fs::create_directories(dir);
        for (std::size_t i = 0; i < per_class; ++i) {
            char name[32];
            std::snprintf(name, sizeof(name), "tex_%04zu.png", i);
            write_png(dir / name, texture_image(c, size, derive_seed(seed, c * 100003 + i), noise));
        }
    }
    return make_splits(scan_dataset(root), seed, train_per_class, val_per_class);
}

ArchitectureConfig reduced_architecture(std::size_t size) {
    ArchitectureConfig c;
    c.input_size = size;
    c.encoder_width = 8;
    c.decoder_base_channels = 8;
    c.latent_dim = 16;
    c.feature_dim = 125;
    return c;
}

void write_jpeg(const fs::path& path, const Image8& image, int quality) {
    FILE* file = std::fopen(path.string().c_str(), "wb");
    if (!file) throw IoError("cannot open " + path.string());
    jpeg_compress_struct cinfo;
    jpeg_error_mgr jerr;
    cinfo.err = jpeg_std_error(&jerr);
    jpeg_create_compress(&cinfo);
    jpeg_stdio_dest(&cinfo, file);
    cinfo.image_width = static_cast<JDIMENSION>(image.width);
    cinfo.image_height = static_cast<JDIMENSION>(image.height);
    cinfo.input_components = static_cast<int>(image.channels);
    cinfo.in_color_space = image.channels == 1 ? JCS_GRAYSCALE : JCS_RGB;
    jpeg_set_defaults(&cinfo);
    jpeg_set_quality(&cinfo, quality, TRUE);
    jpeg_start_compress(&cinfo, TRUE);
    std::vector<std::uint8_t> row(image.width * image.channels);
    while (cinfo.next_scanline < cinfo.image_height) {
        const std::size_t y = cinfo.next_scanline;
        for (std::size_t x = 0; x < image.width; ++x)
            for (std::size_t c = 0; c < image.channels; ++c) row[x * image.channels + c] = image.at(c, y, x);
        JSAMPROW ptr = row.data();
        jpeg_write_scanlines(&cinfo, &ptr, 1);
    }
    jpeg_finish_compress(&cinfo);
    jpeg_destroy_compress(&cinfo);
    std::fclose(file);
}

TempDir::TempDir(const std::string& tag) {
    static int counter = 0;
    path_ = fs::temp_directory_path() /
            ("octvae_" + tag + "_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
    fs::remove_all(path_);
    fs::create_directories(path_);
}

TempDir::~TempDir() {
    std::error_code ec;
    fs::remove_all(path_, ec);
}

} // namespace octvae::testing
