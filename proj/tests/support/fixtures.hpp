#pragma once

#include <cstdint>
#include <filesystem>

#include "octvae/data.hpp"
#include "octvae/image_io.hpp"
#include "octvae/model.hpp"

namespace octvae::testing {

/// Procedural OCT-like B-scan: dark speckled background with a bright layered
/// retina band whose shape carries the class (flat, drusen bumps, dark
/// cysts, sub-retinal mass). `difficulty` in [0, 1] scales speckle and
/// shrinks the class-specific features.
Image8 synthetic_oct(std::size_t label, std::size_t size, std::uint64_t seed, double difficulty = 0.0);

/// Writes `<root>/{NORMAL,DRUSEN,DME,CNV}/img_XXXX.png`, `per_class` images each.
void write_synthetic_dataset(const std::filesystem::path& root, std::size_t per_class, std::size_t size,
                             std::uint64_t seed, double difficulty = 0.0);

/// Writes a synthetic dataset under `root` and splits it with `seed`.
DatasetManifest synthetic_manifest(const std::filesystem::path& root, std::size_t per_class, std::size_t size,
                                   std::uint64_t seed, std::size_t train_per_class, std::size_t val_per_class,
                                   double difficulty = 0.0);

/// Grey texture built from random plane waves whose frequency band and
/// orientation spread depend on the class, plus white noise of std `noise`.
/// Contrast and mean level vary per image.
Image8 texture_image(std::size_t label, std::size_t size, std::uint64_t seed, double noise);

/// Writes `per_class` texture images per class under `root` and splits them with `seed`.
DatasetManifest texture_manifest(const std::filesystem::path& root, std::size_t per_class, std::size_t size,
                                 std::uint64_t seed, std::size_t train_per_class, std::size_t val_per_class,
                                 double noise);

/// Channel widths divided by eight, latent size 16, input SxS.
ArchitectureConfig reduced_architecture(std::size_t size);

void write_jpeg(const std::filesystem::path& path, const Image8& image, int quality = 95);

/// Fresh empty directory under the system temp dir, removed on destruction.
class TempDir {
public:
    explicit TempDir(const std::string& tag);
    ~TempDir();
    TempDir(const TempDir&) = delete;
    TempDir& operator=(const TempDir&) = delete;
    const std::filesystem::path& path() const { return path_; }

private:
    std::filesystem::path path_;
};

} // namespace octvae::testing
