#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <vector>

namespace octvae {

/// 8-bit image, planar channel-major layout (C x H x W).
struct Image8 {
    std::size_t channels = 1;
    std::size_t height = 0;
    std::size_t width = 0;
    std::vector<std::uint8_t> pixels;

    std::uint8_t at(std::size_t c, std::size_t y, std::size_t x) const { return pixels[(c * height + y) * width + x]; }
};

/// Decodes an 8-bit PNG or JPEG (detected from the file signature).
/// Grayscale sources yield one channel, colour sources three; alpha is dropped.
/// Throws IoError on unreadable or corrupt files.
Image8 read_image(const std::filesystem::path& path);

/// Writes a 1- or 3-channel image as PNG. Output bytes are a pure function of the image.
void write_png(const std::filesystem::path& path, const Image8& image);

} // namespace octvae
