#include <algorithm>
#include <array>
#include <cctype>
#include <cmath>

#include "octvae/error.hpp"
#include "octvae/latent_tools.hpp"

namespace octvae {

namespace {

using Rgb = std::array<std::uint8_t, 3>;

constexpr std::array<Rgb, 8> kPalette{{{31, 119, 180},
                                       {255, 127, 14},
                                       {44, 160, 44},
                                       {214, 39, 40},
                                       {148, 103, 189},
                                       {140, 86, 75},
                                       {227, 119, 194},
                                       {127, 127, 127}}};

// 5x7 glyphs, one byte per row, bit 4 is the leftmost column.
struct Glyph {
    char c;
    std::array<std::uint8_t, 7> rows;
};

constexpr Glyph kFont[] = {
    {'A', {0x0E, 0x11, 0x11, 0x1F, 0x11, 0x11, 0x11}}, {'B', {0x1E, 0x11, 0x11, 0x1E, 0x11, 0x11, 0x1E}},
    {'C', {0x0E, 0x11, 0x10, 0x10, 0x10, 0x11, 0x0E}}, {'D', {0x1E, 0x11, 0x11, 0x11, 0x11, 0x11, 0x1E}},
    {'E', {0x1F, 0x10, 0x10, 0x1E, 0x10, 0x10, 0x1F}}, {'F', {0x1F, 0x10, 0x10, 0x1E, 0x10, 0x10, 0x10}},
    {'G', {0x0E, 0x11, 0x10, 0x17, 0x11, 0x11, 0x0F}}, {'H', {0x11, 0x11, 0x11, 0x1F, 0x11, 0x11, 0x11}},
    {'I', {0x0E, 0x04, 0x04, 0x04, 0x04, 0x04, 0x0E}}, {'J', {0x07, 0x02, 0x02, 0x02, 0x02, 0x12, 0x0C}},
    {'K', {0x11, 0x12, 0x14, 0x18, 0x14, 0x12, 0x11}}, {'L', {0x10, 0x10, 0x10, 0x10, 0x10, 0x10, 0x1F}},
    {'M', {0x11, 0x1B, 0x15, 0x15, 0x11, 0x11, 0x11}}, {'N', {0x11, 0x11, 0x19, 0x15, 0x13, 0x11, 0x11}},
    {'O', {0x0E, 0x11, 0x11, 0x11, 0x11, 0x11, 0x0E}}, {'P', {0x1E, 0x11, 0x11, 0x1E, 0x10, 0x10, 0x10}},
    {'Q', {0x0E, 0x11, 0x11, 0x11, 0x15, 0x12, 0x0D}}, {'R', {0x1E, 0x11, 0x11, 0x1E, 0x14, 0x12, 0x11}},
    {'S', {0x0F, 0x10, 0x10, 0x0E, 0x01, 0x01, 0x1E}}, {'T', {0x1F, 0x04, 0x04, 0x04, 0x04, 0x04, 0x04}},
    {'U', {0x11, 0x11, 0x11, 0x11, 0x11, 0x11, 0x0E}}, {'V', {0x11, 0x11, 0x11, 0x11, 0x11, 0x0A, 0x04}},
    {'W', {0x11, 0x11, 0x11, 0x15, 0x15, 0x15, 0x0A}}, {'X', {0x11, 0x11, 0x0A, 0x04, 0x0A, 0x11, 0x11}},
    {'Y', {0x11, 0x11, 0x0A, 0x04, 0x04, 0x04, 0x04}}, {'Z', {0x1F, 0x01, 0x02, 0x04, 0x08, 0x10, 0x1F}},
    {'0', {0x0E, 0x11, 0x13, 0x15, 0x19, 0x11, 0x0E}}, {'1', {0x04, 0x0C, 0x04, 0x04, 0x04, 0x04, 0x0E}},
    {'2', {0x0E, 0x11, 0x01, 0x02, 0x04, 0x08, 0x1F}}, {'3', {0x1F, 0x02, 0x04, 0x02, 0x01, 0x11, 0x0E}},
    {'4', {0x02, 0x06, 0x0A, 0x12, 0x1F, 0x02, 0x02}}, {'5', {0x1F, 0x10, 0x1E, 0x01, 0x01, 0x11, 0x0E}},
    {'6', {0x06, 0x08, 0x10, 0x1E, 0x11, 0x11, 0x0E}}, {'7', {0x1F, 0x01, 0x02, 0x04, 0x08, 0x08, 0x08}},
    {'8', {0x0E, 0x11, 0x11, 0x0E, 0x11, 0x11, 0x0E}}, {'9', {0x0E, 0x11, 0x11, 0x0F, 0x01, 0x02, 0x0C}},
    {'-', {0x00, 0x00, 0x00, 0x1F, 0x00, 0x00, 0x00}}, {'_', {0x00, 0x00, 0x00, 0x00, 0x00, 0x00, 0x1F}},
    {'.', {0x00, 0x00, 0x00, 0x00, 0x00, 0x0C, 0x0C}},
};

const Glyph* find_glyph(char c) {
    const char u = static_cast<char>(std::toupper(static_cast<unsigned char>(c)));
    for (const auto& g : kFont)
        if (g.c == u) return &g;
    return nullptr;
}

class Canvas {
public:
    Canvas(std::size_t w, std::size_t h) : image_{3, h, w, std::vector<std::uint8_t>(3 * w * h, 255)} {}

    void set(long x, long y, const Rgb& color) {
        if (x < 0 || y < 0 || x >= long(image_.width) || y >= long(image_.height)) return;
        for (std::size_t c = 0; c < 3; ++c)
            image_.pixels[(c * image_.height + std::size_t(y)) * image_.width + std::size_t(x)] = color[c];
    }
    void fill(long x0, long y0, long x1, long y1, const Rgb& color) {
        for (long y = y0; y <= y1; ++y)
            for (long x = x0; x <= x1; ++x) set(x, y, color);
    }
    void frame(long x0, long y0, long x1, long y1, const Rgb& color) {
        fill(x0, y0, x1, y0, color);
        fill(x0, y1, x1, y1, color);
        fill(x0, y0, x0, y1, color);
        fill(x1, y0, x1, y1, color);
    }
    void disc(long cx, long cy, long r, const Rgb& color) {
        for (long dy = -r; dy <= r; ++dy)
            for (long dx = -r; dx <= r; ++dx)
                if (dx * dx + dy * dy <= r * r) set(cx + dx, cy + dy, color);
    }
    // Scale-2 text; unknown characters render as blanks.
    void text(long x, long y, std::string_view s, const Rgb& color) {
        for (char ch : s) {
            if (const Glyph* g = find_glyph(ch))
                for (long r = 0; r < 7; ++r)
                    for (long c = 0; c < 5; ++c)
                        if (g->rows[std::size_t(r)] & (0x10 >> c)) fill(x + 2 * c, y + 2 * r, x + 2 * c + 1, y + 2 * r + 1, color);
            x += 12;
        }
    }
    Image8 release() { return std::move(image_); }

private:
    Image8 image_;
};

} // namespace

Image8 render_scatter(const Embedding2D& e, std::size_t width, std::size_t height) {
    if (width < 200 || height < 150) throw ContractViolation("render_scatter: canvas too small");
    if (e.coords.size() != 2 * e.rows || e.labels.size() != e.rows)
        throw ContractViolation("render_scatter: embedding fields disagree in size");
    Canvas canvas(width, height);
    const Rgb black{0, 0, 0};
    const long margin = 20, legend_w = 150;
    const long x0 = margin, y0 = margin, x1 = long(width) - legend_w - margin, y1 = long(height) - margin;
    canvas.frame(x0, y0, x1, y1, black);

    double min_x = INFINITY, max_x = -INFINITY, min_y = INFINITY, max_y = -INFINITY;
    for (std::size_t i = 0; i < e.rows; ++i) {
        min_x = std::min(min_x, e.coords[2 * i]);
        max_x = std::max(max_x, e.coords[2 * i]);
        min_y = std::min(min_y, e.coords[2 * i + 1]);
        max_y = std::max(max_y, e.coords[2 * i + 1]);
    }
    const double span_x = max_x > min_x ? max_x - min_x : 1.0, span_y = max_y > min_y ? max_y - min_y : 1.0;
    const long pad = 8;
    std::size_t classes = 0;
    for (std::size_t i = 0; i < e.rows; ++i) {
        const long px = x0 + pad + std::lround((e.coords[2 * i] - min_x) / span_x * double(x1 - x0 - 2 * pad));
        const long py = y1 - pad - std::lround((e.coords[2 * i + 1] - min_y) / span_y * double(y1 - y0 - 2 * pad));
        canvas.disc(px, py, 3, kPalette[e.labels[i] % kPalette.size()]);
        classes = std::max(classes, e.labels[i] + 1);
    }

    const long lx = x1 + 12;
    long ly = y0 + 4;
    for (std::size_t c = 0; c < std::max(classes, kNumClasses); ++c) {
        canvas.fill(lx, ly, lx + 11, ly + 11, kPalette[c % kPalette.size()]);
        canvas.text(lx + 18, ly - 1, c < kNumClasses ? class_name(c) : std::to_string(c), black);
        ly += 22;
    }
    return canvas.release();
}

} // namespace octvae
