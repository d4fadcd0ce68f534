#include "octvae/data.hpp"

#include <algorithm>
#include <cctype>
#include <charconv>
#include <cmath>
#include <fstream>
#include <sstream>

#include "octvae/error.hpp"
#include "octvae/log.hpp"
#include "octvae/rng.hpp"
#include "octvae/text.hpp"

namespace octvae {

namespace fs = std::filesystem;

namespace {

std::string upper(std::string_view text) {
    std::string out(text);
    for (auto& c : out) c = static_cast<char>(std::toupper(static_cast<unsigned char>(c)));
    return out;
}

bool is_image_file(const fs::path& path) {
    const std::string ext = upper(path.extension().string());
    return ext == ".PNG" || ext == ".JPG" || ext == ".JPEG";
}

} // namespace

std::string_view class_name(std::size_t label) {
    if (label >= kNumClasses) throw ContractViolation("class label " + std::to_string(label) + " out of range");
    return kClassNames[label];
}

std::optional<std::size_t> parse_class(std::string_view text) {
    const std::string key = upper(text);
    for (std::size_t i = 0; i < kNumClasses; ++i)
        if (key == kClassNames[i]) return i;
    std::size_t value = 0;
    auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), value);
    if (ec == std::errc() && ptr == text.data() + text.size() && value < kNumClasses) return value;
    return std::nullopt;
}

std::string_view split_name(Split split) {
    switch (split) {
    case Split::Train: return "TRAIN";
    case Split::Val: return "VAL";
    case Split::Test: return "TEST";
    case Split::Unassigned: break;
    }
    return "UNASSIGNED";
}

std::optional<Split> parse_split(std::string_view text) {
    const std::string key = upper(text);
    if (key == "TRAIN") return Split::Train;
    if (key == "VAL") return Split::Val;
    if (key == "TEST") return Split::Test;
    if (key == "UNASSIGNED" || key.empty()) return Split::Unassigned;
    return std::nullopt;
}

std::vector<std::size_t> DatasetManifest::indices(Split split) const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < entries.size(); ++i)
        if (entries[i].split == split) out.push_back(i);
    return out;
}

std::array<std::size_t, kNumClasses> DatasetManifest::class_counts(std::optional<Split> split) const {
    std::array<std::size_t, kNumClasses> counts{};
    for (const auto& e : entries)
        if (!split || e.split == *split) ++counts.at(e.label);
    return counts;
}

DatasetManifest scan_dataset(const fs::path& root) {
    if (!fs::is_directory(root)) throw IoError("dataset root is not a directory: " + root.string());
    DatasetManifest manifest;
    std::array<bool, kNumClasses> seen{};
    std::vector<fs::path> class_dirs;
    for (const auto& entry : fs::directory_iterator(root)) {
        if (!entry.is_directory()) continue;
        class_dirs.push_back(entry.path());
    }
    std::sort(class_dirs.begin(), class_dirs.end());
    for (const auto& dir : class_dirs) {
        const auto label = parse_class(dir.filename().string());
        if (!label || std::isdigit(static_cast<unsigned char>(dir.filename().string()[0]))) {
            log_warning("skipping unknown class folder " + dir.string());
            continue;
        }
        if (seen[*label]) throw IoError("class " + std::string(class_name(*label)) + " has more than one folder");
        seen[*label] = true;
        for (const auto& file : fs::directory_iterator(dir)) {
            if (!file.is_regular_file() || !is_image_file(file.path())) continue;
            manifest.entries.push_back({file.path().generic_string(), *label, Split::Unassigned});
        }
    }
    std::sort(manifest.entries.begin(), manifest.entries.end(),
              [](const ManifestEntry& a, const ManifestEntry& b) { return a.path < b.path; });
    const auto counts = manifest.class_counts();
    for (std::size_t c = 0; c < kNumClasses; ++c) {
        if (seen[c] && counts[c] == 0)
            throw IoError("class " + std::string(class_name(c)) + " has no images under " + root.string());
        if (!seen[c]) log_warning("no folder for class " + std::string(class_name(c)) + " under " + root.string());
    }
    if (manifest.entries.empty()) throw IoError("no class folders with images under " + root.string());
    return manifest;
}

DatasetManifest make_splits(const DatasetManifest& manifest, std::optional<std::uint64_t> seed,
                            std::size_t train_per_class, std::size_t val_per_class) {
    if (!seed) throw ConfigError("make_splits: a split seed is required");
    DatasetManifest out = manifest;
    out.split_seed = seed;
    out.per_class_train_count = train_per_class;
    out.per_class_val_count = val_per_class;
    Rng rng(*seed);
    for (std::size_t c = 0; c < kNumClasses; ++c) {
        std::vector<std::size_t> members;
        for (std::size_t i = 0; i < out.entries.size(); ++i)
            if (out.entries[i].label == c) members.push_back(i);
        std::size_t train = train_per_class, val = val_per_class;
        if (train + val > members.size()) {
            train = std::min(train, members.size());
            val = std::min(val, members.size() - train);
            log_warning("class " + std::string(class_name(c)) + " has " + std::to_string(members.size()) +
                        " images; clamping split to " + std::to_string(train) + " train / " + std::to_string(val) +
                        " val");
        }
        for (std::size_t i = 0; i + 1 < members.size(); ++i)
            std::swap(members[i], members[i + rng.uniform_index(members.size() - i)]);
        for (std::size_t i = 0; i < members.size(); ++i)
            out.entries[members[i]].split = i < train ? Split::Train : (i < train + val ? Split::Val : Split::Test);
    }
    return out;
}

std::string manifest_to_csv(const DatasetManifest& manifest) {
    std::string out = "path,label,split\n";
    for (const auto& e : manifest.entries) {
        out += csv_field(e.path);
        out += ',';
        out += class_name(e.label);
        out += ',';
        out += split_name(e.split);
        out += '\n';
    }
    return out;
}

DatasetManifest manifest_from_csv(std::string_view text) {
    DatasetManifest manifest;
    std::size_t line_no = 0;
    std::size_t pos = 0;
    bool header_seen = false;
    while (pos < text.size()) {
        std::size_t end = text.find('\n', pos);
        if (end == std::string_view::npos) end = text.size();
        std::string_view line = text.substr(pos, end - pos);
        pos = end + 1;
        ++line_no;
        if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
        if (line.empty()) continue;
        if (!header_seen) {
            if (line != "path,label,split") throw IoError("manifest header must be 'path,label,split'");
            header_seen = true;
            continue;
        }
        auto fields = split_csv_line(line, line_no, "manifest");
        if (fields.size() != 3)
            throw IoError("manifest line " + std::to_string(line_no) + ": expected 3 fields, got " +
                          std::to_string(fields.size()));
        const auto label = parse_class(fields[1]);
        if (!label) throw IoError("manifest line " + std::to_string(line_no) + ": unknown label '" + fields[1] + "'");
        const auto split = parse_split(fields[2]);
        if (!split) throw IoError("manifest line " + std::to_string(line_no) + ": unknown split '" + fields[2] + "'");
        manifest.entries.push_back({fields[0], *label, *split});
    }
    if (!header_seen) throw IoError("manifest is empty");
    return manifest;
}

void write_manifest(const DatasetManifest& manifest, const fs::path& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write manifest " + path.string());
    out << manifest_to_csv(manifest);
    if (!out) throw IoError("failed writing manifest " + path.string());
}

DatasetManifest read_manifest(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot read manifest " + path.string());
    std::ostringstream buffer;
    buffer << in.rdbuf();
    return manifest_from_csv(buffer.str());
}

CropBox center_square(std::size_t height, std::size_t width) {
    const std::size_t side = std::min(height, width);
    return {(height - side) / 2, (width - side) / 2, side};
}

std::vector<float> crop_and_resize(std::span<const float> planes, std::size_t channels, std::size_t height,
                                   std::size_t width, std::size_t size) {
    if (height == 0 || width == 0) throw ContractViolation("crop_and_resize: empty image");
    if (planes.size() != channels * height * width)
        throw ContractViolation("crop_and_resize: buffer does not match dimensions");
    const CropBox box = center_square(height, width);
    std::vector<float> out(channels * size * size);
    const double scale = static_cast<double>(box.side) / static_cast<double>(size);
    // Source coordinate and weight along one axis, half-pixel centred, clamped to the crop.
    struct Tap {
        std::size_t lo, hi;
        float frac;
    };
    std::vector<Tap> taps(size);
    for (std::size_t i = 0; i < size; ++i) {
        double src = (static_cast<double>(i) + 0.5) * scale - 0.5;
        src = std::clamp(src, 0.0, static_cast<double>(box.side - 1));
        const auto lo = static_cast<std::size_t>(std::floor(src));
        const std::size_t hi = std::min(lo + 1, box.side - 1);
        taps[i] = {lo, hi, static_cast<float>(src - static_cast<double>(lo))};
    }
    for (std::size_t c = 0; c < channels; ++c) {
        const float* plane = planes.data() + c * height * width;
        auto at = [&](std::size_t y, std::size_t x) { return plane[(box.top + y) * width + box.left + x]; };
        for (std::size_t y = 0; y < size; ++y) {
            const Tap& ty = taps[y];
            for (std::size_t x = 0; x < size; ++x) {
                const Tap& tx = taps[x];
                float v;
                if (ty.frac == 0.0f && tx.frac == 0.0f) {
                    v = at(ty.lo, tx.lo);
                } else {
                    const float top = at(ty.lo, tx.lo) + tx.frac * (at(ty.lo, tx.hi) - at(ty.lo, tx.lo));
                    const float bottom = at(ty.hi, tx.lo) + tx.frac * (at(ty.hi, tx.hi) - at(ty.hi, tx.lo));
                    v = top + ty.frac * (bottom - top);
                }
                out[(c * size + y) * size + x] = v;
            }
        }
    }
    return out;
}

std::vector<float> preprocess_image(const Image8& raw, const PreprocessConfig& config) {
    if (raw.height == 0 || raw.width == 0) throw ContractViolation("preprocess_image: empty image");
    if (config.channels != 1 && config.channels != 3)
        throw ConfigError("preprocess_image: encoder channels must be 1 or 3");
    const std::size_t plane = raw.height * raw.width;
    std::vector<float> planes(config.channels * plane);
    if (config.channels == 1) {
        if (raw.channels == 1) {
            for (std::size_t i = 0; i < plane; ++i) planes[i] = raw.pixels[i];
        } else {
            for (std::size_t i = 0; i < plane; ++i)
                planes[i] = 0.299f * raw.pixels[i] + 0.587f * raw.pixels[plane + i] + 0.114f * raw.pixels[2 * plane + i];
        }
    } else {
        for (std::size_t c = 0; c < 3; ++c)
            for (std::size_t i = 0; i < plane; ++i)
                planes[c * plane + i] = raw.pixels[(raw.channels == 1 ? 0 : c) * plane + i];
    }
    auto out = crop_and_resize(planes, config.channels, raw.height, raw.width, config.size);
    for (auto& v : out) v = std::clamp(v / 255.0f, 0.0f, 1.0f);
    return out;
}

std::vector<std::size_t> epoch_order(const DatasetManifest& manifest, Split split, std::uint64_t shuffle_seed,
                                     std::uint64_t epoch) {
    auto order = manifest.indices(split);
    if (split == Split::Train) {
        Rng rng(derive_seed(shuffle_seed, epoch));
        for (std::size_t i = 0; i + 1 < order.size(); ++i)
            std::swap(order[i], order[i + rng.uniform_index(order.size() - i)]);
    }
    return order;
}

Batch load_batch(const DatasetManifest& manifest, std::span<const std::size_t> entries,
                 const PreprocessConfig& preprocess) {
    const std::size_t sample = preprocess.channels * preprocess.size * preprocess.size;
    std::vector<float> pixels;
    pixels.reserve(entries.size() * sample);
    Batch batch;
    for (std::size_t idx : entries) {
        const auto& entry = manifest.entries.at(idx);
        try {
            auto values = preprocess_image(read_image(entry.path), preprocess);
            pixels.insert(pixels.end(), values.begin(), values.end());
            batch.labels.push_back(entry.label);
            batch.entries.push_back(idx);
        } catch (const IoError& e) {
            log_error(std::string("skipping sample: ") + e.what());
        }
    }
    if (!batch.labels.empty())
        batch.pixels = Tensor<float>::from_values({batch.labels.size(), preprocess.channels, preprocess.size,
                                                   preprocess.size},
                                                  std::move(pixels));
    return batch;
}

BatchStream::BatchStream(const DatasetManifest& manifest, Split split, std::size_t batch_size,
                         std::uint64_t shuffle_seed, std::uint64_t epoch, PreprocessConfig preprocess,
                         std::size_t prefetch)
    : BatchStream(manifest, epoch_order(manifest, split, shuffle_seed, epoch), batch_size, preprocess, prefetch) {}

BatchStream::BatchStream(const DatasetManifest& manifest, std::vector<std::size_t> order, std::size_t batch_size,
                         PreprocessConfig preprocess, std::size_t prefetch)
    : manifest_(manifest),
      order_(std::move(order)),
      batch_size_(batch_size),
      batch_count_(0),
      preprocess_(preprocess),
      capacity_(std::max<std::size_t>(1, prefetch)) {
    if (batch_size == 0) throw ContractViolation("batch size must be at least 1");
    if (order_.empty()) throw ContractViolation("batch stream: no samples to load");
    for (std::size_t i : order_)
        if (i >= manifest.entries.size()) throw ContractViolation("batch stream: entry index out of range");
    batch_count_ = (order_.size() + batch_size - 1) / batch_size;
    worker_ = std::thread([this] { produce(); });
}

BatchStream::~BatchStream() {
    {
        std::lock_guard lock(mutex_);
        stopping_ = true;
    }
    not_full_.notify_all();
    if (worker_.joinable()) worker_.join();
}

void BatchStream::produce() {
    try {
        for (std::size_t b = 0; b < batch_count_; ++b) {
            const std::size_t begin = b * batch_size_;
            const std::size_t end = std::min(order_.size(), begin + batch_size_);
            Batch batch = load_batch(manifest_, std::span(order_).subspan(begin, end - begin), preprocess_);
            std::unique_lock lock(mutex_);
            not_full_.wait(lock, [&] { return stopping_ || queue_.size() < capacity_; });
            if (stopping_) return;
            queue_.push_back(std::move(batch));
            ++produced_;
            not_empty_.notify_one();
        }
    } catch (...) {
        std::lock_guard lock(mutex_);
        error_ = std::current_exception();
        produced_ = batch_count_;
        not_empty_.notify_one();
    }
}

std::optional<Batch> BatchStream::next() {
    while (true) {
        std::unique_lock lock(mutex_);
        not_empty_.wait(lock, [&] { return !queue_.empty() || error_ || consumed_ == batch_count_; });
        if (!queue_.empty()) {
            Batch batch = std::move(queue_.front());
            queue_.pop_front();
            ++consumed_;
            not_full_.notify_one();
            if (batch.labels.empty()) continue; // every file of this batch failed to load
            return batch;
        }
        if (error_) std::rethrow_exception(error_);
        return std::nullopt;
    }
}

} // namespace octvae
