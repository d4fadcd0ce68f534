#pragma once

#include <array>
#include <condition_variable>
#include <cstdint>
#include <deque>
#include <exception>
#include <filesystem>
#include <mutex>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <thread>
#include <vector>

#include "octvae/image_io.hpp"
#include "octvae/tensor.hpp"

namespace octvae {

inline constexpr std::size_t kNumClasses = 4;

/// Class folders, in label order.
inline constexpr std::array<std::string_view, kNumClasses> kClassNames{"NORMAL", "DRUSEN", "DME", "CNV"};

std::string_view class_name(std::size_t label);
/// Case-insensitive class-name lookup; also accepts the numeric label.
std::optional<std::size_t> parse_class(std::string_view text);

enum class Split { Unassigned, Train, Val, Test };
std::string_view split_name(Split split);
std::optional<Split> parse_split(std::string_view text);

struct ManifestEntry {
    std::string path;
    std::size_t label = 0;
    Split split = Split::Unassigned;

    friend bool operator==(const ManifestEntry&, const ManifestEntry&) = default;
};

struct DatasetManifest {
    std::vector<ManifestEntry> entries;
    std::optional<std::uint64_t> split_seed;
    std::size_t per_class_train_count = 0;
    std::size_t per_class_val_count = 0;

    /// Entry indices of a split, in manifest order.
    std::vector<std::size_t> indices(Split split) const;
    /// Per-class entry counts, optionally restricted to one split.
    std::array<std::size_t, kNumClasses> class_counts(std::optional<Split> split = std::nullopt) const;
};

/// Lists `<root>/{NORMAL,DRUSEN,DME,CNV}/*.{png,jpg,jpeg}` sorted by path.
///
/// Class folders match case-insensitively; other folders are skipped with a
/// warning, as are absent class folders. A class folder without images is an
/// IoError naming the class.
DatasetManifest scan_dataset(const std::filesystem::path& root);

/// Seeded per-class draw without replacement: the first `train_per_class`
/// go to TRAIN, the next `val_per_class` to VAL, the rest to TEST. Requests
/// larger than a class are clamped with a warning. A missing seed is a
/// ConfigError.
DatasetManifest make_splits(const DatasetManifest& manifest, std::optional<std::uint64_t> seed,
                            std::size_t train_per_class = 500, std::size_t val_per_class = 250);

/// CSV with header `path,label,split`, LF line endings.
std::string manifest_to_csv(const DatasetManifest& manifest);
DatasetManifest manifest_from_csv(std::string_view text);
void write_manifest(const DatasetManifest& manifest, const std::filesystem::path& path);
DatasetManifest read_manifest(const std::filesystem::path& path);

struct PreprocessConfig {
    std::size_t size = 224;
    std::size_t channels = 1;
};

struct CropBox {
    std::size_t top = 0;
    std::size_t left = 0;
    std::size_t side = 0;
};

/// Largest centered square inside an HxW image.
CropBox center_square(std::size_t height, std::size_t width);

/// Center-crop then bilinear resize (half-pixel centres) of real-valued planes CxHxW to CxSxS.
std::vector<float> crop_and_resize(std::span<const float> planes, std::size_t channels, std::size_t height,
                                   std::size_t width, std::size_t size);

/// Channel conversion, center crop, bilinear resize to SxS, scaling to [0, 1].
/// Colour sources are reduced to luma for one-channel encoders; gray sources
/// are replicated for three-channel encoders.
std::vector<float> preprocess_image(const Image8& raw, const PreprocessConfig& config);

struct Batch {
    Tensor<float> pixels; // B x C x S x S
    std::vector<std::size_t> labels;
    std::vector<std::size_t> entries; // manifest indices
};

/// Sample order of one epoch: a seeded permutation for TRAIN, manifest order otherwise.
std::vector<std::size_t> epoch_order(const DatasetManifest& manifest, Split split, std::uint64_t shuffle_seed,
                                     std::uint64_t epoch);

/// Batches of one epoch produced by a background loader through a bounded queue.
///
/// The final partial batch is emitted. Files that fail to decode are logged
/// and dropped from their batch. Single consumer.
class BatchStream {
public:
    BatchStream(const DatasetManifest& manifest, Split split, std::size_t batch_size, std::uint64_t shuffle_seed,
                std::uint64_t epoch, PreprocessConfig preprocess, std::size_t prefetch = 4);
    /// Streams the given manifest entries in the given order.
    BatchStream(const DatasetManifest& manifest, std::vector<std::size_t> order, std::size_t batch_size,
                PreprocessConfig preprocess, std::size_t prefetch = 4);
    ~BatchStream();
    BatchStream(const BatchStream&) = delete;
    BatchStream& operator=(const BatchStream&) = delete;

    /// Next batch, or nullopt at the end of the epoch. Rethrows loader errors.
    std::optional<Batch> next();

    std::size_t batch_count() const { return batch_count_; }
    std::size_t sample_count() const { return order_.size(); }

private:
    void produce();

    const DatasetManifest& manifest_;
    std::vector<std::size_t> order_;
    std::size_t batch_size_;
    std::size_t batch_count_;
    PreprocessConfig preprocess_;
    std::size_t capacity_;

    std::mutex mutex_;
    std::condition_variable not_full_;
    std::condition_variable not_empty_;
    std::deque<Batch> queue_;
    std::size_t produced_ = 0;
    std::size_t consumed_ = 0;
    bool stopping_ = false;
    std::exception_ptr error_;
    std::thread worker_;
};

/// Loads a whole batch synchronously (no queue).
Batch load_batch(const DatasetManifest& manifest, std::span<const std::size_t> entries,
                 const PreprocessConfig& preprocess);

} // namespace octvae
