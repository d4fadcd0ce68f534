#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "octvae/tensor.hpp"

namespace octvae {

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct NamedArray {
    std::string name;
    Shape shape;
    std::vector<float> values;

    friend bool operator==(const NamedArray&, const NamedArray&) = default;
};

/// Named float32 arrays plus string metadata, stored as one file.
///
/// Layout (all integers little-endian):
///   "OCTVAECK" | u32 version | u64 meta_len | meta (key=value lines)
///   | u32 array_count | arrays... | u64 FNV-1a of everything before it
/// Each array: u32 name_len | name | u32 rank | u64 dims[rank] | f32 values.
struct Checkpoint {
    std::map<std::string, std::string> metadata;
    std::vector<NamedArray> arrays;

    const NamedArray* find(const std::string& name) const;
    const NamedArray& at(const std::string& name) const;
    void put(std::string name, Shape shape, std::vector<float> values);

    std::optional<std::string> meta(const std::string& key) const;
    const std::string& meta_at(const std::string& key) const;

    friend bool operator==(const Checkpoint&, const Checkpoint&) = default;
};

std::vector<std::uint8_t> serialize_checkpoint(const Checkpoint& checkpoint);
Checkpoint deserialize_checkpoint(const std::vector<std::uint8_t>& bytes, const std::string& origin = "<memory>");

/// Writes to a sibling temp file, then renames over `path`.
void save_checkpoint(const Checkpoint& checkpoint, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

/// Writes text atomically (temp file + rename).
void write_file_atomic(const std::filesystem::path& path, const std::string& contents);

} // namespace octvae
