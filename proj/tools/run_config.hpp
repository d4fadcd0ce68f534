#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>

#include "octvae/latent_tools.hpp"
#include "octvae/model.hpp"
#include "octvae/trainer.hpp"

namespace octvae::cli {

enum class ValueKind { Path, Count, Real, Flag, Choice };

struct KeySpec {
    std::string_view key;
    ValueKind kind;
    std::string_view fallback; // empty: unset unless given
    std::string_view help;
    std::string_view choices = {}; // '|'-separated, for ValueKind::Choice
};

/// Every key a config file or flag may set, in echo order.
std::span<const KeySpec> config_schema();
const KeySpec* find_key(std::string_view key);

/// Flat `key = value` settings checked against config_schema().
///
/// File syntax: one `key = value` per line, `#` starts a comment line,
/// blank lines are ignored. Unknown keys, repeated keys and values that do
/// not parse as the key's type are ConfigErrors naming the line.
class RunConfig {
public:
    /// Sets one key; an empty value resets it to its default.
    void set(std::string_view key, std::string_view value, std::string_view origin = "flag");
    void merge_text(std::string_view text, const std::string& origin);
    void merge_file(const std::filesystem::path& path);

    bool is_set(std::string_view key) const;
    /// Given value or default; empty when unset without default.
    std::string value(std::string_view key) const;

    std::size_t count(std::string_view key) const;
    double real(std::string_view key) const;
    bool flag(std::string_view key) const;
    std::optional<std::uint64_t> seed() const;
    std::optional<std::filesystem::path> path(std::string_view key) const;
    /// Throws ConfigError naming the key when it is unset.
    std::filesystem::path required_path(std::string_view key) const;

    ArchitectureConfig architecture() const;
    TrainConfig training() const;
    TsneConfig tsne() const;

    /// All keys in schema order, unset ones as `key =`; parses back to the same config.
    std::string resolved_text(std::string_view command) const;

private:
    std::map<std::string, std::string, std::less<>> values_;
};

} // namespace octvae::cli
