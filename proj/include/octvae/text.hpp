#pragma once

#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

namespace octvae {

/// Shortest decimal that parses back to the same double.
std::string format_double(double value);
/// Strict full-string parse; false on failure.
bool parse_double(std::string_view text, double& out);

/// Quotes a CSV field when it contains a comma, quote or line break.
std::string csv_field(std::string_view field);
/// Splits one CSV line honouring double-quoted fields; `what` names the file in errors.
std::vector<std::string> split_csv_line(std::string_view line, std::size_t line_no, std::string_view what);
/// Lines without their terminators; a trailing CR is dropped.
std::vector<std::string_view> split_lines(std::string_view text);
/// Views into a temporary would dangle.
std::vector<std::string_view> split_lines(std::string&&) = delete;

std::string read_text_file(const std::filesystem::path& path);

} // namespace octvae
