#pragma once

#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

namespace cellscape::io {

/// Splits one comma-separated line; fields are trimmed, no quoting.
std::vector<std::string> split_csv(std::string_view line, char sep = ',');

/// Whitespace tokenizer.
std::vector<std::string> split_ws(std::string_view line);

/// Parses a finite double; throws ParseError carrying row/column (1-based).
double parse_double(std::string_view text, std::size_t row, std::size_t column);
long long parse_int(std::string_view text, std::size_t row, std::size_t column);
bool try_parse_double(std::string_view text, double& out);

/// Reads all lines (CR stripped). Throws IoError naming the path.
std::vector<std::string> read_lines(const std::filesystem::path& path);

/// Whole file as bytes.
std::string read_file(const std::filesystem::path& path);

/// Opens for writing, creating parent directories.
void write_text(const std::filesystem::path& path, const std::string& content);

/// Shortest round-trip decimal representation of a double.
std::string format_double(double v);

}  // namespace cellscape::io
