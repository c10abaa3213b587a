#pragma once

#include <cstddef>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

namespace gevfuse::csv {

/// One parsed data row with its 1-based line number in the source file.
struct Row {
  std::size_t line = 0;
  std::vector<std::string> fields;
};

struct Table {
  std::vector<std::string> header;
  std::vector<Row> rows;
  /// Lines starting with '#' that precede the header, without the marker.
  std::vector<std::string> comments;

  /// Column position of `name`; throws DataError naming the file if absent.
  std::size_t column(std::string_view name) const;
  bool has_column(std::string_view name) const;
  std::filesystem::path source;
};

/// Reads a comma-separated file with a mandatory header row. Fields are
/// trimmed of surrounding whitespace; quoting is not supported.
Table read(const std::filesystem::path& path);

std::vector<std::string> split(std::string_view line, char sep = ',');

double parse_double(const std::string& text, const Table& t, std::size_t line);
long parse_long(const std::string& text, const Table& t, std::size_t line);

/// Shortest decimal text that round-trips the double exactly.
std::string format(double v);

}  // namespace gevfuse::csv
