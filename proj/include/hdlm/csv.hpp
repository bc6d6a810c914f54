#pragma once

#include <iosfwd>
#include <string>
#include <string_view>
#include <vector>

namespace hdlm {

/// Shortest decimal text that parses back to exactly `v`.
std::string format_number(double v);

/// Strict full-string parse; returns false on any trailing garbage.
bool parse_number(std::string_view text, double& out);

struct CsvTable {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;

  /// Column index by name, or -1.
  int column(std::string_view name) const;
};

/// Reads a comma-separated file with a required header row. Double-quoted
/// fields may contain commas; lines starting with '#' before the header are
/// skipped (version/manifest lines).
CsvTable read_csv(std::istream& in);
CsvTable read_csv_file(const std::string& path);

std::string csv_escape(std::string_view field);

}  // namespace hdlm
