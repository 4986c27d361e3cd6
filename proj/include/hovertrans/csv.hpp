#pragma once

#include <filesystem>
#include <string>
#include <vector>

namespace hovertrans {

// Minimal RFC 4180 reader/writer: comma separated, optional double quotes,
// LF or CRLF line endings. The first row is the header.
struct CsvTable {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;

  // Column index by name, or -1.
  int column(const std::string& name) const;
};

CsvTable read_csv(const std::filesystem::path& path);
void write_csv(const std::filesystem::path& path, const CsvTable& table);

}  // namespace hovertrans
