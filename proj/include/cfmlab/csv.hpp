#pragma once

#include <filesystem>
#include <sstream>
#include <string>
#include <vector>

namespace cfmlab {

/// 17 significant digits: round-trip exact for 64-bit floats, '.' decimal
/// separator independent of locale.
std::string format_real(double v);

/// RFC-4180 CSV writer accumulating rows in memory.
class CsvWriter {
 public:
  explicit CsvWriter(std::vector<std::string> header);

  void add_row(const std::vector<std::string>& cells);
  std::string str() const { return body_.str(); }

  static std::string cell(double v) { return format_real(v); }
  static std::string cell(int v) { return std::to_string(v); }
  static std::string cell(long v) { return std::to_string(v); }
  static std::string cell(std::size_t v) { return std::to_string(v); }
  static std::string cell(const std::string& v);

 private:
  std::size_t columns_;
  std::ostringstream body_;
};

/// Writes content to path atomically (temp file in the same directory, then
/// rename). Creates parent directories as needed.
void write_file_atomic(const std::filesystem::path& path, const std::string& content);

}  // namespace cfmlab
