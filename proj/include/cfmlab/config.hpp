#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <variant>
#include <vector>

namespace cfmlab {

struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Value of one config entry. Arrays are homogeneous.
using TomlValue = std::variant<std::int64_t, double, bool, std::string,
                               std::vector<std::int64_t>, std::vector<double>,
                               std::vector<std::string>>;

/// Flat view of a TOML file restricted to the subset this project uses:
/// [section] headers, key = value lines, #-comments, and scalar/array values
/// (integers, floats, booleans, double-quoted strings). Keys are stored as
/// "section.key". Every key must be consumed; finish() throws on leftovers
/// so misspelled keys never fall back to defaults silently.
class ConfigMap {
 public:
  static ConfigMap parse_file(const std::filesystem::path& path);
  static ConfigMap parse_string(const std::string& text, const std::string& origin = "<string>");

  bool has(const std::string& key) const { return values_.count(key) > 0; }

  std::int64_t get_int(const std::string& key);
  std::int64_t get_int_or(const std::string& key, std::int64_t fallback);
  double get_real(const std::string& key);
  double get_real_or(const std::string& key, double fallback);
  bool get_bool_or(const std::string& key, bool fallback);
  std::string get_string(const std::string& key);
  std::string get_string_or(const std::string& key, const std::string& fallback);
  std::vector<std::int64_t> get_int_array(const std::string& key);
  std::vector<double> get_real_array_or(const std::string& key, std::vector<double> fallback);
  std::vector<std::string> get_string_array_or(const std::string& key,
                                               std::vector<std::string> fallback);

  /// Throws ConfigError listing any key never consumed.
  void finish() const;

  /// All entries, for the meta.json echo.
  const std::map<std::string, TomlValue>& entries() const { return values_; }

 private:
  const TomlValue& require(const std::string& key);
  std::map<std::string, TomlValue> values_;
  std::set<std::string> consumed_;
  std::string origin_;
};

}  // namespace cfmlab
