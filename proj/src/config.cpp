#include "cfmlab/config.hpp"

#include <cctype>
#include <charconv>
#include <fstream>
#include <sstream>

namespace cfmlab {

namespace {

std::string trim(const std::string& s) {
  std::size_t a = 0, b = s.size();
  while (a < b && std::isspace(static_cast<unsigned char>(s[a]))) ++a;
  while (b > a && std::isspace(static_cast<unsigned char>(s[b - 1]))) --b;
  return s.substr(a, b - a);
}

[[noreturn]] void fail(const std::string& origin, int line, const std::string& what) {
  throw ConfigError(origin + ":" + std::to_string(line) + ": " + what);
}

std::string parse_quoted(const std::string& raw, const std::string& origin, int line) {
  if (raw.size() < 2 || raw.back() != '"') fail(origin, line, "unterminated string: " + raw);
  std::string out;
  for (std::size_t i = 1; i + 1 < raw.size(); ++i) {
    char c = raw[i];
    if (c == '\\') {
      if (i + 2 >= raw.size()) fail(origin, line, "dangling escape in string");
      char e = raw[++i];
      if (e == '"' || e == '\\')
        out += e;
      else
        fail(origin, line, std::string("unsupported escape \\") + e);
    } else if (c == '"') {
      fail(origin, line, "unexpected quote inside string");
    } else {
      out += c;
    }
  }
  return out;
}

bool parse_int(const std::string& s, std::int64_t& out) {
  const char* b = s.data();
  const char* e = b + s.size();
  if (b != e && *b == '+') ++b;
  auto [p, ec] = std::from_chars(b, e, out);
  return ec == std::errc{} && p == e;
}

bool parse_double(const std::string& s, double& out) {
  const char* b = s.data();
  const char* e = b + s.size();
  if (b != e && *b == '+') ++b;
  auto [p, ec] = std::from_chars(b, e, out);
  return ec == std::errc{} && p == e;
}

/// Splits an array body on top-level commas (quotes respected).
std::vector<std::string> split_items(const std::string& body, const std::string& origin,
                                     int line) {
  std::vector<std::string> items;
  std::string cur;
  bool in_str = false;
  for (std::size_t i = 0; i < body.size(); ++i) {
    char c = body[i];
    if (in_str) {
      cur += c;
      if (c == '\\' && i + 1 < body.size())
        cur += body[++i];
      else if (c == '"')
        in_str = false;
    } else if (c == '"') {
      cur += c;
      in_str = true;
    } else if (c == ',') {
      items.push_back(trim(cur));
      cur.clear();
    } else {
      cur += c;
    }
  }
  if (in_str) fail(origin, line, "unterminated string in array");
  const std::string last = trim(cur);
  if (!last.empty()) items.push_back(last);
  for (const auto& it : items)
    if (it.empty()) fail(origin, line, "empty array element");
  return items;
}

TomlValue parse_value(const std::string& raw, const std::string& origin, int line) {
  if (raw.empty()) fail(origin, line, "missing value");
  if (raw.front() == '"') return parse_quoted(raw, origin, line);
  if (raw == "true") return true;
  if (raw == "false") return false;
  if (raw.front() == '[') {
    if (raw.back() != ']') fail(origin, line, "unterminated array");
    const auto items = split_items(raw.substr(1, raw.size() - 2), origin, line);
    if (items.empty()) return std::vector<std::int64_t>{};
    if (items.front().front() == '"') {
      std::vector<std::string> out;
      for (const auto& it : items) {
        if (it.front() != '"') fail(origin, line, "mixed-type array");
        out.push_back(parse_quoted(it, origin, line));
      }
      return out;
    }
    bool all_int = true;
    for (const auto& it : items) {
      std::int64_t tmp;
      if (!parse_int(it, tmp)) all_int = false;
    }
    if (all_int) {
      std::vector<std::int64_t> out;
      for (const auto& it : items) {
        std::int64_t v;
        parse_int(it, v);
        out.push_back(v);
      }
      return out;
    }
    std::vector<double> out;
    for (const auto& it : items) {
      double v;
      if (!parse_double(it, v)) fail(origin, line, "bad array number: " + it);
      out.push_back(v);
    }
    return out;
  }
  std::int64_t iv;
  if (parse_int(raw, iv)) return iv;
  double dv;
  if (parse_double(raw, dv)) return dv;
  fail(origin, line, "unrecognized value: " + raw);
}

std::string strip_comment(const std::string& line) {
  bool in_str = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    char c = line[i];
    if (in_str) {
      if (c == '\\')
        ++i;
      else if (c == '"')
        in_str = false;
    } else if (c == '"') {
      in_str = true;
    } else if (c == '#') {
      return line.substr(0, i);
    }
  }
  return line;
}

bool valid_bare_key(const std::string& k) {
  if (k.empty()) return false;
  for (char c : k)
    if (!std::isalnum(static_cast<unsigned char>(c)) && c != '_' && c != '-') return false;
  return true;
}

std::string kind_name(const TomlValue& v) {
  switch (v.index()) {
    case 0: return "integer";
    case 1: return "float";
    case 2: return "boolean";
    case 3: return "string";
    case 4: return "integer array";
    case 5: return "float array";
    default: return "string array";
  }
}

}  // namespace

ConfigMap ConfigMap::parse_string(const std::string& text, const std::string& origin) {
  ConfigMap m;
  m.origin_ = origin;
  std::istringstream in(text);
  std::string line, section;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const std::string body = trim(strip_comment(line));
    if (body.empty()) continue;
    if (body.front() == '[') {
      if (body.back() != ']') fail(origin, lineno, "unterminated section header");
      section = trim(body.substr(1, body.size() - 2));
      if (!valid_bare_key(section)) fail(origin, lineno, "bad section name: " + section);
      continue;
    }
    const auto eq = body.find('=');
    if (eq == std::string::npos) fail(origin, lineno, "expected key = value");
    const std::string key = trim(body.substr(0, eq));
    if (!valid_bare_key(key)) fail(origin, lineno, "bad key: " + key);
    if (section.empty()) fail(origin, lineno, "key outside any [section]: " + key);
    const std::string full = section + "." + key;
    if (m.values_.count(full)) fail(origin, lineno, "duplicate key: " + full);
    m.values_.emplace(full, parse_value(trim(body.substr(eq + 1)), origin, lineno));
  }
  return m;
}

ConfigMap ConfigMap::parse_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file: " + path.string());
  std::ostringstream buf;
  buf << in.rdbuf();
  return parse_string(buf.str(), path.string());
}

const TomlValue& ConfigMap::require(const std::string& key) {
  auto it = values_.find(key);
  if (it == values_.end()) throw ConfigError(origin_ + ": missing required key: " + key);
  consumed_.insert(key);
  return it->second;
}

std::int64_t ConfigMap::get_int(const std::string& key) {
  const auto& v = require(key);
  if (const auto* i = std::get_if<std::int64_t>(&v)) return *i;
  throw ConfigError(origin_ + ": key " + key + " must be an integer, got " + kind_name(v));
}

std::int64_t ConfigMap::get_int_or(const std::string& key, std::int64_t fallback) {
  return has(key) ? get_int(key) : fallback;
}

double ConfigMap::get_real(const std::string& key) {
  const auto& v = require(key);
  if (const auto* d = std::get_if<double>(&v)) return *d;
  if (const auto* i = std::get_if<std::int64_t>(&v)) return static_cast<double>(*i);
  throw ConfigError(origin_ + ": key " + key + " must be a number, got " + kind_name(v));
}

double ConfigMap::get_real_or(const std::string& key, double fallback) {
  return has(key) ? get_real(key) : fallback;
}

bool ConfigMap::get_bool_or(const std::string& key, bool fallback) {
  if (!has(key)) return fallback;
  const auto& v = require(key);
  if (const auto* b = std::get_if<bool>(&v)) return *b;
  throw ConfigError(origin_ + ": key " + key + " must be a boolean, got " + kind_name(v));
}

std::string ConfigMap::get_string(const std::string& key) {
  const auto& v = require(key);
  if (const auto* s = std::get_if<std::string>(&v)) return *s;
  throw ConfigError(origin_ + ": key " + key + " must be a string, got " + kind_name(v));
}

std::string ConfigMap::get_string_or(const std::string& key, const std::string& fallback) {
  return has(key) ? get_string(key) : fallback;
}

std::vector<std::int64_t> ConfigMap::get_int_array(const std::string& key) {
  const auto& v = require(key);
  if (const auto* a = std::get_if<std::vector<std::int64_t>>(&v)) return *a;
  throw ConfigError(origin_ + ": key " + key + " must be an integer array, got " + kind_name(v));
}

std::vector<double> ConfigMap::get_real_array_or(const std::string& key,
                                                 std::vector<double> fallback) {
  if (!has(key)) return fallback;
  const auto& v = require(key);
  if (const auto* a = std::get_if<std::vector<double>>(&v)) return *a;
  if (const auto* a = std::get_if<std::vector<std::int64_t>>(&v))
    return std::vector<double>(a->begin(), a->end());
  throw ConfigError(origin_ + ": key " + key + " must be a number array, got " + kind_name(v));
}

std::vector<std::string> ConfigMap::get_string_array_or(const std::string& key,
                                                        std::vector<std::string> fallback) {
  if (!has(key)) return fallback;
  const auto& v = require(key);
  if (const auto* a = std::get_if<std::vector<std::string>>(&v)) return *a;
  throw ConfigError(origin_ + ": key " + key + " must be a string array, got " + kind_name(v));
}

void ConfigMap::finish() const {
  std::string unknown;
  for (const auto& [key, value] : values_)
    if (!consumed_.count(key)) unknown += (unknown.empty() ? "" : ", ") + key;
  if (!unknown.empty()) throw ConfigError(origin_ + ": unknown key(s): " + unknown);
}

}  // namespace cfmlab
