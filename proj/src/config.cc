#include "vlmkit/config.h"

#include <boost/property_tree/ini_parser.hpp>

#include <algorithm>
#include <cctype>
#include <charconv>
#include <fstream>
#include <sstream>

namespace vlmkit {

namespace pt = boost::property_tree;

std::string trim(std::string_view s) {
  std::size_t b = 0, e = s.size();
  while (b < e && std::isspace(static_cast<unsigned char>(s[b]))) ++b;
  while (e > b && std::isspace(static_cast<unsigned char>(s[e - 1]))) --e;
  return std::string(s.substr(b, e - b));
}

ConfigTree parse_config(const std::string& text, const std::string& origin) {
  std::istringstream is(text);
  ConfigTree tree;
  try {
    pt::ini_parser::read_ini(is, tree);
  } catch (const pt::ini_parser_error& e) {
    throw ConfigError(origin + ":" + std::to_string(e.line()) + ": " + e.message());
  }
  return tree;
}

ConfigTree read_config_file(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot read config " + path.string());
  std::ostringstream ss;
  ss << is.rdbuf();
  return parse_config(ss.str(), path.string());
}

std::string write_config(const ConfigTree& tree) {
  std::ostringstream os;
  pt::ini_parser::write_ini(os, tree);
  return os.str();
}

std::size_t parse_count(const std::string& text) {
  const std::string s = trim(text);
  if (s.empty()) throw ConfigError("expected a count, got an empty value");
  std::size_t mult = 1;
  std::string digits = s;
  const char last = static_cast<char>(std::toupper(static_cast<unsigned char>(s.back())));
  if (last == 'K') {
    mult = 1000;
    digits.pop_back();
  } else if (last == 'M') {
    mult = 1000000;
    digits.pop_back();
  }
  std::size_t value = 0;
  auto [ptr, ec] = std::from_chars(digits.data(), digits.data() + digits.size(), value);
  if (ec != std::errc() || ptr != digits.data() + digits.size()) throw ConfigError("expected a count, got '" + s + "'");
  return value * mult;
}

double parse_double(const std::string& text) {
  const std::string s = trim(text);
  try {
    std::size_t used = 0;
    const double v = std::stod(s, &used);
    if (used != s.size()) throw ConfigError("expected a number, got '" + s + "'");
    return v;
  } catch (const std::logic_error&) {
    throw ConfigError("expected a number, got '" + s + "'");
  }
}

std::string config_string(const ConfigTree& tree, const std::string& key, const std::string& fallback) {
  auto v = tree.get_optional<std::string>(key);
  return v ? trim(*v) : fallback;
}

std::string config_string(const ConfigTree& tree, const std::string& key) {
  auto v = tree.get_optional<std::string>(key);
  if (!v) throw ConfigError("missing config key '" + key + "'");
  return trim(*v);
}

double config_double(const ConfigTree& tree, const std::string& key, double fallback) {
  auto v = tree.get_optional<std::string>(key);
  return v ? parse_double(*v) : fallback;
}

double config_double(const ConfigTree& tree, const std::string& key) { return parse_double(config_string(tree, key)); }

std::size_t config_size(const ConfigTree& tree, const std::string& key, std::size_t fallback) {
  auto v = tree.get_optional<std::string>(key);
  return v ? parse_count(*v) : fallback;
}

std::size_t config_size(const ConfigTree& tree, const std::string& key) { return parse_count(config_string(tree, key)); }

bool config_bool(const ConfigTree& tree, const std::string& key, bool fallback) {
  auto v = tree.get_optional<std::string>(key);
  if (!v) return fallback;
  std::string s = trim(*v);
  std::transform(s.begin(), s.end(), s.begin(), [](unsigned char c) { return std::tolower(c); });
  if (s == "true" || s == "1" || s == "yes") return true;
  if (s == "false" || s == "0" || s == "no") return false;
  throw ConfigError("expected a boolean for '" + key + "', got '" + s + "'");
}

void require_known_keys(const ConfigTree& tree, const std::string& section,
                        std::initializer_list<std::string_view> allowed) {
  auto child = tree.get_child_optional(section);
  if (!child) return;
  for (const auto& [key, _] : *child) {
    if (std::find(allowed.begin(), allowed.end(), key) == allowed.end()) {
      throw ConfigError("unknown key '" + key + "' in section [" + section + "]");
    }
  }
}

}  // namespace vlmkit
