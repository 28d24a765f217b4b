#pragma once

// INI-style configuration files ("[section]" headers, "key = value" lines,
// ';' comments), backed by Boost.PropertyTree.

#include <boost/property_tree/ptree.hpp>

#include <filesystem>
#include <string>

#include "vlmkit/error.h"

namespace vlmkit {

using ConfigTree = boost::property_tree::ptree;

ConfigTree parse_config(const std::string& text, const std::string& origin = "<string>");
ConfigTree read_config_file(const std::filesystem::path& path);
std::string write_config(const ConfigTree& tree);

// Typed lookups keyed "section.key". Conversion failures raise ConfigError.
std::string config_string(const ConfigTree& tree, const std::string& key, const std::string& fallback);
std::string config_string(const ConfigTree& tree, const std::string& key);
double config_double(const ConfigTree& tree, const std::string& key, double fallback);
double config_double(const ConfigTree& tree, const std::string& key);
std::size_t config_size(const ConfigTree& tree, const std::string& key, std::size_t fallback);
std::size_t config_size(const ConfigTree& tree, const std::string& key);
bool config_bool(const ConfigTree& tree, const std::string& key, bool fallback);

// Accepts plain integers and K/M suffixes ("10K" == 10000).
std::size_t parse_count(const std::string& text);
double parse_double(const std::string& text);

std::string trim(std::string_view s);

// Rejects keys in `section` that are not in `allowed`.
void require_known_keys(const ConfigTree& tree, const std::string& section,
                        std::initializer_list<std::string_view> allowed);

}  // namespace vlmkit
