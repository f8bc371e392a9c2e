#include "trm/run_config.hpp"

#include <cstdlib>
#include <fstream>
#include <sstream>

#include "trm/errors.hpp"

namespace trm {

namespace {

std::string trim(const std::string& s) {
  size_t begin = s.find_first_not_of(" \t\r");
  if (begin == std::string::npos) return "";
  size_t end = s.find_last_not_of(" \t\r");
  return s.substr(begin, end - begin + 1);
}

}  // namespace

std::string expand_data_root(const std::string& value) {
  const std::string marker = "${TRM_DATA_ROOT}";
  std::string out = value;
  size_t pos;
  while ((pos = out.find(marker)) != std::string::npos) {
    const char* root = std::getenv("TRM_DATA_ROOT");
    if (root == nullptr || *root == '\0') {
      raise(ErrorCode::ConfigError, "path references ${TRM_DATA_ROOT} but it is not set: " + value);
    }
    out = out.substr(0, pos) + root + out.substr(pos + marker.size());
  }
  return out;
}

ConfigFile ConfigFile::parse_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) raise(ErrorCode::IoError, "cannot open config: " + path);
  std::ostringstream buffer;
  buffer << in.rdbuf();
  return parse_string(buffer.str(), path);
}

ConfigFile ConfigFile::parse_string(const std::string& text, const std::string& origin) {
  ConfigFile config;
  config.origin_ = origin;
  std::istringstream in(text);
  std::string line;
  std::string section;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const size_t hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const std::string where = origin + ":" + std::to_string(line_no);
    if (line.front() == '[') {
      if (line.back() != ']') raise(ErrorCode::ConfigError, "malformed section header at " + where);
      section = trim(line.substr(1, line.size() - 2));
      if (section.empty()) raise(ErrorCode::ConfigError, "empty section name at " + where);
      continue;
    }
    const size_t eq = line.find('=');
    if (eq == std::string::npos) raise(ErrorCode::ConfigError, "expected key = value at " + where);
    if (section.empty()) raise(ErrorCode::ConfigError, "key outside any section at " + where);
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    if (key.empty()) raise(ErrorCode::ConfigError, "empty key at " + where);
    auto& sec = config.sections_[section];
    if (sec.count(key) != 0) {
      raise(ErrorCode::ConfigError, "duplicate key " + section + "." + key + " at " + where);
    }
    sec[key] = value;
  }
  return config;
}

bool ConfigFile::has(const std::string& section, const std::string& key) const {
  auto sec = sections_.find(section);
  return sec != sections_.end() && sec->second.count(key) != 0;
}

std::string ConfigFile::value_or_throw(const std::string& section, const std::string& key) const {
  auto sec = sections_.find(section);
  if (sec != sections_.end()) {
    auto it = sec->second.find(key);
    if (it != sec->second.end()) return it->second;
  }
  raise(ErrorCode::ConfigError, "missing required config key " + section + "." + key);
}

std::string ConfigFile::get_string(const std::string& section, const std::string& key) const {
  return value_or_throw(section, key);
}

std::string ConfigFile::get_string(const std::string& section, const std::string& key,
                                   const std::string& fallback) const {
  return has(section, key) ? value_or_throw(section, key) : fallback;
}

std::string ConfigFile::get_path(const std::string& section, const std::string& key) const {
  return expand_data_root(value_or_throw(section, key));
}

std::string ConfigFile::get_path(const std::string& section, const std::string& key,
                                 const std::string& fallback) const {
  return has(section, key) ? expand_data_root(value_or_throw(section, key)) : fallback;
}

namespace {

[[noreturn]] void bad_value(const std::string& section, const std::string& key,
                            const std::string& value, const char* type) {
  raise(ErrorCode::ConfigError,
        "config key " + section + "." + key + " = '" + value + "' is not a valid " + type);
}

}  // namespace

long ConfigFile::get_long(const std::string& section, const std::string& key) const {
  const std::string value = value_or_throw(section, key);
  try {
    size_t used = 0;
    const long parsed = std::stol(value, &used);
    if (used != value.size()) bad_value(section, key, value, "integer");
    return parsed;
  } catch (const std::logic_error&) {
    bad_value(section, key, value, "integer");
  }
}

long ConfigFile::get_long(const std::string& section, const std::string& key, long fallback) const {
  return has(section, key) ? get_long(section, key) : fallback;
}

int ConfigFile::get_int(const std::string& section, const std::string& key) const {
  return static_cast<int>(get_long(section, key));
}

int ConfigFile::get_int(const std::string& section, const std::string& key, int fallback) const {
  return has(section, key) ? get_int(section, key) : fallback;
}

double ConfigFile::get_double(const std::string& section, const std::string& key) const {
  const std::string value = value_or_throw(section, key);
  try {
    size_t used = 0;
    const double parsed = std::stod(value, &used);
    if (used != value.size()) bad_value(section, key, value, "number");
    return parsed;
  } catch (const std::logic_error&) {
    bad_value(section, key, value, "number");
  }
}

double ConfigFile::get_double(const std::string& section, const std::string& key,
                              double fallback) const {
  return has(section, key) ? get_double(section, key) : fallback;
}

bool ConfigFile::get_bool(const std::string& section, const std::string& key) const {
  const std::string value = value_or_throw(section, key);
  if (value == "true" || value == "1" || value == "yes" || value == "on") return true;
  if (value == "false" || value == "0" || value == "no" || value == "off") return false;
  bad_value(section, key, value, "boolean");
}

bool ConfigFile::get_bool(const std::string& section, const std::string& key, bool fallback) const {
  return has(section, key) ? get_bool(section, key) : fallback;
}

unsigned long long ConfigFile::get_u64(const std::string& section, const std::string& key,
                                       unsigned long long fallback) const {
  if (!has(section, key)) return fallback;
  const std::string value = value_or_throw(section, key);
  try {
    size_t used = 0;
    const unsigned long long parsed = std::stoull(value, &used);
    if (used != value.size()) bad_value(section, key, value, "unsigned integer");
    return parsed;
  } catch (const std::logic_error&) {
    bad_value(section, key, value, "unsigned integer");
  }
}

void ConfigFile::set_dotted(const std::string& dotted_key, const std::string& value) {
  const size_t dot = dotted_key.find('.');
  if (dot == std::string::npos || dot == 0 || dot + 1 == dotted_key.size()) {
    raise(ErrorCode::ConfigError, "override key must look like section.key: " + dotted_key);
  }
  sections_[dotted_key.substr(0, dot)][dotted_key.substr(dot + 1)] = value;
}

void ConfigFile::require_known(const std::set<std::string>& allowed) const {
  for (const auto& [section, keys] : sections_) {
    for (const auto& [key, value] : keys) {
      const std::string dotted = section + "." + key;
      if (allowed.count(dotted) == 0) {
        raise(ErrorCode::ConfigError, "unknown config key: " + dotted);
      }
    }
  }
}

std::string ConfigFile::serialize() const {
  std::ostringstream out;
  for (const auto& [section, keys] : sections_) {
    out << '[' << section << "]\n";
    for (const auto& [key, value] : keys) out << key << " = " << value << '\n';
    out << '\n';
  }
  return out.str();
}

}  // namespace trm
