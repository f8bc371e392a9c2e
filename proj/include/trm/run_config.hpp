#pragma once

#include <map>
#include <set>
#include <string>

namespace trm {

// Minimal sectioned key=value config: `[section]` headers, `key = value`
// lines, `#` comments, blank lines ignored. Values are plain strings; typed
// accessors parse on demand. `${TRM_DATA_ROOT}` expands in path values only.
class ConfigFile {
 public:
  static ConfigFile parse_file(const std::string& path);
  static ConfigFile parse_string(const std::string& text, const std::string& origin = "<config>");

  bool has(const std::string& section, const std::string& key) const;

  std::string get_string(const std::string& section, const std::string& key) const;
  std::string get_string(const std::string& section, const std::string& key,
                         const std::string& fallback) const;
  // get_string plus data-root expansion.
  std::string get_path(const std::string& section, const std::string& key) const;
  std::string get_path(const std::string& section, const std::string& key,
                       const std::string& fallback) const;
  long get_long(const std::string& section, const std::string& key) const;
  long get_long(const std::string& section, const std::string& key, long fallback) const;
  int get_int(const std::string& section, const std::string& key) const;
  int get_int(const std::string& section, const std::string& key, int fallback) const;
  double get_double(const std::string& section, const std::string& key) const;
  double get_double(const std::string& section, const std::string& key, double fallback) const;
  bool get_bool(const std::string& section, const std::string& key) const;
  bool get_bool(const std::string& section, const std::string& key, bool fallback) const;
  unsigned long long get_u64(const std::string& section, const std::string& key,
                             unsigned long long fallback) const;

  // Override (or add) a value by dotted key, e.g. "run.steps".
  void set_dotted(const std::string& dotted_key, const std::string& value);

  // Rejects any key not in `allowed` (dotted form). Commands call this with
  // their full schema so typos fail fast.
  void require_known(const std::set<std::string>& allowed) const;

  std::string serialize() const;
  const std::string& origin() const { return origin_; }

 private:
  std::string value_or_throw(const std::string& section, const std::string& key) const;

  std::map<std::string, std::map<std::string, std::string>> sections_;
  std::string origin_;
};

// Replaces ${TRM_DATA_ROOT} with the environment value; errors when the
// variable is referenced but unset.
std::string expand_data_root(const std::string& value);

}  // namespace trm
