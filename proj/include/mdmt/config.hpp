#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "mdmt/errors.hpp"

namespace mdmt {

// Flat key=value configuration with dotted sections (model.hidden_dim=32).
// '#' starts a comment; later assignments win. Keys must come from the known
// registry so typos fail loudly.
class Config {
 public:
  static Config from_file(const std::string& path);
  static Config from_string(const std::string& text);

  void set(const std::string& key, const std::string& value);  // validates the key
  void apply_override(const std::string& key_equals_value);    // "key=value"

  bool has(const std::string& key) const { return values_.count(key) > 0; }
  std::string get_str(const std::string& key, const std::string& fallback) const;
  std::string require_str(const std::string& key) const;
  int64_t get_i64(const std::string& key, int64_t fallback) const;
  uint64_t get_u64(const std::string& key, uint64_t fallback) const;
  double get_double(const std::string& key, double fallback) const;

  // Canonical content hash (sorted key=value lines); names run directories.
  std::string hash() const;

  const std::map<std::string, std::string>& values() const { return values_; }

  static const std::vector<std::string>& known_keys();

 private:
  std::map<std::string, std::string> values_;
};

std::vector<std::string> split_list(const std::string& csv);  // comma-separated, trimmed

}  // namespace mdmt
