// Copyright 2026 the enhasr authors
// License: Apache 2.0 (http://www.apache.org/licenses/LICENSE-2.0)

#pragma once

#include <cstdint>
#include <map>
#include <set>
#include <string>
#include <vector>

namespace enhasr::config {

// INI-style run configuration: [section] headers, key = value lines, '#'
// comments. Keys are exposed flattened as "section.key". Typed getters mark
// keys consumed; anything left unconsumed is rejected by the CLI.
class Config {
 public:
  static Config load(const std::string& path);
  static Config from_string(const std::string& text);

  void set(const std::string& key, const std::string& value);
  bool has(const std::string& key) const { return values_.count(key) > 0; }

  std::string get_str(const std::string& key, const std::string& fallback);
  int get_int(const std::string& key, int fallback);
  uint64_t get_u64(const std::string& key, uint64_t fallback);
  double get_double(const std::string& key, double fallback);
  bool get_bool(const std::string& key, bool fallback);

  std::vector<std::string> unconsumed() const;
  const std::map<std::string, std::string>& values() const { return values_; }

 private:
  std::map<std::string, std::string> values_;
  std::set<std::string> consumed_;
};

}  // namespace enhasr::config
