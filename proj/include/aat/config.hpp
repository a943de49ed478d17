#pragma once

// Flat key=value run configuration. Every key has a default; unknown keys
// and malformed values raise ConfigError.

#include <nlohmann/json.hpp>

#include <map>
#include <string>
#include <vector>

namespace aat {

class Config {
 public:
  /// All defaults.
  Config();

  /// Lines of `key = value`; '#' starts a comment.
  static Config from_file(const std::string& path);
  void merge_text(const std::string& text, const std::string& origin = "<text>");
  /// Applies one `key=value` override.
  void set(const std::string& assignment);
  void set(const std::string& key, const std::string& value);

  bool has(const std::string& key) const { return values_.count(key) > 0; }
  const std::string& str(const std::string& key) const;
  double real(const std::string& key) const;
  int integer(const std::string& key) const;
  std::uint64_t seed(const std::string& key) const;
  bool flag(const std::string& key) const;
  std::vector<int> int_list(const std::string& key) const;

  const std::map<std::string, std::string>& values() const { return values_; }
  nlohmann::json to_json() const;
  std::string to_text() const;

 private:
  std::map<std::string, std::string> values_;
};

}  // namespace aat
