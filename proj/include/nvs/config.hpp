#pragma once

// Flat "key = value" text configuration with '#' comments. Every key read
// from a file must be consumed by the caller; leftovers are reported as
// unknown keys.

#include <charconv>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>

namespace nvs {

class ConfigError : public std::runtime_error {
 public:
  ConfigError(const std::string& token, const std::string& what)
      : std::runtime_error(what), token_(token) {}
  /// The offending key, value or line.
  const std::string& token() const { return token_; }

 private:
  std::string token_;
};

class KeyValues {
 public:
  static KeyValues parse(const std::string& text, const std::string& origin = "config") {
    KeyValues kv;
    std::istringstream in(text);
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
      const std::string trimmed = trim(line);
      if (trimmed.empty()) continue;
      const auto eq = trimmed.find('=');
      if (eq == std::string::npos) {
        throw ConfigError(trimmed, origin + ":" + std::to_string(lineno) + ": expected 'key = value', got '" + trimmed + "'");
      }
      const std::string key = trim(trimmed.substr(0, eq));
      const std::string value = trim(trimmed.substr(eq + 1));
      if (key.empty()) throw ConfigError(trimmed, origin + ":" + std::to_string(lineno) + ": empty key");
      if (kv.values_.count(key)) throw ConfigError(key, origin + ":" + std::to_string(lineno) + ": duplicate key '" + key + "'");
      kv.values_[key] = value;
    }
    return kv;
  }

  static KeyValues load(const std::filesystem::path& path) {
    std::ifstream f(path);
    if (!f) throw ConfigError(path.string(), "cannot open config file '" + path.string() + "'");
    std::stringstream ss;
    ss << f.rdbuf();
    return parse(ss.str(), path.string());
  }

  bool has(const std::string& key) const { return values_.count(key) != 0; }

  void set(const std::string& key, const std::string& value) { values_[key] = value; }

  template <typename V>
  void read(const std::string& key, V& out) {
    auto it = values_.find(key);
    if (it == values_.end()) return;
    used_.insert(key);
    out = convert<V>(key, it->second);
  }

  /// Throws on the first key nobody read.
  void require_all_used() const {
    for (const auto& [k, _] : values_) {
      if (!used_.count(k)) throw ConfigError(k, "unknown config key '" + k + "'");
    }
  }

  const std::map<std::string, std::string>& entries() const { return values_; }

 private:
  static std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r\n");
    if (b == std::string::npos) return {};
    const auto e = s.find_last_not_of(" \t\r\n");
    return s.substr(b, e - b + 1);
  }

  template <typename V>
  static V convert(const std::string& key, const std::string& text) {
    if constexpr (std::is_same_v<V, std::string>) {
      return text;
    } else if constexpr (std::is_same_v<V, bool>) {
      if (text == "true" || text == "1") return true;
      if (text == "false" || text == "0") return false;
      throw ConfigError(text, "config key '" + key + "': expected true/false, got '" + text + "'");
    } else {
      V v{};
      const auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), v);
      if (ec != std::errc() || ptr != text.data() + text.size()) {
        throw ConfigError(text, "config key '" + key + "': cannot parse '" + text + "'");
      }
      return v;
    }
  }

  std::map<std::string, std::string> values_;
  std::set<std::string> used_;
};

}  // namespace nvs
