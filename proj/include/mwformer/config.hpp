#pragma once

// Line-oriented `key = value` configuration text. `#` starts a comment,
// keys may be dotted (e.g. model.v_dim), list values are comma-separated.

#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "mwformer/common.hpp"

namespace mwf {

namespace detail {

inline std::string trim(const std::string& s) {
  std::size_t a = s.find_first_not_of(" \t\r\n");
  if (a == std::string::npos) return "";
  std::size_t b = s.find_last_not_of(" \t\r\n");
  return s.substr(a, b - a + 1);
}

}  // namespace detail

class Config {
 public:
  Config() = default;

  static Config parse_text(const std::string& text, const std::string& origin = "<text>") {
    Config cfg;
    std::istringstream is(text);
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(is, line)) {
      ++lineno;
      const std::size_t hash = line.find('#');
      if (hash != std::string::npos) line.erase(hash);
      line = detail::trim(line);
      if (line.empty()) continue;
      const std::size_t eq = line.find('=');
      if (eq == std::string::npos)
        throw ConfigError(origin + ":" + std::to_string(lineno) +
                          ": expected 'key = value', got '" + line + "'");
      const std::string key = detail::trim(line.substr(0, eq));
      const std::string value = detail::trim(line.substr(eq + 1));
      if (key.empty())
        throw ConfigError(origin + ":" + std::to_string(lineno) + ": empty key");
      if (cfg.kv_.count(key))
        throw ConfigError(origin + ":" + std::to_string(lineno) + ": duplicate key '" +
                          key + "'");
      cfg.set(key, value);
    }
    return cfg;
  }

  static Config parse_file(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw IoError("cannot open config file: " + path);
    std::ostringstream buf;
    buf << is.rdbuf();
    return parse_text(buf.str(), path);
  }

  void set(const std::string& key, const std::string& value) {
    if (!kv_.count(key)) order_.push_back(key);
    kv_[key] = value;
  }

  bool has(const std::string& key) const { return kv_.count(key) != 0; }

  std::string str(const std::string& key) const {
    auto it = kv_.find(key);
    if (it == kv_.end()) throw ConfigError("missing config key '" + key + "'");
    return it->second;
  }

  std::string str(const std::string& key, const std::string& fallback) const {
    auto it = kv_.find(key);
    return it == kv_.end() ? fallback : it->second;
  }

  double number(const std::string& key) const { return to_number(key, str(key)); }
  double number(const std::string& key, double fallback) const {
    return has(key) ? number(key) : fallback;
  }

  std::size_t count(const std::string& key) const {
    const double v = number(key);
    if (v < 0 || v != static_cast<double>(static_cast<std::size_t>(v)))
      throw ConfigError("config key '" + key + "' must be a non-negative integer, got '" +
                        str(key) + "'");
    return static_cast<std::size_t>(v);
  }
  std::size_t count(const std::string& key, std::size_t fallback) const {
    return has(key) ? count(key) : fallback;
  }

  bool flag(const std::string& key) const {
    const std::string v = str(key);
    if (v == "true" || v == "1" || v == "on") return true;
    if (v == "false" || v == "0" || v == "off") return false;
    throw ConfigError("config key '" + key + "' must be a boolean, got '" + v + "'");
  }
  bool flag(const std::string& key, bool fallback) const {
    return has(key) ? flag(key) : fallback;
  }

  std::vector<std::string> list(const std::string& key) const {
    std::vector<std::string> out;
    std::istringstream is(str(key));
    std::string item;
    while (std::getline(is, item, ',')) {
      item = detail::trim(item);
      if (item.empty())
        throw ConfigError("config key '" + key + "' has an empty list element");
      out.push_back(item);
    }
    if (out.empty()) throw ConfigError("config key '" + key + "' is an empty list");
    return out;
  }

  std::vector<std::size_t> count_list(const std::string& key) const {
    std::vector<std::size_t> out;
    for (const std::string& item : list(key)) {
      const double v = to_number(key, item);
      if (v < 0 || v != static_cast<double>(static_cast<std::size_t>(v)))
        throw ConfigError("config key '" + key + "' must list non-negative integers, got '" +
                          item + "'");
      out.push_back(static_cast<std::size_t>(v));
    }
    return out;
  }

  const std::vector<std::string>& keys() const { return order_; }

  /// Serializes back to parseable text, keys in first-set order.
  std::string to_text() const {
    std::ostringstream os;
    for (const std::string& k : order_) os << k << " = " << kv_.at(k) << "\n";
    return os.str();
  }

 private:
  static double to_number(const std::string& key, const std::string& v) {
    try {
      std::size_t used = 0;
      const double out = std::stod(v, &used);
      if (used != v.size()) throw std::invalid_argument(v);
      return out;
    } catch (const std::exception&) {
      throw ConfigError("config key '" + key + "' must be numeric, got '" + v + "'");
    }
  }

  std::map<std::string, std::string> kv_;
  std::vector<std::string> order_;
};

}  // namespace mwf
