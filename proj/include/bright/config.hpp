// Flat key-value config files with dotted keys:
//
//   # comment
//   pipeline.seed = 42
//   task.name = tumor_vs_normal
//
// Every entry remembers its source line so schema errors can cite it.
#pragma once

#include <cstdint>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace bright {

class ConfigError : public std::runtime_error {
 public:
  explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

class ConfigFile {
 public:
  struct Entry {
    std::string value;
    int line = 0;
  };

  static ConfigFile parse_string(const std::string& text, const std::string& name = "<string>") {
    ConfigFile cfg;
    cfg.name_ = name;
    cfg.text_ = text;
    std::istringstream in(text);
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      std::string s = strip(line);
      if (s.empty() || s[0] == '#') continue;
      const size_t eq = s.find('=');
      if (eq == std::string::npos) {
        throw ConfigError(name + ":" + std::to_string(lineno) + ": expected 'key = value', got: " + s);
      }
      const std::string key = strip(s.substr(0, eq));
      const std::string value = strip(s.substr(eq + 1));
      if (key.empty()) {
        throw ConfigError(name + ":" + std::to_string(lineno) + ": empty key");
      }
      if (cfg.entries_.count(key)) {
        throw ConfigError(name + ":" + std::to_string(lineno) + ": duplicate key '" + key +
                          "' (first at line " + std::to_string(cfg.entries_[key].line) + ")");
      }
      cfg.entries_[key] = Entry{value, lineno};
    }
    return cfg;
  }

  static ConfigFile parse_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config file: " + path);
    std::ostringstream buf;
    buf << in.rdbuf();
    return parse_string(buf.str(), path);
  }

  bool has(const std::string& key) const { return entries_.count(key) != 0; }

  const std::map<std::string, Entry>& entries() const { return entries_; }
  const std::string& name() const { return name_; }
  const std::string& text() const { return text_; }

  std::string location(const std::string& key) const {
    auto it = entries_.find(key);
    if (it == entries_.end()) return name_;
    return name_ + ":" + std::to_string(it->second.line);
  }

  std::string get_str(const std::string& key) const {
    auto it = entries_.find(key);
    if (it == entries_.end()) throw ConfigError(name_ + ": missing required key '" + key + "'");
    return it->second.value;
  }
  std::string get_str(const std::string& key, const std::string& dflt) const {
    auto it = entries_.find(key);
    return it == entries_.end() ? dflt : it->second.value;
  }

  int64_t get_int(const std::string& key) const { return to_int(key, get_str(key)); }
  int64_t get_int(const std::string& key, int64_t dflt) const {
    return has(key) ? to_int(key, get_str(key)) : dflt;
  }

  double get_double(const std::string& key) const { return to_double(key, get_str(key)); }
  double get_double(const std::string& key, double dflt) const {
    return has(key) ? to_double(key, get_str(key)) : dflt;
  }

  bool get_bool(const std::string& key) const { return to_bool(key, get_str(key)); }
  bool get_bool(const std::string& key, bool dflt) const {
    return has(key) ? to_bool(key, get_str(key)) : dflt;
  }

  std::vector<std::string> get_list(const std::string& key) const {
    std::vector<std::string> out;
    std::string s = get_str(key);
    size_t start = 0;
    while (start <= s.size()) {
      size_t comma = s.find(',', start);
      if (comma == std::string::npos) comma = s.size();
      std::string item = strip(s.substr(start, comma - start));
      if (!item.empty()) out.push_back(item);
      start = comma + 1;
    }
    return out;
  }

  void set(const std::string& key, const std::string& value) {
    entries_[key] = Entry{value, 0};
  }

 private:
  static std::string strip(const std::string& s) {
    size_t a = s.find_first_not_of(" \t\r\n");
    if (a == std::string::npos) return "";
    size_t b = s.find_last_not_of(" \t\r\n");
    return s.substr(a, b - a + 1);
  }

  int64_t to_int(const std::string& key, const std::string& v) const {
    try {
      size_t pos = 0;
      int64_t r = std::stoll(v, &pos);
      if (pos != v.size()) throw std::invalid_argument("trailing");
      return r;
    } catch (const std::exception&) {
      throw ConfigError(location(key) + ": '" + key + "' expects an integer, got '" + v + "'");
    }
  }

  double to_double(const std::string& key, const std::string& v) const {
    try {
      size_t pos = 0;
      double r = std::stod(v, &pos);
      if (pos != v.size()) throw std::invalid_argument("trailing");
      return r;
    } catch (const std::exception&) {
      throw ConfigError(location(key) + ": '" + key + "' expects a number, got '" + v + "'");
    }
  }

  bool to_bool(const std::string& key, const std::string& v) const {
    if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
    if (v == "false" || v == "0" || v == "no" || v == "off") return false;
    throw ConfigError(location(key) + ": '" + key + "' expects a boolean, got '" + v + "'");
  }

  std::string name_;
  std::string text_;
  std::map<std::string, Entry> entries_;
};

}  // namespace bright
