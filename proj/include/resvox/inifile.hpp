#pragma once

// Strict INI reader: UTF-8 `key = value` lines under `[section]` headers.
// Blank lines and lines starting with '#' or ';' are comments. Duplicate
// keys, keys outside a section, and malformed lines are errors with line
// numbers. Consumers pull typed values and then call finish(), which rejects
// any key that was never requested, so misspelled keys cannot pass silently.

#include <map>
#include <set>
#include <string>
#include <vector>

#include "resvox/common.hpp"

namespace resvox {

namespace detail {

inline std::string trim_copy(std::string s) {
  size_t b = s.find_first_not_of(" \t\r");
  size_t e = s.find_last_not_of(" \t\r");
  if (b == std::string::npos) return "";
  return s.substr(b, e - b + 1);
}

}  // namespace detail

class IniFile {
 public:
  IniFile(const std::string& text, std::string origin)
      : origin_(std::move(origin)) {
    std::string section;
    size_t pos = 0;
    long lineno = 0;
    while (pos <= text.size()) {
      size_t eol = text.find('\n', pos);
      if (eol == std::string::npos) {
        if (pos == text.size()) break;
        eol = text.size();
      }
      std::string line = detail::trim_copy(text.substr(pos, eol - pos));
      pos = eol + 1;
      ++lineno;
      if (line.empty() || line[0] == '#' || line[0] == ';') continue;
      if (line[0] == '[') {
        if (line.back() != ']')
          fail(origin_, ":", lineno, ": malformed section header: ", line);
        section = detail::trim_copy(line.substr(1, line.size() - 2));
        if (section.empty()) fail(origin_, ":", lineno, ": empty section name");
        sections_.insert(section);
        continue;
      }
      size_t eq = line.find('=');
      if (eq == std::string::npos)
        fail(origin_, ":", lineno, ": expected key = value, got: ", line);
      std::string key = detail::trim_copy(line.substr(0, eq));
      std::string value = detail::trim_copy(line.substr(eq + 1));
      if (key.empty()) fail(origin_, ":", lineno, ": empty key");
      if (section.empty())
        fail(origin_, ":", lineno, ": key '", key, "' outside any [section]");
      std::string full = section + "." + key;
      if (values_.count(full))
        fail(origin_, ":", lineno, ": duplicate key '", key, "' in [",
             section, "]");
      values_[full] = value;
    }
  }

  bool has_section(const std::string& section) const {
    return sections_.count(section) != 0;
  }

  bool has(const std::string& section, const std::string& key) const {
    return values_.count(section + "." + key) != 0;
  }

  // Each getter leaves the field untouched when the key is absent, so the
  // caller's defaults survive partial files.
  void get(const std::string& section, const std::string& key, long& out) {
    std::string* v = take(section, key);
    if (!v) return;
    char* end = nullptr;
    long parsed = std::strtol(v->c_str(), &end, 10);
    if (end == v->c_str() || *end != '\0')
      fail(origin_, ": [", section, "] ", key, ": not an integer: ", *v);
    out = parsed;
  }

  void get(const std::string& section, const std::string& key, double& out) {
    std::string* v = take(section, key);
    if (!v) return;
    char* end = nullptr;
    double parsed = std::strtod(v->c_str(), &end);
    if (end == v->c_str() || *end != '\0')
      fail(origin_, ": [", section, "] ", key, ": not a number: ", *v);
    out = parsed;
  }

  void get(const std::string& section, const std::string& key,
           std::vector<long>& out) {
    std::string* v = take(section, key);
    if (!v) return;
    std::vector<long> parsed;
    size_t pos = 0;
    while (pos <= v->size()) {
      size_t comma = v->find(',', pos);
      if (comma == std::string::npos) comma = v->size();
      std::string item = detail::trim_copy(v->substr(pos, comma - pos));
      if (item.empty())
        fail(origin_, ": [", section, "] ", key, ": empty list item in: ", *v);
      char* end = nullptr;
      parsed.push_back(std::strtol(item.c_str(), &end, 10));
      if (end == item.c_str() || *end != '\0')
        fail(origin_, ": [", section, "] ", key, ": not an integer: ", item);
      pos = comma + 1;
      if (comma == v->size()) break;
    }
    out = std::move(parsed);
  }

  // Rejects sections other than `allowed` and keys never requested by get().
  void finish(const std::set<std::string>& allowed_sections) const {
    for (const std::string& s : sections_)
      if (!allowed_sections.count(s))
        fail(origin_, ": unknown section [", s, "]");
    for (const auto& [full, value] : values_)
      if (!consumed_.count(full))
        fail(origin_, ": unknown key '", full.substr(full.find('.') + 1),
             "' in [", full.substr(0, full.find('.')), "]");
  }

 private:
  std::string* take(const std::string& section, const std::string& key) {
    auto it = values_.find(section + "." + key);
    if (it == values_.end()) return nullptr;
    consumed_.insert(it->first);
    return &it->second;
  }

  std::string origin_;
  std::map<std::string, std::string> values_;
  std::set<std::string> sections_;
  std::set<std::string> consumed_;
};

}  // namespace resvox
