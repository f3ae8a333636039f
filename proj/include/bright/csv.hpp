// Minimal CSV: quoted fields with embedded commas/quotes, no multiline cells.
#pragma once

#include <cstdio>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace bright {

// Locale-independent float formatting; keeps report CSVs byte-stable.
inline std::string fmt_g(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.9g", v);
  return buf;
}

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  bool quoted = false;
  for (size_t i = 0; i < line.size(); ++i) {
    const char c = line[i];
    if (quoted) {
      if (c == '"') {
        if (i + 1 < line.size() && line[i + 1] == '"') {
          cur += '"';
          ++i;
        } else {
          quoted = false;
        }
      } else {
        cur += c;
      }
    } else if (c == '"') {
      quoted = true;
    } else if (c == ',') {
      out.push_back(cur);
      cur.clear();
    } else if (c != '\r') {
      cur += c;
    }
  }
  out.push_back(cur);
  return out;
}

inline std::string csv_escape(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += "\"\"";
    else out += c;
  }
  out += '"';
  return out;
}

struct CsvTable {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;

  int column(const std::string& name) const {
    for (size_t i = 0; i < header.size(); ++i)
      if (header[i] == name) return int(i);
    return -1;
  }

  int require_column(const std::string& name) const {
    const int i = column(name);
    if (i < 0) throw std::runtime_error("missing required CSV column: " + name);
    return i;
  }
};

inline CsvTable read_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open CSV: " + path);
  CsvTable t;
  std::string line;
  bool first = true;
  while (std::getline(in, line)) {
    if (line.empty() && in.eof()) break;
    auto fields = split_csv_line(line);
    if (first) {
      t.header = std::move(fields);
      first = false;
    } else {
      if (fields.size() != t.header.size()) {
        std::ostringstream os;
        os << path << ": row " << (t.rows.size() + 2) << " has " << fields.size()
           << " fields, header has " << t.header.size();
        throw std::runtime_error(os.str());
      }
      t.rows.push_back(std::move(fields));
    }
  }
  if (first) throw std::runtime_error("empty CSV: " + path);
  return t;
}

inline void write_csv(const std::string& path, const CsvTable& t) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot open CSV for write: " + path);
  for (size_t i = 0; i < t.header.size(); ++i) {
    if (i) out << ',';
    out << csv_escape(t.header[i]);
  }
  out << '\n';
  for (const auto& row : t.rows) {
    for (size_t i = 0; i < row.size(); ++i) {
      if (i) out << ',';
      out << csv_escape(row[i]);
    }
    out << '\n';
  }
}

}  // namespace bright
