#pragma once

#include <cstdio>
#include <fstream>
#include <string>
#include <vector>

#include "msl/common.hpp"

namespace msl {

/// RFC-4180 field quoting: quote when a comma, quote, or newline appears;
/// embedded quotes are doubled.
inline std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\r\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  out += '"';
  return out;
}

/// Shortest round-trip decimal form; bitwise-stable across runs because it
/// depends only on the value.
inline std::string csv_num(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  double parsed = 0;
  std::sscanf(buf, "%lf", &parsed);
  if (parsed == v) {
    // try shorter forms for readability while keeping exact round-trip
    for (int prec = 1; prec <= 16; ++prec) {
      char s[40];
      std::snprintf(s, sizeof s, "%.*g", prec, v);
      std::sscanf(s, "%lf", &parsed);
      if (parsed == v) return s;
    }
  }
  return buf;
}

inline std::string csv_num(std::uint64_t v) { return std::to_string(v); }
inline std::string csv_num(int v) { return std::to_string(v); }

class CsvWriter {
 public:
  explicit CsvWriter(const std::string& path) : os_(path, std::ios::binary) {
    if (!os_) throw io_error("csv: cannot open " + path + " for writing");
  }

  void row(const std::vector<std::string>& fields) {
    for (std::size_t i = 0; i < fields.size(); ++i) {
      if (i) os_ << ',';
      os_ << csv_field(fields[i]);
    }
    os_ << "\r\n";
  }

  void flush() { os_.flush(); }

 private:
  std::ofstream os_;
};

}  // namespace msl
