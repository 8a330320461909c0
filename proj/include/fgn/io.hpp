// SPDX-License-Identifier: Apache-2.0
//
// Small I/O helpers: a CSV writer with stable formatting (so byte-level
// determinism checks are meaningful) and an FNV-1a config hash.

#pragma once

#include <cstdint>
#include <cstdio>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace fgn {

struct IoError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Shortest round-trippable decimal form.
inline std::string format_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

// One header row, one record per row, comma separated, no trailing
// delimiter, '\n' line endings.
class CsvWriter {
 public:
  CsvWriter(const std::string& path, const std::vector<std::string>& header)
      : out_(path, std::ios::trunc), columns_(header.size()) {
    if (!out_) throw IoError("cannot open for writing: " + path);
    write_fields(header);
  }

  void row(const std::vector<std::string>& fields) {
    if (fields.size() != columns_)
      throw std::invalid_argument("CsvWriter: wrong field count");
    write_fields(fields);
  }

  void close() {
    out_.close();
    if (out_.fail()) throw IoError("CSV write failed");
  }

 private:
  void write_fields(const std::vector<std::string>& fields) {
    for (size_t i = 0; i < fields.size(); ++i) {
      if (i > 0) out_ << ',';
      out_ << fields[i];
    }
    out_ << '\n';
    if (!out_) throw IoError("CSV write failed");
  }

  std::ofstream out_;
  size_t columns_;
};

inline std::uint64_t fnv1a_hash(const std::string& text) {
  std::uint64_t hash = 0xcbf29ce484222325ull;
  for (unsigned char ch : text) {
    hash ^= ch;
    hash *= 0x100000001b3ull;
  }
  return hash;
}

inline std::string hash_hex(std::uint64_t value) {
  char buf[19];
  std::snprintf(buf, sizeof(buf), "%016llx",
                static_cast<unsigned long long>(value));
  return buf;
}

}  // namespace fgn
