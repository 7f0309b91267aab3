// Copyright 2026 The drtab Authors.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     https://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

// RFC-4180 CSV reading and writing into a table of raw strings.

#include <cstddef>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "drtab/error.hpp"

namespace drtab {

struct Table {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;

  std::size_t num_rows() const { return rows.size(); }
  std::size_t num_cols() const { return header.size(); }

  std::optional<std::size_t> column(std::string_view name) const {
    for (std::size_t i = 0; i < header.size(); ++i) {
      if (header[i] == name) return i;
    }
    return std::nullopt;
  }

  // Keeps only the named columns, in the given order.
  Table select(const std::vector<std::string>& names) const {
    std::vector<std::size_t> idx;
    for (const auto& n : names) {
      auto c = column(n);
      if (!c) throw DataError("column '" + n + "' not found");
      idx.push_back(*c);
    }
    Table out;
    out.header = names;
    out.rows.reserve(rows.size());
    for (const auto& r : rows) {
      std::vector<std::string> nr;
      nr.reserve(idx.size());
      for (auto i : idx) nr.push_back(r[i]);
      out.rows.push_back(std::move(nr));
    }
    return out;
  }
};

namespace detail {

// Splits `text` into records. Handles quoted fields with embedded
// delimiters, doubled quotes, and CRLF/LF line endings.
inline std::vector<std::vector<std::string>> parse_records(std::string_view text,
                                                           char delim) {
  std::vector<std::vector<std::string>> records;
  std::vector<std::string> record;
  std::string field;
  bool in_quotes = false;
  bool field_started = false;
  std::size_t line = 1;

  auto end_field = [&] {
    record.push_back(std::move(field));
    field.clear();
    field_started = false;
  };
  auto end_record = [&] {
    end_field();
    // A blank line yields one empty field; skip it.
    if (!(record.size() == 1 && record[0].empty())) {
      records.push_back(std::move(record));
    }
    record.clear();
  };

  for (std::size_t i = 0; i < text.size(); ++i) {
    const char ch = text[i];
    if (in_quotes) {
      if (ch == '"') {
        if (i + 1 < text.size() && text[i + 1] == '"') {
          field.push_back('"');
          ++i;
        } else {
          in_quotes = false;
        }
      } else {
        if (ch == '\n') ++line;
        field.push_back(ch);
      }
      continue;
    }
    if (ch == '"' && !field_started) {
      in_quotes = true;
      field_started = true;
    } else if (ch == delim) {
      end_field();
    } else if (ch == '\r') {
      // swallowed; the following \n terminates the record
    } else if (ch == '\n') {
      end_record();
      ++line;
    } else {
      field.push_back(ch);
      field_started = true;
    }
  }
  if (in_quotes) {
    throw DataError("unterminated quoted field near line " +
                    std::to_string(line));
  }
  if (field_started || !field.empty() || !record.empty()) end_record();
  return records;
}

inline bool needs_quotes(std::string_view s, char delim) {
  for (char ch : s) {
    if (ch == delim || ch == '"' || ch == '\n' || ch == '\r') return true;
  }
  return false;
}

}  // namespace detail

inline Table parse_csv(std::string_view text, char delim = ',') {
  auto records = detail::parse_records(text, delim);
  if (records.empty()) throw DataError("CSV input is empty");
  Table t;
  t.header = std::move(records.front());
  for (std::size_t r = 1; r < records.size(); ++r) {
    if (records[r].size() != t.header.size()) {
      throw DataError("CSV record " + std::to_string(r + 1) + " has " +
                      std::to_string(records[r].size()) + " fields, expected " +
                      std::to_string(t.header.size()));
    }
    t.rows.push_back(std::move(records[r]));
  }
  return t;
}

inline Table read_csv(const std::string& path, char delim = ',') {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open CSV '" + path + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_csv(ss.str(), delim);
}

inline void write_csv_record(std::ostream& out,
                             const std::vector<std::string>& fields,
                             char delim = ',') {
  for (std::size_t i = 0; i < fields.size(); ++i) {
    if (i) out << delim;
    const auto& f = fields[i];
    if (detail::needs_quotes(f, delim)) {
      out << '"';
      for (char ch : f) {
        if (ch == '"') out << '"';
        out << ch;
      }
      out << '"';
    } else {
      out << f;
    }
  }
  out << "\r\n";
}

inline std::string to_csv(const Table& t, char delim = ',') {
  std::ostringstream out;
  write_csv_record(out, t.header, delim);
  for (const auto& r : t.rows) write_csv_record(out, r, delim);
  return out.str();
}

inline void write_csv(const std::string& path, const Table& t,
                      char delim = ',') {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write CSV '" + path + "'");
  out << to_csv(t, delim);
  if (!out) throw DataError("write failed for '" + path + "'");
}

}  // namespace drtab
