#pragma once

#include <algorithm>
#include <charconv>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "m2m/errors.hpp"

namespace m2m {

struct TabularTable {
  std::vector<std::string> feature_names;
  std::vector<std::vector<double>> features;
  std::vector<int> labels;

  std::size_t rows() const { return labels.size(); }
};

namespace csv_detail {

inline std::string_view trim(std::string_view s) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) s.remove_suffix(1);
  return s;
}

inline std::vector<std::string_view> split(std::string_view line) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  for (;;) {
    const std::size_t comma = line.find(',', start);
    out.push_back(trim(line.substr(start, comma == std::string_view::npos ? std::string_view::npos : comma - start)));
    if (comma == std::string_view::npos) break;
    start = comma + 1;
  }
  return out;
}

inline bool parse_double(std::string_view s, double& out) {
  if (s.empty()) return false;
  if (s.front() == '+') s.remove_prefix(1);
  const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), out);
  return ec == std::errc() && ptr == s.data() + s.size();
}

}  // namespace csv_detail

// Rows and columns in errors are 1-based; the header is row 0.
inline TabularTable parse_tabular_csv(std::string_view text) {
  using namespace csv_detail;
  std::vector<std::string_view> lines;
  std::size_t start = 0;
  while (start <= text.size()) {
    const std::size_t nl = text.find('\n', start);
    lines.push_back(text.substr(start, nl == std::string_view::npos ? std::string_view::npos : nl - start));
    if (nl == std::string_view::npos) break;
    start = nl + 1;
  }
  while (!lines.empty() && trim(lines.back()).empty()) lines.pop_back();
  if (lines.empty()) throw ParseError(0, 0, "missing header row");

  const std::vector<std::string_view> header = split(lines[0]);
  if (header.back() != "label") throw ParseError(0, header.size(), "last column must be named 'label'");
  TabularTable table;
  for (std::size_t c = 0; c + 1 < header.size(); ++c) table.feature_names.emplace_back(header[c]);

  for (std::size_t r = 1; r < lines.size(); ++r) {
    const std::vector<std::string_view> cells = split(lines[r]);
    if (cells.size() != header.size())
      throw ParseError(r, std::min(cells.size(), header.size()) + 1,
                       "expected " + std::to_string(header.size()) + " columns, got " + std::to_string(cells.size()));
    std::vector<double> row(header.size() - 1);
    for (std::size_t c = 0; c + 1 < header.size(); ++c)
      if (!parse_double(cells[c], row[c]))
        throw ParseError(r, c + 1, "non-numeric cell '" + std::string(cells[c]) + "'");
    const std::string_view label = cells.back();
    if (label != "0" && label != "1")
      throw ParseError(r, header.size(), "label must be 0 or 1, got '" + std::string(label) + "'");
    table.features.push_back(std::move(row));
    table.labels.push_back(label == "1" ? 1 : 0);
  }
  return table;
}

inline TabularTable load_tabular_csv(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError(IoError::Kind::kOpen, "cannot open " + path.string());
  std::ostringstream ss;
  ss << f.rdbuf();
  return parse_tabular_csv(ss.str());
}

inline std::string format_tabular_csv(const TabularTable& t) {
  std::string out;
  for (const std::string& name : t.feature_names) out += name + ",";
  out += "label\n";
  char buf[32];
  for (std::size_t r = 0; r < t.rows(); ++r) {
    for (double v : t.features[r]) {
      std::snprintf(buf, sizeof buf, "%.17g,", v);
      out += buf;
    }
    out += t.labels[r] ? "1\n" : "0\n";
  }
  return out;
}

inline void write_tabular_csv(const std::filesystem::path& path, const TabularTable& t) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError(IoError::Kind::kOpen, "cannot open " + path.string() + " for writing");
  f << format_tabular_csv(t);
  if (!f) throw IoError(IoError::Kind::kWrite, "write failed: " + path.string());
}

}  // namespace m2m
