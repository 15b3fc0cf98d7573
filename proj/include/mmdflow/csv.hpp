#pragma once

// Locale-independent CSV helpers. Doubles are written in shortest round-trip form.

#include <charconv>
#include <istream>
#include <map>
#include <sstream>
#include <string>
#include <string_view>
#include <system_error>
#include <vector>

#include "mmdflow/points.hpp"

namespace mmdflow::csv {

class FormatError : public Error {
 public:
  using Error::Error;
};

inline std::string format_double(double v) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

inline double parse_double(std::string_view text, std::string_view context) {
  while (!text.empty() && (text.front() == ' ' || text.front() == '\t')) text.remove_prefix(1);
  while (!text.empty() && (text.back() == ' ' || text.back() == '\t' || text.back() == '\r')) {
    text.remove_suffix(1);
  }
  double v = 0.0;
  const auto res = std::from_chars(text.data(), text.data() + text.size(), v);
  if (res.ec != std::errc() || res.ptr != text.data() + text.size()) {
    throw FormatError(std::string(context) + ": cannot parse number '" + std::string(text) + "'");
  }
  return v;
}

inline std::vector<std::string_view> split(std::string_view line) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  for (;;) {
    const auto pos = line.find(',', start);
    out.push_back(line.substr(start, pos == std::string_view::npos ? pos : pos - start));
    if (pos == std::string_view::npos) break;
    start = pos + 1;
  }
  return out;
}

/// A numeric table with named columns.
struct Table {
  std::vector<std::string> header;
  std::vector<std::vector<double>> rows;

  /// Index of `name`, or throws FormatError naming the missing column.
  std::size_t column(std::string_view name) const {
    for (std::size_t i = 0; i < header.size(); ++i) {
      if (header[i] == name) return i;
    }
    throw FormatError("missing column " + std::string(name));
  }

  bool has_column(std::string_view name) const {
    for (const auto& h : header) {
      if (h == name) return true;
    }
    return false;
  }

  /// Collects the columns `prefix0, prefix1, ...` (in order) as a Points block.
  Points block(std::string_view prefix, std::size_t width) const {
    std::vector<std::size_t> cols;
    for (std::size_t c = 0; c < width; ++c) cols.push_back(column(std::string(prefix) + std::to_string(c)));
    Points out(rows.size(), width);
    for (std::size_t i = 0; i < rows.size(); ++i) {
      for (std::size_t c = 0; c < width; ++c) out(i, c) = rows[i][cols[c]];
    }
    return out;
  }

  /// Number of consecutive columns `prefix0, prefix1, ...` present.
  std::size_t count_prefixed(std::string_view prefix) const {
    std::size_t k = 0;
    while (has_column(std::string(prefix) + std::to_string(k))) ++k;
    return k;
  }
};

inline Table read_table(std::istream& is, std::string_view source) {
  Table t;
  std::string line;
  if (!std::getline(is, line)) throw FormatError(std::string(source) + ": empty file");
  if (!line.empty() && line.back() == '\r') line.pop_back();
  for (auto h : split(line)) t.header.emplace_back(h);
  std::size_t lineno = 1;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty() || line == "\r") continue;
    const auto fields = split(line);
    if (fields.size() != t.header.size()) {
      throw FormatError(std::string(source) + ":" + std::to_string(lineno) + ": expected " +
                        std::to_string(t.header.size()) + " fields");
    }
    std::vector<double> row;
    row.reserve(fields.size());
    const std::string ctx = std::string(source) + ":" + std::to_string(lineno);
    for (auto f : fields) row.push_back(parse_double(f, ctx));
    t.rows.push_back(std::move(row));
  }
  return t;
}

/// Writes rows of [x | y] with header x_0..x_{d-1}, y_0..y_{n-1}.
inline void write_joint(std::ostream& os, const Points& x, const Points& y) {
  if (x.size() != y.size()) throw DimensionError("write_joint: row counts differ");
  bool first = true;
  for (std::size_t c = 0; c < x.dim(); ++c, first = false) os << (first ? "" : ",") << "x_" << c;
  for (std::size_t c = 0; c < y.dim(); ++c, first = false) os << (first ? "" : ",") << "y_" << c;
  os << '\n';
  for (std::size_t i = 0; i < x.size(); ++i) {
    first = true;
    for (double v : x.row(i)) {
      os << (first ? "" : ",") << format_double(v);
      first = false;
    }
    for (double v : y.row(i)) {
      os << (first ? "" : ",") << format_double(v);
      first = false;
    }
    os << '\n';
  }
}

}  // namespace mmdflow::csv
