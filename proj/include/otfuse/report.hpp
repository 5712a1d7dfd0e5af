#pragma once

#include <cmath>
#include <cstdio>
#include <fstream>
#include <string>

#include <json.hpp>

#include "otfuse/error.hpp"
#include "otfuse/table.hpp"

namespace otfuse {

enum class ReportFormat { csv, json_lines };

inline ReportFormat parse_report_format(const std::string& s) {
  if (s == "csv") return ReportFormat::csv;
  if (s == "json-lines" || s == "jsonl") return ReportFormat::json_lines;
  throw DomainError("unknown report format '" + s + "' (expected csv or json-lines)");
}

/// Nine significant digits.
inline std::string format_number(double v) {
  if (std::isnan(v)) return "nan";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  return buf;
}

namespace detail {

inline std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n\r") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + "\"";
}

inline std::string csv_cell(const Cell& c) {
  if (const auto* s = std::get_if<std::string>(&c)) return csv_field(*s);
  if (const auto* i = std::get_if<std::int64_t>(&c)) return std::to_string(*i);
  if (const auto* d = std::get_if<double>(&c)) return format_number(*d);
  return "";
}

inline std::string json_cell(const Cell& c) {
  if (const auto* s = std::get_if<std::string>(&c)) return nlohmann::json(*s).dump();
  if (const auto* i = std::get_if<std::int64_t>(&c)) return std::to_string(*i);
  if (const auto* d = std::get_if<double>(&c)) return std::isfinite(*d) ? format_number(*d) : "null";
  return "null";
}

}  // namespace detail

inline std::string format_report(const Table& t, ReportFormat format = ReportFormat::csv) {
  std::string out;
  if (format == ReportFormat::csv) {
    for (std::size_t i = 0; i < t.columns.size(); ++i) out += (i ? "," : "") + detail::csv_field(t.columns[i]);
    out += '\n';
    for (const auto& row : t.rows) {
      for (std::size_t i = 0; i < row.size(); ++i) out += (i ? "," : "") + detail::csv_cell(row[i]);
      out += '\n';
    }
    return out;
  }
  for (const auto& row : t.rows) {
    out += '{';
    for (std::size_t i = 0; i < row.size(); ++i)
      out += (i ? "," : "") + nlohmann::json(t.columns[i]).dump() + ":" + detail::json_cell(row[i]);
    out += "}\n";
  }
  return out;
}

inline void write_report(const Table& t, const std::string& path, ReportFormat format = ReportFormat::csv) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw Error("cannot write report " + path);
  const std::string text = format_report(t, format);
  f.write(text.data(), static_cast<std::streamsize>(text.size()));
  if (!f) throw Error("write failed for report " + path);
}

}  // namespace otfuse
