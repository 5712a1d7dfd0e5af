#pragma once

#include <cstdint>
#include <string>
#include <variant>
#include <vector>

#include "otfuse/error.hpp"

namespace otfuse {

/// A cell is empty, text, an integer, or a real number.
using Cell = std::variant<std::monostate, std::string, std::int64_t, double>;

/// Column-named rows, the common currency of every report the tools emit.
struct Table {
  std::vector<std::string> columns;
  std::vector<std::vector<Cell>> rows;

  Table() = default;
  explicit Table(std::vector<std::string> cols) : columns(std::move(cols)) {}

  void add_row(std::vector<Cell> row) {
    if (row.size() != columns.size())
      throw ShapeError("table row has " + std::to_string(row.size()) + " cells, expected " + std::to_string(columns.size()));
    rows.push_back(std::move(row));
  }

  std::size_t column_index(const std::string& name) const {
    for (std::size_t i = 0; i < columns.size(); ++i)
      if (columns[i] == name) return i;
    throw ShapeError("table has no column '" + name + "'");
  }

  double number(std::size_t row, const std::string& name) const {
    const Cell& c = rows.at(row).at(column_index(name));
    if (const auto* d = std::get_if<double>(&c)) return *d;
    if (const auto* i = std::get_if<std::int64_t>(&c)) return static_cast<double>(*i);
    throw ShapeError("cell '" + name + "' is not numeric");
  }

  bool empty() const noexcept { return rows.empty(); }
  std::size_t size() const noexcept { return rows.size(); }
};

}  // namespace otfuse
