#include "advcube/csv.hpp"

#include <charconv>
#include <cmath>
#include <fstream>

namespace advcube::csv {

namespace {

std::string_view trim(std::string_view s) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) s.remove_suffix(1);
  return s;
}

}  // namespace

std::vector<Row> read(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  std::vector<Row> rows;
  std::string line;
  std::size_t number = 0;
  while (std::getline(in, line)) {
    ++number;
    std::string_view view = trim(line);
    if (number == 1 && view.size() >= 3 && view.substr(0, 3) == "\xEF\xBB\xBF") view.remove_prefix(3);
    if (view.empty()) continue;
    Row row;
    row.line = number;
    std::size_t start = 0;
    while (true) {
      const auto comma = view.find(',', start);
      row.fields.emplace_back(trim(view.substr(start, comma == std::string_view::npos ? view.npos : comma - start)));
      if (comma == std::string_view::npos) break;
      start = comma + 1;
    }
    rows.push_back(std::move(row));
  }
  return rows;
}

double parse_double(const std::filesystem::path& path, const Row& row, std::size_t column) {
  if (column >= row.fields.size()) throw ParseError(path, row.line, "missing column " + std::to_string(column + 1));
  const auto& f = row.fields[column];
  double value = 0.0;
  auto [ptr, ec] = std::from_chars(f.data(), f.data() + f.size(), value);
  if (ec != std::errc() || ptr != f.data() + f.size() || !std::isfinite(value)) {
    throw ParseError(path, row.line, "not a number: '" + f + "'");
  }
  return value;
}

int parse_int(const std::filesystem::path& path, const Row& row, std::size_t column) {
  if (column >= row.fields.size()) throw ParseError(path, row.line, "missing column " + std::to_string(column + 1));
  const auto& f = row.fields[column];
  int value = 0;
  auto [ptr, ec] = std::from_chars(f.data(), f.data() + f.size(), value);
  if (ec != std::errc() || ptr != f.data() + f.size()) throw ParseError(path, row.line, "not an integer: '" + f + "'");
  return value;
}

std::string format(double value) {
  char buf[64];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), value);
  if (ec != std::errc()) throw std::runtime_error("cannot format number");
  return {buf, ptr};
}

}  // namespace advcube::csv
