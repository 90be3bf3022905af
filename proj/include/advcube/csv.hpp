#pragma once

#include <filesystem>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace advcube::csv {

struct Row {
  std::size_t line = 0;  // 1-based line number in the source file
  std::vector<std::string> fields;
};

class ParseError : public std::runtime_error {
 public:
  ParseError(const std::filesystem::path& path, std::size_t line, const std::string& what)
      : std::runtime_error(path.string() + ":" + std::to_string(line) + ": " + what), line_(line) {}
  std::size_t line() const { return line_; }

 private:
  std::size_t line_;
};

/// Reads a comma-separated file, skipping blank lines. No quoting support.
std::vector<Row> read(const std::filesystem::path& path);

double parse_double(const std::filesystem::path& path, const Row& row, std::size_t column);
int parse_int(const std::filesystem::path& path, const Row& row, std::size_t column);

/// Shortest round-trip decimal representation.
std::string format(double value);

}  // namespace advcube::csv
