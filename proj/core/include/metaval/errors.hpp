#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace metaval {

// Shape or domain violation on a function argument.
class InputError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Inconsistent hyper-parameters (M >= K, empty validation set, ...).
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Malformed CSV or config text. `line()` is 1-based; 0 when not tied to a line.
class ParseError : public std::runtime_error {
 public:
  ParseError(const std::string& what, std::size_t line)
      : std::runtime_error(line == 0 ? what : "line " + std::to_string(line) + ": " + what),
        line_(line) {}
  [[nodiscard]] std::size_t line() const noexcept { return line_; }

 private:
  std::size_t line_;
};

// A class cannot supply the number of rows a resampling step requires.
class SizingError : public std::runtime_error {
 public:
  SizingError(const std::string& what, int cls) : std::runtime_error(what), cls_(cls) {}
  [[nodiscard]] int class_index() const noexcept { return cls_; }

 private:
  int cls_;
};

class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace metaval
