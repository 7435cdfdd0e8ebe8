#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace cpmr {

// Base of every error the library throws.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Bad user input: config values, flags, unknown formats, missing fields.
class ConfigError : public Error {
 public:
  using Error::Error;
};

class ParseError : public Error {
 public:
  ParseError(std::size_t line, const std::string& what)
      : Error("line " + std::to_string(line) + ": " + what), line_(line) {}

  std::size_t line() const noexcept { return line_; }

 private:
  std::size_t line_;
};

class ShapeError : public Error {
 public:
  using Error::Error;
};

// Dataset-level problems (degenerate time span, empty split, ...).
class DataError : public Error {
 public:
  using Error::Error;
};

// Out-of-order recurrence calls.
class SequencingError : public Error {
 public:
  using Error::Error;
};

// NaN/Inf during training or evaluation.
class NumericalError : public Error {
 public:
  using Error::Error;
};

class CheckpointError : public Error {
 public:
  using Error::Error;
};

}  // namespace cpmr
