#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace mwp {

/// Base of every exception thrown by the library.
class Error : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

/// Bad or inconsistent input data (files, records, shapes on load).
class DataError : public Error {
public:
  using Error::Error;
};

/// Expression or record that does not parse. `line()` is 1-based, 0 if unknown.
class ParseError : public DataError {
public:
  explicit ParseError(const std::string& what, std::size_t line = 0)
      : DataError(line == 0 ? what : "line " + std::to_string(line) + ": " + what), line_(line) {}

  std::size_t line() const noexcept { return line_; }

private:
  std::size_t line_;
};

/// Exact evaluation hit a zero divisor.
class DivisionByZero : public Error {
public:
  DivisionByZero() : Error("division by zero") {}
};

/// Non-finite loss or parameters during training.
class NumericalError : public Error {
public:
  using Error::Error;
};

/// Bad command line or configuration.
class UsageError : public Error {
public:
  using Error::Error;
};

}  // namespace mwp
