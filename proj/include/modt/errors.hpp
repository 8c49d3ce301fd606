#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace modt {

/// Base of every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Tensor shapes that cannot be combined.
class DimensionError : public Error {
 public:
  using Error::Error;
};

/// A caller broke a documented precondition.
class ContractViolation : public Error {
 public:
  using Error::Error;
};

/// A context window does not match the token layout its variant requires.
class LayoutError : public Error {
 public:
  using Error::Error;
};

/// Invalid or inconsistent configuration.
class ConfigError : public Error {
 public:
  using Error::Error;
};

class InvalidActionError : public Error {
 public:
  using Error::Error;
};

/// NaN/Inf in a loss, gradient or model output.
class NumericalError : public Error {
 public:
  using Error::Error;
};

/// File could not be opened, read or written.
class IoError : public Error {
 public:
  using Error::Error;
};

/// Structured input file failed to parse. `line()` is 1-based, 0 when unknown.
class ParseError : public Error {
 public:
  ParseError(const std::string& what, std::size_t line)
      : Error(line > 0 ? "line " + std::to_string(line) + ": " + what : what), line_(line) {}
  std::size_t line() const noexcept { return line_; }

 private:
  std::size_t line_;
};

class VersionMismatchError : public ParseError {
 public:
  using ParseError::ParseError;
};

class TruncatedFileError : public ParseError {
 public:
  using ParseError::ParseError;
};

class MalformedRecordError : public ParseError {
 public:
  MalformedRecordError(const std::string& what, std::size_t line, std::size_t record)
      : ParseError("record " + std::to_string(record) + ": " + what, line), record_(record) {}
  /// 1-based index of the offending trajectory record.
  std::size_t record() const noexcept { return record_; }

 private:
  std::size_t record_;
};

}  // namespace modt
