#pragma once

#include <stdexcept>
#include <string>

namespace ccn {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Tensor shapes disagree with what an op expects.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// Misuse of the graph API: unbound inputs, backward before forward, ...
class GraphError : public Error {
 public:
  using Error::Error;
};

/// Malformed or invalid input data (dataset records, config values).
class DataError : public Error {
 public:
  using Error::Error;
};

/// A dataset line failed to parse; carries the 1-based line and field name.
class ParseError : public DataError {
 public:
  ParseError(std::size_t line, std::string field, const std::string& what)
      : DataError("line " + std::to_string(line) + ": field '" + field +
                  "': " + what),
        line_(line),
        field_(std::move(field)) {}

  std::size_t line() const { return line_; }
  const std::string& field() const { return field_; }

 private:
  std::size_t line_;
  std::string field_;
};

/// Checkpoint container problems: missing file, truncation, version, schema.
class CheckpointError : public DataError {
 public:
  using DataError::DataError;
};

/// The model variant does not support the requested computation.
class VariantError : public Error {
 public:
  using Error::Error;
};

/// Non-finite values or divergence.
class NumericError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

}  // namespace ccn
