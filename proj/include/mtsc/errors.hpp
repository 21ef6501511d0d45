#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace mtsc {

// Base of every error thrown by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Shape or dimension mismatch between tensors or between data and model.
class DimensionError : public Error {
 public:
  using Error::Error;
};

// Caller violated an API contract (bad flag, bad label, non-scalar loss, ...).
class UsageError : public Error {
 public:
  using Error::Error;
};

// Malformed input text. line() is 1-based, 0 when not tied to a line.
class ParseError : public Error {
 public:
  ParseError(const std::string& what, std::size_t line)
      : Error(line ? "line " + std::to_string(line) + ": " + what : what), line_(line) {}
  std::size_t line() const noexcept { return line_; }

 private:
  std::size_t line_;
};

// A data line is well formed but disagrees with the rest of the file.
class StructureError : public ParseError {
 public:
  using ParseError::ParseError;
};

// A class label that was not declared in the header.
class LabelError : public ParseError {
 public:
  using ParseError::ParseError;
};

// Positional table too short for the requested sequence length.
class CapacityError : public Error {
 public:
  using Error::Error;
};

// A model cannot be composed with the requested attachment.
class CompositionError : public Error {
 public:
  using Error::Error;
};

// Training produced a non-finite loss.
class DivergenceError : public Error {
 public:
  using Error::Error;
};

// Checkpoint archive is truncated, corrupted or inconsistent with its metadata.
class CheckpointError : public Error {
 public:
  using Error::Error;
};

// A file could not be opened, read or written.
class IoError : public Error {
 public:
  using Error::Error;
};

}  // namespace mtsc
