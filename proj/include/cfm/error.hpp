#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace cfm {

// Base for every error raised by the library. The CLI maps subclasses to exit codes.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ShapeError : public Error {
 public:
  using Error::Error;
};

// Violated precondition of an operation (empty index set, B < 2, ...).
class ContractError : public Error {
 public:
  using Error::Error;
};

class DegenerateNormError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

class DataError : public Error {
 public:
  using Error::Error;
};

class GeometryError : public Error {
 public:
  using Error::Error;
};

class DomainError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

// Malformed binary container; carries the byte offset where parsing failed.
class FormatError : public IoError {
 public:
  FormatError(std::uint64_t offset, const std::string& what)
      : IoError("format error at byte " + std::to_string(offset) + ": " + what), offset_(offset) {}
  std::uint64_t offset() const noexcept { return offset_; }

 private:
  std::uint64_t offset_;
};

// Non-finite values during training or evaluation.
class NumericError : public Error {
 public:
  using Error::Error;
};

}  // namespace cfm
