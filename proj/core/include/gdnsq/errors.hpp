#pragma once

#include <cstddef>
#include <cstdint>
#include <stdexcept>
#include <string>

namespace gdnsq {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Shape or dimension mismatch between operands.
class DimensionError : public Error {
 public:
  using Error::Error;
};

/// Non-finite values or a math-domain violation (log of a non-positive value, overflow).
class NumericError : public Error {
 public:
  NumericError(const std::string& what, std::size_t index)
      : Error(what + " at index " + std::to_string(index)), index_(index) {}
  explicit NumericError(const std::string& what) : Error(what) {}

  std::size_t index() const noexcept { return index_; }

 private:
  std::size_t index_ = 0;
};

/// Parameter outside its admissible domain (l >= u, probability outside (0,1), ...).
class DomainError : public Error {
 public:
  using Error::Error;
};

/// API misuse: backward from a non-scalar root, stage-ordering violations.
class ContractError : public Error {
 public:
  using Error::Error;
};

/// Malformed binary input. Carries the byte offset where parsing failed.
class FormatError : public Error {
 public:
  FormatError(const std::string& what, std::uint64_t offset)
      : Error(what + " (byte offset " + std::to_string(offset) + ")"), offset_(offset) {}

  std::uint64_t offset() const noexcept { return offset_; }

 private:
  std::uint64_t offset_ = 0;
};

class SpecError : public Error {
 public:
  using Error::Error;
};

/// Raised when fake-quantized weights cannot be represented exactly as integers.
class FusionError : public Error {
 public:
  using Error::Error;
};

}  // namespace gdnsq
