#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace forge {

// Root of every error raised by the toolkit.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Tensor extents do not line up for the requested operation.
class DimensionError : public Error {
 public:
  using Error::Error;
};

// A token id falls outside the vocabulary.
class VocabularyError : public Error {
 public:
  using Error::Error;
};

// A configuration value is invalid (rates, widths, unknown keys, ...).
class ConfigError : public Error {
 public:
  using Error::Error;
};

// Malformed binary or text input. Carries the byte offset where parsing stopped.
class FormatError : public Error {
 public:
  FormatError(const std::string& what, std::uint64_t offset)
      : Error(what + " (at byte offset " + std::to_string(offset) + ")"), offset_(offset) {}
  std::uint64_t offset() const { return offset_; }

 private:
  std::uint64_t offset_;
};

// Well-formed input carrying unusable values (non-finite features, empty corpora).
class DataError : public Error {
 public:
  using Error::Error;
};

// NaN or infinity produced by a computation.
class NumericError : public Error {
 public:
  using Error::Error;
};

// Sequence longer than a learned positional table.
class LengthError : public Error {
 public:
  using Error::Error;
};

// File system failure.
class IoError : public Error {
 public:
  using Error::Error;
};

}  // namespace forge
