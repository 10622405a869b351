#pragma once

#include <stdexcept>
#include <string>

namespace dadt {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Operand shapes are inconsistent with an operator signature or a binding.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// A configuration value violates its documented domain.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// A computation produced a non-finite value or diverged.
class NumericError : public Error {
 public:
  using Error::Error;
};

/// Filesystem failure (missing file, unwritable path).
class IoError : public Error {
 public:
  using Error::Error;
};

enum class FormatErrc {
  malformed_header,
  truncated_payload,
  unsupported_maxval,
  bad_magic,
  unsupported_version,
  bad_checksum,
  bad_record,
};

const char* to_string(FormatErrc code) noexcept;

/// A persisted file (image, checkpoint) could not be decoded.
class FormatError : public Error {
 public:
  FormatError(FormatErrc code, const std::string& what)
      : Error(std::string(to_string(code)) + ": " + what), code_(code) {}

  FormatErrc code() const noexcept { return code_; }

 private:
  FormatErrc code_;
};

}  // namespace dadt
