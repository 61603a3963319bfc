#pragma once

#include <stdexcept>
#include <string>

namespace sdt {

// Every library failure derives from Error so callers can catch one type.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Tensor shapes disagree; the message names the offending axis.
class DimensionError : public Error {
 public:
  using Error::Error;
};

/// API misuse (backward on a non-scalar, unregistered hook, ...).
class UsageError : public Error {
 public:
  using Error::Error;
};

/// Object is in a state that does not permit the operation.
class StateError : public Error {
 public:
  using Error::Error;
};

/// Bad caller-supplied data (labels out of range, too few samples).
class InputError : public Error {
 public:
  using Error::Error;
};

/// Invalid configuration values.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Malformed file contents.
class FormatError : public Error {
 public:
  using Error::Error;
};

/// Training produced a non-finite loss.
class NumericError : public Error {
 public:
  using Error::Error;
};

/// Filesystem failure (missing file, unwritable directory).
class FileError : public Error {
 public:
  using Error::Error;
};

}  // namespace sdt
