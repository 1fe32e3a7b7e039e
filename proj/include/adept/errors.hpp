#pragma once

#include <stdexcept>
#include <string>

namespace adept {

// Every error raised by the library derives from Error so callers can catch
// one type; the subclasses map onto the CLI exit-code classes.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Tensor or feature shapes disagree.
class DimensionError : public Error {
 public:
  using Error::Error;
};

/// Input value outside the accepted domain (pixel range, NaN, off-canvas joint).
class DomainError : public Error {
 public:
  using Error::Error;
};

class IndexError : public Error {
 public:
  using Error::Error;
};

/// Caller broke an API precondition (non-scalar loss, unnormalized key, ...).
class ContractError : public Error {
 public:
  using Error::Error;
};

/// Image dimensions are not multiples of the patch size.
class GeometryError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

class StateError : public Error {
 public:
  using Error::Error;
};

class ParameterError : public Error {
 public:
  using Error::Error;
};

/// Invalid or unknown configuration key.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Training produced a non-finite value.
class NumericError : public Error {
 public:
  using Error::Error;
};

}  // namespace adept
