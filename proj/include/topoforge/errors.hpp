#pragma once

#include <stdexcept>
#include <string>

namespace topoforge {

/// Base of every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Invalid scalar parameter or configuration value.
class ParameterError : public Error {
 public:
  using Error::Error;
};

/// Array or field dimensions do not match.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// Stiffness system cannot be solved (void structure, missing supports).
class SingularSystemError : public Error {
 public:
  using Error::Error;
};

/// Non-finite value or failed numeric procedure.
class NumericError : public Error {
 public:
  using Error::Error;
};

/// Operation called in the wrong object state (e.g. backward without forward).
class StateError : public Error {
 public:
  using Error::Error;
};

/// File could not be read or parsed.
class LoadError : public Error {
 public:
  using Error::Error;
};

/// File could not be written.
class IoError : public Error {
 public:
  using Error::Error;
};

}  // namespace topoforge
