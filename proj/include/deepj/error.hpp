// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>

namespace deepj {

// Base for every error thrown by the library. The CLI maps the concrete
// subclasses onto process exit codes.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Tensor dimensions do not line up.
class ShapeError : public Error {
 public:
  using Error::Error;
};

// Caller passed data that violates an operation's precondition.
class InputError : public Error {
 public:
  using Error::Error;
};

// A configuration value is out of range or inconsistent.
class ConfigError : public Error {
 public:
  using Error::Error;
};

// An operation was requested in a mode that cannot serve it.
class UsageError : public Error {
 public:
  using Error::Error;
};

// A required input file is absent or unreadable.
class MissingInputError : public Error {
 public:
  using Error::Error;
};

}  // namespace deepj
