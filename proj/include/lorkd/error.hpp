// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <stdexcept>
#include <string>

namespace lorkd {

/// Base of every error the engine raises. The CLI maps subclasses onto exit codes.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Shape, geometry or argument validation failure.
class ShapeError : public Error {
 public:
  using Error::Error;
};

class ValueError : public Error {
 public:
  using Error::Error;
};

/// NaN / inf encountered during a numeric computation (exit code 3).
class NumericError : public Error {
 public:
  using Error::Error;
};

/// Malformed checkpoint container.
class FormatError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

}  // namespace lorkd
