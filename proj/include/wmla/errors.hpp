#pragma once

#include <stdexcept>
#include <string>

namespace wmla {

// Base for all library errors. The CLI maps subclasses to exit codes.
class Error : public std::runtime_error {
public:
  explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

// Invalid argument to an operation (bad rank, shape mismatch, empty batch).
class ArgumentError : public Error {
public:
  using Error::Error;
};

// Inconsistent configuration (selection/weight mismatch, missing calibration).
class ConfigError : public Error {
public:
  using Error::Error;
};

// Malformed checkpoint file. Message names the violated field.
class FormatError : public Error {
public:
  using Error::Error;
};

// Numerical failure (SVD non-convergence, divergent training).
class NumericalError : public Error {
public:
  using Error::Error;
};

// Out-of-order use of stateful objects (cache/position mismatch).
class StateError : public Error {
public:
  using Error::Error;
};

}  // namespace wmla
