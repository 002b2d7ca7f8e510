#pragma once

#include <stdexcept>
#include <string>

namespace pulsereg {

/// Malformed arguments, inconsistent shapes, or invalid configuration.
class InvalidArgument : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// File-system or format problems while reading/writing artifacts.
class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Non-finite loss during optimization.
class DivergenceError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace pulsereg
