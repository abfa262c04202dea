#pragma once

#include <stdexcept>
#include <string>

namespace splatmpm {

/// Bad input: malformed files, invalid configuration, violated preconditions.
class ValidationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Non-finite values or singular states produced during computation.
class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace splatmpm
