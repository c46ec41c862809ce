#pragma once

#include <stdexcept>
#include <string>

namespace mnkit {

// Bad shapes, malformed files, invalid configuration. CLI exit code 3.
class InputError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// A documented precondition of an identity was violated by the caller.
class ContractError : public InputError {
 public:
  using InputError::InputError;
};

// Failures that originate in the numerics rather than the inputs. CLI exit code 4.
class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class SingularFactorError : public NumericalError {
 public:
  using NumericalError::NumericalError;
};

class ConditioningError : public NumericalError {
 public:
  using NumericalError::NumericalError;
};

class FitError : public NumericalError {
 public:
  using NumericalError::NumericalError;
};

}  // namespace mnkit
