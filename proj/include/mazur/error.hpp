#pragma once

#include <stdexcept>
#include <string>

namespace mazur {

/// Invalid input: bad configuration, malformed expressions, violated preconditions.
class ValidationError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Failure during a numerical computation (non-finite values, failed factorization, ...).
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace mazur
